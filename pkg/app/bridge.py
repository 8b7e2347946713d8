"""
External model bridge.

Wraps a user command that reads feature rows as CSV on stdin and writes one
probability row per input on stdout, so any black-box model can stand in for a
trained model file.
"""
import csv
import hashlib
import io
import logging
import shlex
import subprocess
import threading
from collections import OrderedDict
from typing import Dict, List, Optional

import numpy as np

from app.core import format_float
from app.errors import DomainError, ProtocolError, ShapeError

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6


def encode_rows(x: np.ndarray) -> str:
    """Feature rows as header-less CSV with 17 significant digits."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in np.atleast_2d(x):
        writer.writerow([format_float(v) for v in row])
    return buffer.getvalue()


def decode_probabilities(text: str, expected_rows: int) -> np.ndarray:
    """
    Parse and validate probability rows.

    Raises ProtocolError on empty output, a row count mismatch, ragged rows,
    unparsable cells, or rows off the probability simplex.
    """
    rows = [row for row in csv.reader(io.StringIO(text)) if row and any(cell.strip() for cell in row)]
    if expected_rows > 0 and not rows:
        raise ProtocolError(f"External model returned no output for {expected_rows} rows")
    if len(rows) != expected_rows:
        raise ProtocolError(f"External model returned {len(rows)} rows for {expected_rows} inputs")
    width = len(rows[0])
    proba = np.empty((expected_rows, width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise ProtocolError(f"Output row {i + 1} has {len(row)} values, expected {width}")
        try:
            proba[i] = [float(cell) for cell in row]
        except ValueError:
            raise ProtocolError(f"Output row {i + 1} is not numeric: {row}")
        if not np.all(np.isfinite(proba[i])) or proba[i].min() < 0 or abs(proba[i].sum() - 1.0) > SIMPLEX_TOL:
            raise ProtocolError(f"Output row {i + 1} is not a probability vector: {row}")
    return proba


class ExternalModel:
    """
    ProbabilisticModel backed by a subprocess.

    Predictions are cached per row (keyed by a hash of the row bytes) in a
    least-recently-used table of at most ``max_cache_rows`` rows shared by
    worker threads. The lock guards the table only; subprocess calls from
    different threads run concurrently.
    """

    def __init__(self, command: str, input_dim: int, n_classes: Optional[int] = None, timeout: float = 600.0,
                 max_cache_rows: int = 1_000_000):
        self.command = command
        self.argv = shlex.split(command)
        if not self.argv:
            raise ProtocolError("External model command is empty")
        if max_cache_rows < 1:
            raise DomainError(f"max_cache_rows must be >= 1, got {max_cache_rows}")
        self.input_dim = int(input_dim)
        self.timeout = timeout
        self.max_cache_rows = int(max_cache_rows)
        self._cache: "OrderedDict[bytes, np.ndarray]" = OrderedDict()
        self._lock = threading.Lock()
        self.calls = 0
        if n_classes is None:
            n_classes = self.predict_proba(np.zeros((1, self.input_dim))).shape[1]
        self.n_classes = int(n_classes)

    @staticmethod
    def _key(row: np.ndarray) -> bytes:
        return hashlib.blake2b(np.ascontiguousarray(row, dtype=np.float64).tobytes(), digest_size=16).digest()

    @property
    def cache_size(self) -> int:
        with self._lock:
            return len(self._cache)

    def _run(self, x: np.ndarray) -> np.ndarray:
        try:
            completed = subprocess.run(self.argv, input=encode_rows(x), capture_output=True, text=True,
                                       timeout=self.timeout, check=False)
        except FileNotFoundError:
            raise ProtocolError(f"External model command not found: {self.argv[0]}")
        except subprocess.TimeoutExpired:
            raise ProtocolError(f"External model timed out after {self.timeout}s")
        if completed.returncode != 0:
            raise ProtocolError(
                f"External model exited with status {completed.returncode}: {completed.stderr.strip()}"
            )
        with self._lock:
            self.calls += 1
        return decode_probabilities(completed.stdout, x.shape[0])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"Model expects {self.input_dim} features, got {x.shape[1]}")
        keys = [self._key(row) for row in x]

        found: Dict[bytes, Optional[np.ndarray]] = {}
        pending: List[int] = []
        with self._lock:
            for i, key in enumerate(keys):
                if key in found:
                    continue
                cached = self._cache.get(key)
                if cached is None:
                    found[key] = None
                    pending.append(i)
                else:
                    self._cache.move_to_end(key)
                    found[key] = cached

        if pending:
            proba = self._run(x[pending])
            if hasattr(self, "n_classes") and proba.shape[1] != self.n_classes:
                raise ProtocolError(f"External model returned {proba.shape[1]} classes, expected {self.n_classes}")
            with self._lock:
                for i, row in zip(pending, proba):
                    found[keys[i]] = row
                    self._cache[keys[i]] = row
                    self._cache.move_to_end(keys[i])
                while len(self._cache) > self.max_cache_rows:
                    self._cache.popitem(last=False)

        out = np.stack([found[key] for key in keys])
        return out[0] if single else out
