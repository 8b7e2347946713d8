"""
Data model shared by every ShiftTrace module.

Holds the Dataset container, missing-value masks, feature groupings, the CSV
contract, and the seeded random stream derivation.
"""
import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import DomainError, ParseError, SchemaError, ShapeError, ShiftTraceError

logger = logging.getLogger(__name__)

DEFAULT_LABEL_COLUMN = "label"
MISSING_TOKENS = ("", "NaN")
_MASK64 = (1 << 64) - 1


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class MissingMask:
    """Boolean matrix, True where a value is missing."""

    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ShapeError(f"Missing mask must be 2-D, got shape {mask.shape}")
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def any(self) -> bool:
        return bool(self.mask.any())


@dataclass(frozen=True)
class Dataset:
    """
    Dense feature matrix with optional integer labels.

    Missing entries are stored as NaN and flagged in `missing`; every other
    entry must be finite. `classes` is the size C of the label space; it
    defaults to the largest label + 1 and must be at least 2. Instances are
    immutable after construction.
    """

    features: np.ndarray
    labels: Optional[np.ndarray] = None
    feature_names: Optional[List[str]] = None
    missing: Optional[MissingMask] = None
    classes: Optional[int] = None

    def __post_init__(self):
        features = np.array(self.features, dtype=np.float64)
        if features.ndim != 2:
            raise ShapeError(f"Features must be a 2-D matrix, got shape {features.shape}")
        n, d = features.shape
        if n < 1 or d < 1:
            raise ShapeError(f"Dataset needs n >= 1 and d >= 1, got n={n}, d={d}")

        if self.missing is not None and self.missing.mask.shape != features.shape:
            raise ShapeError(
                f"Missing mask shape {self.missing.mask.shape} does not match features {features.shape}"
            )
        flagged = self.missing.mask if self.missing is not None else np.zeros_like(features, dtype=bool)
        bad = ~np.isfinite(features) & ~flagged
        if bad.any():
            row, col = np.argwhere(bad)[0]
            raise DomainError(f"Non-finite feature at row {row + 1}, column {col} without a missing flag")
        features[flagged] = np.nan
        object.__setattr__(self, "features", _readonly(features))

        if self.labels is not None:
            labels = np.array(self.labels)
            if labels.shape != (n,):
                raise ShapeError(f"Labels must have shape ({n},), got {labels.shape}")
            if labels.size and not np.issubdtype(labels.dtype, np.integer):
                if not np.all(np.equal(np.mod(labels, 1), 0)):
                    raise DomainError("Labels must be integer class ids")
            labels = labels.astype(np.int64)
            if labels.min() < 0:
                raise DomainError(f"Labels must be non-negative class ids, found {labels.min()}")
            classes = int(labels.max()) + 1 if self.classes is None else int(self.classes)
            if classes < 2:
                raise SchemaError(f"Labels must span a label space of C >= 2 classes, got C = {classes}")
            if labels.max() >= classes:
                raise DomainError(f"Label {labels.max()} outside 0..{classes - 1}")
            object.__setattr__(self, "classes", classes)
            object.__setattr__(self, "labels", _readonly(labels))

        if self.feature_names is not None:
            if len(self.feature_names) != d:
                raise ShapeError(f"Expected {d} feature names, got {len(self.feature_names)}")
            object.__setattr__(self, "feature_names", list(self.feature_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    @property
    def has_missing(self) -> bool:
        return self.missing is not None and self.missing.any

    @property
    def n_classes(self) -> int:
        """Size C of the label space; 0 for unlabeled data."""
        if self.labels is None:
            return 0
        return self.classes

    def subset(self, indices: Sequence[int]) -> "Dataset":
        """Rows at `indices`, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            feature_names=self.feature_names,
            missing=None if self.missing is None else MissingMask(self.missing.mask[idx]),
            classes=self.classes,
        )

    def with_features(self, features: np.ndarray, missing: Optional[MissingMask] = None) -> "Dataset":
        """Same labels and names, new feature matrix."""
        return Dataset(features=features, labels=self.labels, feature_names=self.feature_names, missing=missing,
                       classes=self.classes)

    def without_labels(self) -> "Dataset":
        return Dataset(features=self.features, feature_names=self.feature_names, missing=self.missing)


@dataclass(frozen=True)
class FeatureGrouping:
    """Surjective map from feature index to group id (the player set)."""

    group_of: np.ndarray
    g: int = field(init=False)

    def __post_init__(self):
        group_of = np.array(self.group_of, dtype=np.int64)
        if group_of.ndim != 1 or group_of.size < 1:
            raise ShapeError("Grouping vector must be a non-empty 1-D vector")
        if group_of.min() < 0:
            raise DomainError(f"Group ids must be non-negative, found {group_of.min()}")
        g = int(group_of.max()) + 1
        present = np.unique(group_of)
        if present.size != g:
            gaps = sorted(set(range(g)) - set(present.tolist()))
            raise DomainError(f"Grouping is not surjective onto 0..{g - 1}: missing group ids {gaps}")
        object.__setattr__(self, "group_of", _readonly(group_of))
        object.__setattr__(self, "g", g)

    @property
    def d(self) -> int:
        return self.group_of.size

    @property
    def is_identity(self) -> bool:
        return self.g == self.d and bool(np.all(self.group_of == np.arange(self.d)))

    def members(self, group: int) -> np.ndarray:
        """Feature indices belonging to `group`."""
        return np.flatnonzero(self.group_of == group)

    def feature_mask(self, player_mask: np.ndarray) -> np.ndarray:
        """
        Expand player masks to feature masks.

        Args:
            player_mask: bool array [..., g]

        Returns:
            bool array [..., d]
        """
        player_mask = np.asarray(player_mask, dtype=bool)
        if player_mask.shape[-1] != self.g:
            raise ShapeError(f"Coalition mask has {player_mask.shape[-1]} players, grouping has {self.g}")
        return player_mask[..., self.group_of]

    def aggregate_or(self, feature_flags: np.ndarray) -> np.ndarray:
        """Group flag = OR over the member features."""
        flags = np.zeros(self.g, dtype=bool)
        np.logical_or.at(flags, self.group_of, np.asarray(feature_flags, dtype=bool))
        return flags


def make_grouping(d: int, kind: str = "identity", block_size: Optional[int] = None,
                  vector: Optional[Sequence[int]] = None) -> FeatureGrouping:
    """
    Build a feature grouping.

    Args:
        d: Feature count
        kind: "identity", "contiguous_blocks", or "explicit"
        block_size: Block width for contiguous blocks; the last block may be short
        vector: Group id per feature for the explicit kind

    Returns:
        Validated FeatureGrouping
    """
    if d < 1:
        raise DomainError(f"Feature count must be >= 1, got {d}")
    if kind == "identity":
        return FeatureGrouping(np.arange(d))
    if kind == "contiguous_blocks":
        if block_size is None or block_size < 1:
            raise DomainError(f"Block size must be >= 1, got {block_size}")
        return FeatureGrouping(np.arange(d) // block_size)
    if kind == "explicit":
        if vector is None or len(vector) != d:
            raise ShapeError(f"Explicit grouping needs {d} entries")
        return FeatureGrouping(np.asarray(vector))
    raise DomainError(f"Unknown grouping kind: {kind}")


def parse_grouping(text: str, d: int) -> FeatureGrouping:
    """
    Parse the CLI grouping syntax.

    Accepted forms: "identity", "blocks:<size>", "explicit:<id>,<id>,...".
    """
    text = (text or "identity").strip()
    if text == "identity":
        return make_grouping(d, "identity")
    kind, _, arg = text.partition(":")
    try:
        if kind == "blocks":
            return make_grouping(d, "contiguous_blocks", block_size=int(arg))
        if kind == "explicit":
            return make_grouping(d, "explicit", vector=[int(v) for v in arg.split(",")])
    except ShiftTraceError:
        raise
    except ValueError as e:
        raise DomainError(f"Invalid grouping specification {text!r}: {e}")
    raise DomainError(f"Unknown grouping specification: {text!r}")


def read_header(path: Union[str, Path]) -> List[str]:
    """Column names of a dataset file."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        header = next(csv.reader(f), None)
    if not header:
        raise SchemaError(f"Empty dataset file: {path}")
    return [h.strip() for h in header]


def load_dataset(path: Union[str, Path], label_column: Optional[str] = DEFAULT_LABEL_COLUMN,
                 classes: Optional[int] = None) -> Dataset:
    """
    Read a dataset from the CSV contract.

    Args:
        path: UTF-8 CSV with a header row
        label_column: Column holding integer labels, or None for unlabeled data
        classes: Size of the label space; inferred from the labels when None

    Returns:
        Dataset; empty cells and "NaN" populate its missing mask
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")

    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise SchemaError(f"Empty dataset file: {path}")

    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if not body:
        raise SchemaError(f"No data rows in {path}")

    label_idx = None
    if label_column is not None:
        if label_column not in header:
            raise SchemaError(f"Label column {label_column!r} not found in {path}")
        label_idx = header.index(label_column)
    feature_idx = [i for i in range(len(header)) if i != label_idx]
    if not feature_idx:
        raise SchemaError(f"No feature columns in {path}")

    n, d = len(body), len(feature_idx)
    features = np.empty((n, d), dtype=np.float64)
    mask = np.zeros((n, d), dtype=bool)
    labels = np.empty(n, dtype=np.int64) if label_idx is not None else None

    for r, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise SchemaError(f"Row {r} has {len(row)} cells, header has {len(header)}")
        for j, c in enumerate(feature_idx):
            cell = row[c].strip()
            if cell in MISSING_TOKENS:
                mask[r - 1, j] = True
                features[r - 1, j] = np.nan
                continue
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(f"Malformed numeric cell {cell!r} at row {r}, column {header[c]!r}")
            if not math.isfinite(value):
                raise ParseError(f"Non-finite cell {cell!r} at row {r}, column {header[c]!r}")
            features[r - 1, j] = value
        if label_idx is not None:
            cell = row[label_idx].strip()
            try:
                labels[r - 1] = int(cell)
            except ValueError:
                raise ParseError(f"Malformed label {cell!r} at row {r}, column {header[label_idx]!r}")

    missing = MissingMask(mask) if mask.any() else None
    if missing is not None:
        logger.debug(f"{int(mask.sum())} missing cells in {path}")
    return Dataset(
        features=features,
        labels=labels,
        feature_names=[header[c] for c in feature_idx],
        missing=missing,
        classes=classes if labels is not None else None,
    )


def format_float(value: float) -> str:
    """Decimal text with 17 significant digits (bit-exact round trip)."""
    return "%.17g" % value


def save_dataset(dataset: Dataset, path: Union[str, Path],
                 label_column: str = DEFAULT_LABEL_COLUMN) -> None:
    """Write a dataset following the CSV contract; missing cells are left empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = dataset.feature_names or [f"x{i}" for i in range(dataset.d)]
    mask = dataset.missing.mask if dataset.missing is not None else None

    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(names + ([label_column] if dataset.has_labels else []))
        for i in range(dataset.n):
            cells = [
                "" if mask is not None and mask[i, j] else format_float(dataset.features[i, j])
                for j in range(dataset.d)
            ]
            if dataset.has_labels:
                cells.append(str(int(dataset.labels[i])))
            writer.writerow(cells)


def mix64(x: int) -> int:
    """SplitMix64 finalizer: a fixed 64-bit mixing function."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _tag_hash(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngSpec:
    """
    Global seed from which every use site derives its own random stream.

    A stream is keyed by (global_seed, module tag, instance index), so results
    never depend on the order in which parallel workers run.
    """

    global_seed: int = 0

    def __post_init__(self):
        if not 0 <= int(self.global_seed) <= _MASK64:
            raise DomainError(f"Seed must be an unsigned 64-bit integer, got {self.global_seed}")

    def stream_seed(self, tag: str, index: int = 0) -> int:
        state = mix64(int(self.global_seed))
        state = mix64(state ^ _tag_hash(tag))
        return mix64(state ^ (int(index) & _MASK64))

    def stream(self, tag: str, index: int = 0) -> np.random.Generator:
        """Independent generator for one use site."""
        return np.random.Generator(np.random.PCG64(self.stream_seed(tag, index)))


def as_rng(seed: Union[int, RngSpec, np.random.Generator, None], tag: str,
           index: int = 0) -> np.random.Generator:
    """Normalise the seed forms accepted across the package into a generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, RngSpec):
        return seed.stream(tag, index)
    return RngSpec(0 if seed is None else int(seed)).stream(tag, index)


def equalize_sizes(source: Dataset, target: Dataset,
                   rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Index sets of equal size for both samples.

    The larger sample is subsampled uniformly without replacement; the kept
    indices are returned in increasing order.
    """
    m = min(source.n, target.n)
    source_idx = np.arange(source.n)
    target_idx = np.arange(target.n)
    if source.n > m:
        source_idx = np.sort(rng.choice(source.n, size=m, replace=False))
    elif target.n > m:
        target_idx = np.sort(rng.choice(target.n, size=m, replace=False))
    return source_idx, target_idx
