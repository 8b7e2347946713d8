"""
Runtime configuration and logging setup.

Values come from the environment, optionally seeded from a `.env` file at the
repository root. Command-line flags override everything read here.
"""
import logging
import os
import sys
from pathlib import Path

import psutil
from dotenv import load_dotenv

from app.errors import ConfigError

# Load environment variables from .env file
env_path = Path(__file__).parent.parent / ".env"
load_dotenv(dotenv_path=env_path)

MAX_EXACT_CAP = 20
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be an integer, got {raw!r}")


def _env_float(name: str, default: float) -> float:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be a number, got {raw!r}")


def default_threads() -> int:
    """Available parallelism, as reported by psutil."""
    return psutil.cpu_count(logical=True) or 1


SEED = _env_int("SHIFTTRACE_SEED", 0)
THREADS = _env_int("SHIFTTRACE_THREADS", default_threads())
LOG_LEVEL = os.environ.get("SHIFTTRACE_LOG_LEVEL", "INFO").upper()
EXACT_CAP = _env_int("SHIFTTRACE_EXACT_CAP", 12)
BUDGET = _env_int("SHIFTTRACE_BUDGET", 3000)
TAU = _env_float("SHIFTTRACE_TAU", 1e-4)

if not 1 <= EXACT_CAP <= MAX_EXACT_CAP:
    raise ConfigError(f"SHIFTTRACE_EXACT_CAP must lie in 1..{MAX_EXACT_CAP}, got {EXACT_CAP}")
if THREADS < 1:
    raise ConfigError(f"SHIFTTRACE_THREADS must be positive, got {THREADS}")


def setup_logging(level: str = LOG_LEVEL) -> None:
    """Send human-readable logs to stderr; stdout stays reserved for JSON."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def process_summary() -> dict:
    """Resident memory and thread count of this process."""
    process = psutil.Process(os.getpid())
    return {
        "memory_mb": round(process.memory_info().rss / (1024 * 1024), 2),
        "num_threads": process.num_threads(),
    }
