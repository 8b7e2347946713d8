"""
ShiftTrace Shift Simulator

Generates synthetic classification data and parametric, invertible shifts with
ground-truth pre-shift rows, so attribution quality can be measured.
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core import Dataset, MissingMask, RngSpec, load_dataset, save_dataset
from app.errors import DomainError, PreconditionError, SchemaError, TrainingError

logger = logging.getLogger(__name__)

CORRUPTION_KINDS = ["brightness", "contrast", "gaussian_noise", "impulse", "missing"]
SCENARIO_KINDS = ["blobs", "group_signal"]
EXACT_ZERO = "exact_zero"
UNKNOWN = "unknown"

# Defaults relative to the per-feature source standard deviation
BRIGHTNESS_STD = 0.5
CONTRAST_GAMMA = 0.3
NOISE_STD = 1.0
IMPULSE_RATE = 0.1
MISSING_RATE = 0.25


@dataclass(frozen=True)
class ShiftScenario:
    """
    A source sample, its shifted target and the ground truth of the shift.

    Target row j was produced from source row j when `true_pre_shift` is set;
    `train_index`/`test_index` split both domains the same way.
    """

    source: Dataset
    target: Dataset
    true_pre_shift: Optional[np.ndarray]
    descriptor: Dict[str, Any]
    epsilon_label_preserving: str = EXACT_ZERO
    train_index: Optional[np.ndarray] = None
    test_index: Optional[np.ndarray] = None
    realized: Optional[np.ndarray] = field(default=None, compare=False)

    @property
    def has_splits(self) -> bool:
        return self.train_index is not None and self.test_index is not None

    def splits(self) -> Tuple[Dataset, Dataset, Dataset, Dataset]:
        """(source train, source test, target train, target test)."""
        if not self.has_splits:
            raise PreconditionError("Scenario has no train/test split")
        return (
            self.source.subset(self.train_index),
            self.source.subset(self.test_index),
            self.target.subset(self.train_index),
            self.target.subset(self.test_index),
        )


def _feature_names(d: int) -> List[str]:
    return [f"x{i}" for i in range(d)]


def make_blobs(n: int, d: int, n_classes: int = 2, separation: float = 10.0, noise: float = 1.0,
               seed: int = 0) -> Dataset:
    """
    Gaussian clusters, one per class.

    Class means sit at mutual distance >= separation * noise (separation alone
    when noise is 0) and class counts differ by at most one.

    Args:
        n: Sample count
        d: Feature count
        n_classes: Number of classes (>= 2)
        separation: Mean distance in units of the noise scale
        noise: Per-feature standard deviation
        seed: Global seed

    Returns:
        Labeled Dataset
    """
    if n_classes < 2:
        raise DomainError(f"Need at least 2 classes, got {n_classes}")
    if separation <= 0:
        raise DomainError(f"Class separation must be positive, got {separation}")
    if noise < 0:
        raise DomainError(f"Noise scale must be non-negative, got {noise}")
    if d < 1:
        raise DomainError(f"Feature count must be >= 1, got {d}")
    if n < n_classes:
        raise DomainError(f"Cannot place {n_classes} classes in {n} samples")

    rng = RngSpec(seed)
    scale = separation * noise if noise > 0 else separation
    means_rng = rng.stream("shiftgen.blobs.means")
    if n_classes <= d:
        # Scaled orthonormal directions: every pair is exactly `scale` apart
        q, _ = np.linalg.qr(means_rng.standard_normal((d, d)))
        means = q[:, :n_classes].T * (scale / math.sqrt(2.0))
    else:
        points = means_rng.standard_normal((n_classes, d))
        diff = points[:, None, :] - points[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=-1))
        nearest = dist[~np.eye(n_classes, dtype=bool)].min()
        means = points * (scale / nearest)

    labels = rng.stream("shiftgen.blobs.labels").permutation(np.arange(n) % n_classes)
    features = means[labels] + noise * rng.stream("shiftgen.blobs.noise").standard_normal((n, d))
    return Dataset(features=features, labels=labels, feature_names=_feature_names(d), classes=n_classes)


def _feature_subset(features: Optional[Sequence[int]], d: int) -> np.ndarray:
    if features is None:
        return np.arange(d)
    subset = np.unique(np.asarray(list(features), dtype=np.int64))
    if subset.size == 0:
        raise DomainError("Corruption feature subset is empty")
    if subset.min() < 0 or subset.max() >= d:
        raise DomainError(f"Corruption features {subset.tolist()} out of range 0..{d - 1}")
    return subset


def _per_feature(value: Union[None, float, Sequence[float]], default: np.ndarray, name: str) -> np.ndarray:
    if value is None:
        return default
    array = np.broadcast_to(np.asarray(value, dtype=np.float64), default.shape).copy()
    if not np.all(np.isfinite(array)):
        raise DomainError(f"Parameter {name} must be finite")
    return array


def _rate(value: float, name: str) -> float:
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"Rate {name} must lie in [0, 1], got {value}")
    return float(value)


def apply_corruption(data: Dataset, kind: str, params: Optional[Dict[str, Any]] = None,
                     features: Optional[Sequence[int]] = None, seed: int = 0) -> ShiftScenario:
    """
    Shift a labeled sample by a parametric corruption on a feature subset.

    Kinds and parameters (per-feature values or scalars, defaults in brackets):
    - brightness: b [0.5 * std]; x + b
    - contrast: gamma [0.3], midpoint [source mean]; m + gamma * (x - m)
    - gaussian_noise: sigma [1.0 * std]; x + e, e ~ N(0, sigma^2) recorded
    - impulse: p [0.1], low [column min], high [column max]; entries hit with
      probability p become low or high with equal chance
    - missing: q [0.25], columns [the feature subset]; entries flagged missing

    Args:
        data: Source sample
        kind: Corruption kind
        params: Parameter overrides
        features: Corrupted feature subset; all features when None
        seed: Global seed

    Returns:
        ShiftScenario with labels copied and exact_zero label preservation
    """
    if kind not in CORRUPTION_KINDS:
        raise DomainError(f"Unknown corruption kind: {kind}. Must be one of {CORRUPTION_KINDS}")
    if data.has_missing:
        raise PreconditionError("Corruptions apply to complete data only")
    params = dict(params or {})
    subset = _feature_subset(features, data.d)
    x = data.features
    std = x.std(axis=0)
    rng = RngSpec(seed).stream(f"shiftgen.corruption.{kind}")
    out = np.array(x, copy=True)
    missing = None
    realized = None
    resolved: Dict[str, Any] = {}

    if kind == "brightness":
        b = _per_feature(params.get("b"), BRIGHTNESS_STD * std, "b")
        out[:, subset] = x[:, subset] + b[subset]
        resolved["b"] = b[subset].tolist()
    elif kind == "contrast":
        gamma = float(params.get("gamma", CONTRAST_GAMMA))
        if not math.isfinite(gamma):
            raise DomainError(f"Contrast factor must be finite, got {gamma}")
        m = _per_feature(params.get("midpoint"), x.mean(axis=0), "midpoint")
        # Written as an increment so gamma = 1 leaves the values bit-identical
        out[:, subset] = x[:, subset] + (gamma - 1.0) * (x[:, subset] - m[subset])
        resolved.update(gamma=gamma, midpoint=m[subset].tolist())
    elif kind == "gaussian_noise":
        sigma = _per_feature(params.get("sigma"), NOISE_STD * std, "sigma")
        if np.any(sigma < 0):
            raise DomainError("Noise scale sigma must be non-negative")
        realized = np.zeros_like(x)
        realized[:, subset] = rng.standard_normal((data.n, subset.size)) * sigma[subset]
        out[:, subset] = x[:, subset] + realized[:, subset]
        resolved["sigma"] = sigma[subset].tolist()
    elif kind == "impulse":
        p = _rate(float(params.get("p", IMPULSE_RATE)), "p")
        low = _per_feature(params.get("low"), x.min(axis=0), "low")
        high = _per_feature(params.get("high"), x.max(axis=0), "high")
        hit = rng.random((data.n, subset.size)) < p
        pick_high = rng.random((data.n, subset.size)) < 0.5
        replacement = np.where(pick_high, high[subset], low[subset])
        out[:, subset] = np.where(hit, replacement, x[:, subset])
        realized = np.zeros_like(x, dtype=bool)
        realized[:, subset] = hit
        resolved.update(p=p, low=low[subset].tolist(), high=high[subset].tolist())
    else:
        q = _rate(float(params.get("q", MISSING_RATE)), "q")
        columns = _feature_subset(params.get("columns", subset.tolist()), data.d)
        mask = np.zeros_like(x, dtype=bool)
        mask[:, columns] = rng.random((data.n, columns.size)) < q
        out[mask] = np.nan
        missing = MissingMask(mask)
        realized = mask
        subset = columns
        resolved.update(q=q, columns=columns.tolist())

    target = Dataset(features=out, labels=data.labels, feature_names=data.feature_names, missing=missing,
                     classes=data.classes)
    descriptor = {"kind": kind, "params": resolved, "features": subset.tolist(), "seed": int(seed)}
    logger.info(f"✓ Applied {kind} corruption to {subset.size} of {data.d} features")
    return ShiftScenario(
        source=data,
        target=target,
        true_pre_shift=np.array(x, copy=True),
        descriptor=descriptor,
        epsilon_label_preserving=EXACT_ZERO,
        realized=realized,
    )


@dataclass(frozen=True)
class MeanImputer:
    """Per-column training means."""

    means: np.ndarray

    @classmethod
    def fit(cls, train: Dataset) -> "MeanImputer":
        x = np.array(train.features, copy=True)
        usable = np.isfinite(x)
        counts = usable.sum(axis=0)
        if np.any(counts == 0):
            empty = np.flatnonzero(counts == 0).tolist()
            raise TrainingError(f"Cannot fit mean imputer: columns {empty} have no observed training values")
        x[~usable] = 0.0
        return cls(means=x.sum(axis=0) / counts)

    def impute(self, data: Dataset) -> Dataset:
        """Replace missing entries with the training means; other entries are untouched."""
        if data.d != self.means.size:
            raise DomainError(f"Imputer fitted on {self.means.size} features, data has {data.d}")
        if not data.has_missing:
            return data
        filled = np.where(data.missing.mask, self.means[None, :], data.features)
        return data.with_features(filled)


def mean_imputer(train: Dataset) -> MeanImputer:
    return MeanImputer.fit(train)


def impute(imputer: MeanImputer, data: Dataset) -> Dataset:
    return imputer.impute(data)


def split_scenario(scenario: ShiftScenario, test_fraction: float = 0.5, seed: int = 0) -> ShiftScenario:
    """Attach shared train/test index sets for both domains."""
    if not 0.0 < test_fraction < 1.0:
        raise DomainError(f"Test fraction must lie in (0, 1), got {test_fraction}")
    n = min(scenario.source.n, scenario.target.n)
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n_test >= n:
        raise DomainError(f"Cannot split {n} rows with test fraction {test_fraction}")
    order = RngSpec(seed).stream("shiftgen.split").permutation(n)
    return replace(scenario, train_index=np.sort(order[n_test:]), test_index=np.sort(order[:n_test]))


@dataclass(frozen=True)
class GroupSignalData:
    """Labeled data with a separate binary group attribute (0 = group A, 1 = group B)."""

    data: Dataset
    group: np.ndarray
    band: np.ndarray


def make_group_signal_data(n: int, d: int, band: Sequence[int], delta: float, seed: int = 0,
                           n_classes: int = 2, separation: float = 10.0, noise: float = 1.0) -> GroupSignalData:
    """
    Blobs whose group-B rows are offset by `delta` inside the band only.

    Class labels are independent of the group attribute.
    """
    band = np.unique(np.asarray(list(band), dtype=np.int64))
    if band.size == 0:
        raise DomainError("Designated band is empty")
    if band.min() < 0 or band.max() >= d:
        raise DomainError(f"Band {band.tolist()} out of range 0..{d - 1}")
    data = make_blobs(n, d, n_classes, separation, noise, seed)
    group = RngSpec(seed).stream("shiftgen.group").permutation(np.arange(n) % 2)
    features = np.array(data.features, copy=True)
    rows = np.flatnonzero(group == 1)
    features[np.ix_(rows, band)] += delta
    return GroupSignalData(data=data.with_features(features), group=group, band=band)


@dataclass(frozen=True)
class SelectionBiasSplit:
    """Group-A source and equal-size targets at increasing group-B fractions."""

    source: Dataset
    mixes: List[float]
    targets: List[Dataset]
    target_groups: List[np.ndarray]


def selection_bias_split(data: Dataset, group: np.ndarray, rho: float = 1.0, seed: int = 0,
                         size: Optional[int] = None) -> SelectionBiasSplit:
    """
    Source drawn from group A only; targets with group-B fractions 0, rho/2 and rho.

    Args:
        data: Labeled sample, group attribute excluded from the features
        group: Binary group attribute per row
        rho: Group-B fraction of the strong-shift target
        seed: Global seed
        size: Rows per sample; by default the largest size the groups allow

    Returns:
        SelectionBiasSplit
    """
    group = np.asarray(group)
    if group.shape != (data.n,):
        raise DomainError(f"Group vector has shape {group.shape}, data has {data.n} rows")
    if not set(np.unique(group).tolist()) == {0, 1}:
        raise DomainError("Selection bias split needs both group values 0 and 1 present")
    rho = _rate(rho, "rho")

    rng = RngSpec(seed)
    group_a = rng.stream("shiftgen.bias.a").permutation(np.flatnonzero(group == 0))
    group_b = np.flatnonzero(group == 1)
    m = size if size is not None else min(group_a.size // 2, group_b.size)
    mixes = [0.0, rho / 2.0, rho]
    need_b = int(round(rho * m))
    if m < 1 or group_a.size < 2 * m or group_b.size < need_b:
        raise DomainError(
            f"Insufficient samples per group: {group_a.size} in A, {group_b.size} in B for samples of {m}"
        )
    source_idx = np.sort(group_a[:m])
    pool_a = group_a[m:]

    targets, target_groups = [], []
    for k, mix in enumerate(mixes):
        stream = rng.stream("shiftgen.bias.target", k)
        k_b = int(round(mix * m))
        idx = np.concatenate([
            stream.choice(pool_a, size=m - k_b, replace=False),
            stream.choice(group_b, size=k_b, replace=False),
        ]).astype(np.int64)
        idx = np.sort(idx)
        targets.append(data.subset(idx))
        target_groups.append(group[idx])
    logger.info(f"✓ Selection bias split: source {m} rows from group A, targets at B fractions {mixes}")
    return SelectionBiasSplit(source=data.subset(source_idx), mixes=mixes, targets=targets,
                              target_groups=target_groups)


def generate(kind: str = "blobs", n: int = 400, d: int = 8, n_classes: int = 2, separation: float = 10.0,
             noise: float = 1.0, corruption: str = "brightness", params: Optional[Dict[str, Any]] = None,
             features: Optional[Sequence[int]] = None, band: Optional[Sequence[int]] = None,
             delta: float = 10.0, rho: float = 1.0, test_fraction: float = 0.5, seed: int = 0) -> ShiftScenario:
    """
    Build a complete scenario with train/test splits.

    "blobs" corrupts a blob sample; "group_signal" trains on group A and
    targets the strong selection-bias mix (no ground-truth pre-shift rows).
    """
    if kind == "blobs":
        data = make_blobs(n, d, n_classes, separation, noise, seed)
        scenario = apply_corruption(data, corruption, params, features, seed)
    elif kind == "group_signal":
        band = list(band) if band is not None else list(range(max(1, d // 4)))
        signal = make_group_signal_data(4 * n, d, band, delta, seed, n_classes, separation, noise)
        split = selection_bias_split(signal.data, signal.group, rho, seed, size=n)
        scenario = ShiftScenario(
            source=split.source,
            target=split.targets[-1],
            true_pre_shift=None,
            descriptor={"kind": "group_signal", "params": {"delta": delta, "rho": rho},
                        "features": signal.band.tolist(), "seed": int(seed),
                        "target_groups": split.target_groups[-1].tolist()},
            epsilon_label_preserving=UNKNOWN,
        )
    else:
        raise DomainError(f"Unknown scenario kind: {kind}. Must be one of {SCENARIO_KINDS}")
    return split_scenario(scenario, test_fraction, seed)


def save_scenario(scenario: ShiftScenario, directory: Union[str, Path]) -> Path:
    """Write source.csv, target.csv, pre_shift.csv (when known) and scenario.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_dataset(scenario.source, directory / "source.csv")
    save_dataset(scenario.target, directory / "target.csv")
    if scenario.true_pre_shift is not None:
        save_dataset(scenario.source.with_features(scenario.true_pre_shift), directory / "pre_shift.csv")

    meta = {
        "descriptor": scenario.descriptor,
        "epsilon_label_preserving": scenario.epsilon_label_preserving,
        "train_index": None if scenario.train_index is None else scenario.train_index.tolist(),
        "test_index": None if scenario.test_index is None else scenario.test_index.tolist(),
    }
    with open(directory / "scenario.json", "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"✓ Saved scenario to {directory}")
    return directory


def load_scenario(directory: Union[str, Path]) -> ShiftScenario:
    """Read a scenario directory written by save_scenario."""
    directory = Path(directory)
    meta_path = directory / "scenario.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"File not found: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"Invalid scenario metadata {meta_path}: {e}")
    if "descriptor" not in meta:
        raise SchemaError(f"Scenario metadata {meta_path} lacks a descriptor")

    source = load_dataset(directory / "source.csv")
    target = load_dataset(directory / "target.csv", classes=source.n_classes)
    pre_path = directory / "pre_shift.csv"
    true_pre_shift = load_dataset(pre_path).features if pre_path.exists() else None

    def index(name: str) -> Optional[np.ndarray]:
        values = meta.get(name)
        return None if values is None else np.asarray(values, dtype=np.int64)

    return ShiftScenario(
        source=source,
        target=target,
        true_pre_shift=true_pre_shift,
        descriptor=meta["descriptor"],
        epsilon_label_preserving=meta.get("epsilon_label_preserving", UNKNOWN),
        train_index=index("train_index"),
        test_index=index("test_index"),
    )
