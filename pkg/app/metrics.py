"""
Quality metrics for shift attributions.

Shift-faithfulness and global performance correlation compare attributions to
true loss changes; complexity measures how concentrated they are; ROAR-S
removes the top-ranked features, retrains, and reports how much of the
shift-induced loss gap remains.
"""
import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from app import config
from app.core import Dataset, FeatureGrouping, RngSpec, make_grouping
from app.errors import DomainError, EvaluationError, PreconditionError, ShapeError
from app.model import LossKind, ModelKind, ProbabilisticModel, TrainConfig, losses, train
from app.monitor import explain_shift
from app.shapley import Attribution, EstimatorConfig
from app.simulator import MeanImputer, ShiftScenario

logger = logging.getLogger(__name__)

DEFAULT_SUBSETS = 100
DEFAULT_REMOVAL = 0.05


def pearson(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Pearson correlation, or None when either side has zero variance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"Correlation needs two vectors of equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        return None
    da = a - a.mean()
    db = b - b.mean()
    norm = math.sqrt(float(da @ da) * float(db @ db))
    if norm == 0.0:
        logger.debug("Correlation undefined: zero variance")
        return None
    return float(np.clip(float(da @ db) / norm, -1.0, 1.0))


def mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    """Mean over the defined entries; None when there are none."""
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def _values(phi: Union[Attribution, Sequence[float]]) -> np.ndarray:
    return np.asarray(phi.values if isinstance(phi, Attribution) else phi, dtype=np.float64)


def default_subset_size(g: int) -> int:
    return min(max(1, g // 4), max(1, g - 1))


def shift_faithfulness(phi: Union[Attribution, Sequence[float]], model: ProbabilisticModel, x_t: np.ndarray,
                       x_pre: np.ndarray, y_t: int, y_s: int, grouping: FeatureGrouping,
                       subset_size: Optional[int] = None, n_subsets: int = DEFAULT_SUBSETS,
                       rng: Optional[np.random.Generator] = None,
                       loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> Optional[float]:
    """
    Correlation between attribution mass and the true effect of reverting a subset.

    For n_subsets coalitions K of fixed size, correlates sum_{i in K} phi_i with
    L(f(x_t), y_t) - L(f(x_t with K reverted to x_pre), y_s).

    Args:
        phi: Attribution of the instance
        model: Model under monitoring
        x_t: Shifted sample
        x_pre: Its true pre-shift version
        y_t: Target label
        y_s: Label of the pre-shift sample
        grouping: Player definition of phi
        subset_size: |K| in 1..g-1; a quarter of the players by default
        n_subsets: Number of sampled coalitions
        rng: Generator for the coalitions
        loss_kind: Loss

    Returns:
        Pearson correlation or None when undefined
    """
    values = _values(phi)
    g = grouping.g
    if values.shape != (g,):
        raise ShapeError(f"Attribution has {values.size} players, grouping has {g}")
    size = default_subset_size(g) if subset_size is None else int(subset_size)
    if not 1 <= size <= g - 1:
        raise DomainError(f"Subset size must lie in 1..{g - 1}, got {size}")
    if n_subsets < 2:
        raise DomainError(f"Need at least 2 subsets, got {n_subsets}")
    rng = rng if rng is not None else RngSpec(0).stream("metrics.sfaith")

    reverted = np.zeros((n_subsets, g), dtype=bool)
    for k in range(n_subsets):
        reverted[k, rng.choice(g, size=size, replace=False)] = True
    keep = grouping.feature_mask(~reverted)
    x_t = np.asarray(x_t, dtype=np.float64)
    inputs = np.where(keep, x_t[None, :], np.asarray(x_pre, dtype=np.float64)[None, :])

    shifted_loss = float(losses(loss_kind, model.predict_proba(x_t[None, :]), np.array([y_t]))[0])
    partial_loss = losses(loss_kind, model.predict_proba(inputs), np.full(n_subsets, y_s))
    return pearson(reverted.astype(np.float64) @ values, shifted_loss - partial_loss)


def marginal_instances(attributions: Sequence[Attribution], tau: float = config.TAU) -> List[int]:
    """Instances whose anticipated change |v_full - v_empty| is below tau."""
    return [j for j, a in enumerate(attributions) if abs(a.v_full - a.v_empty) < tau]


def shift_faithfulness_dataset(attributions: Sequence[Attribution], model: ProbabilisticModel,
                               target: Dataset, pre_shift: np.ndarray, pre_labels: np.ndarray,
                               grouping: FeatureGrouping, subset_size: Optional[int] = None,
                               n_subsets: int = DEFAULT_SUBSETS, rng: Optional[RngSpec] = None,
                               tau: float = config.TAU,
                               loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> Dict[str, Any]:
    """
    S-Faith per instance and its mean over defined values.

    Instances with a marginal anticipated change are excluded and listed.
    """
    if not target.has_labels:
        raise PreconditionError("Shift-faithfulness needs target labels")
    pre_shift = np.asarray(pre_shift, dtype=np.float64)
    if len(attributions) != target.n or pre_shift.shape != target.features.shape:
        raise ShapeError(
            f"{len(attributions)} attributions, {target.n} target rows and pre-shift shape {pre_shift.shape} disagree"
        )
    rng = rng or RngSpec(0)
    excluded = marginal_instances(attributions, tau)
    skip = set(excluded)
    per_instance: List[Optional[float]] = []
    for j, phi in enumerate(attributions):
        if j in skip:
            per_instance.append(None)
            continue
        per_instance.append(shift_faithfulness(
            phi, model, target.features[j], pre_shift[j], int(target.labels[j]), int(pre_labels[j]), grouping,
            subset_size, n_subsets, rng.stream("metrics.sfaith", j), loss_kind,
        ))
    if excluded:
        logger.warning(f"⚠ Excluded {len(excluded)} instances with marginal anticipated change from S-Faith")
    return {
        "per_instance": per_instance,
        "mean": mean_defined(per_instance),
        "undefined": sum(1 for j, v in enumerate(per_instance) if v is None and j not in skip),
        "excluded_instances": excluded,
    }


def complexity(phi: Union[Attribution, Sequence[float]]) -> Optional[float]:
    """Entropy in nats of |phi| / sum |phi|; None when phi is all zero."""
    magnitude = np.abs(_values(phi))
    total = magnitude.sum()
    if total <= 0:
        return None
    p = magnitude[magnitude > 0] / total
    return float(-np.sum(p * np.log(p)))


def complexity_dataset(attributions: Sequence[Attribution]) -> Dict[str, Any]:
    per_instance = [complexity(a) for a in attributions]
    return {"per_instance": per_instance, "mean": mean_defined(per_instance)}


def gpc(phi_column: Sequence[float], model: ProbabilisticModel, imputed: np.ndarray, clean: np.ndarray,
        labels: np.ndarray, loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> Optional[float]:
    """
    Global performance correlation.

    Correlates each instance's attribution to the corrupted column with
    L(f(imputed), y) - L(f(clean), y).
    """
    phi_column = np.asarray(phi_column, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = phi_column.size
    if imputed.shape[0] != n or clean.shape[0] != n or labels.shape != (n,):
        raise ShapeError("Attribution column, imputed rows, clean rows and labels must align")
    if n < 3:
        raise EvaluationError(f"GPC needs at least 3 instances, got {n}")
    impact = losses(loss_kind, model.predict_proba(imputed), labels) - losses(loss_kind, model.predict_proba(clean),
                                                                             labels)
    return pearson(phi_column, impact)


def group_importance_ratio(attributions: Sequence[Attribution], designated: Iterable[int]) -> Optional[float]:
    """Share of total |phi| mass that falls on the designated groups, over all instances."""
    if not attributions:
        raise DomainError("Group importance ratio needs at least one attribution")
    magnitude = np.abs(np.stack([_values(a) for a in attributions]))
    g = magnitude.shape[1]
    chosen = sorted(set(int(i) for i in designated))
    if any(not 0 <= i < g for i in chosen):
        raise DomainError(f"Designated groups {chosen} out of range 0..{g - 1}")
    total = magnitude.sum()
    if total <= 0:
        return None
    return float(magnitude[:, chosen].sum() / total)


@dataclass(frozen=True)
class RoarResult:
    roar_s: float
    L_s: float
    L_t: float
    L_s_tilde: float
    L_t_tilde: float

    def to_json(self) -> Dict[str, float]:
        return asdict(self)


def top_players(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest values, ties broken by the lowest index."""
    return np.argsort(-np.asarray(values), kind="stable")[:k]


def remove_features(data: Dataset, attributions: Sequence[Attribution], grouping: FeatureGrouping,
                    fraction: float, fill: np.ndarray) -> Dataset:
    """Replace each row's top-ranked groups by `fill` on all member features."""
    k = int(math.ceil(fraction * grouping.g))
    if k == 0:
        return data
    features = np.array(data.features, copy=True)
    for j, phi in enumerate(attributions):
        removed = np.zeros(grouping.g, dtype=bool)
        removed[top_players(phi.values, k)] = True
        columns = grouping.feature_mask(removed)
        features[j, columns] = fill[columns]
    return data.with_features(features)


def _mean_loss(model: ProbabilisticModel, data: Dataset, loss_kind: LossKind) -> float:
    return float(np.mean(losses(loss_kind, model.predict_proba(data.features), data.labels)))


def roar_s(method: str, scenario: ShiftScenario, kind: Union[str, ModelKind] = ModelKind.MLP,
           train_config: Optional[TrainConfig] = None, removal_fraction: float = DEFAULT_REMOVAL,
           seed: int = 0, grouping: Optional[FeatureGrouping] = None,
           estimator: Optional[EstimatorConfig] = None, tau: float = config.TAU,
           loss_kind: LossKind = LossKind.CROSS_ENTROPY, threads: int = 1) -> RoarResult:
    """
    Remove-and-retrain score for shift attributions.

    Trains on the source training split, explains the target splits, replaces
    every instance's top-ranked features (and those of its paired source row)
    with the source training mean, retrains with the same seed, and returns
    max(0, L~_t - L~_s) / (L_t - L_s) measured on the test splits.

    Args:
        method: Attribution method passed to the monitor
        scenario: Scenario with train/test splits
        kind: Model kind
        train_config: Training settings; the seed overrides its seed
        removal_fraction: Fraction of players removed per instance
        seed: Global seed
        grouping: Player definition; identity by default
        estimator: Exact/kernel switch
        tau: Smallest loss gap considered measurable
        loss_kind: Loss
        threads: Worker count for the attributions

    Returns:
        RoarResult
    """
    if not 0.0 <= removal_fraction <= 1.0:
        raise DomainError(f"Removal fraction must lie in [0, 1], got {removal_fraction}")
    if not scenario.target.has_labels:
        raise PreconditionError("ROAR-S needs target labels")
    source_train, source_test, target_train, target_test = scenario.splits()
    grouping = grouping or make_grouping(source_train.d)
    base = train_config or TrainConfig()
    train_config = TrainConfig(**{**asdict(base), "seed": int(seed)})
    rng = RngSpec(seed)

    imputer = MeanImputer.fit(source_train)
    target_train = imputer.impute(target_train)
    target_test = imputer.impute(target_test)

    model = train(kind, source_train, train_config)
    l_s = _mean_loss(model, source_test, loss_kind)
    l_t = _mean_loss(model, target_test, loss_kind)
    gap = l_t - l_s
    if gap <= tau:
        raise EvaluationError(f"shift has no measurable effect (L_t - L_s = {gap:.3g})")

    fill = imputer.means
    removed = {}
    for name, source_part, target_part in (("train", source_train, target_train),
                                           ("test", source_test, target_test)):
        explanation = explain_shift(method, model, source_part, target_part, grouping, estimator,
                                    RngSpec(rng.stream_seed(f"metrics.roar.{name}")), loss_kind=loss_kind,
                                    threads=threads)
        attributions = explanation.attributions
        removed[name] = (
            remove_features(source_part, attributions, grouping, removal_fraction, fill),
            remove_features(target_part, attributions, grouping, removal_fraction, fill),
        )

    retrained = train(kind, removed["train"][0], train_config, n_classes=model.n_classes)
    l_s_tilde = _mean_loss(retrained, removed["test"][0], loss_kind)
    l_t_tilde = _mean_loss(retrained, removed["test"][1], loss_kind)
    score = max(0.0, l_t_tilde - l_s_tilde) / gap
    logger.info(f"✓ ROAR-S for {method}: {score:.4f} (gap {gap:.4f} -> {l_t_tilde - l_s_tilde:.4f})")
    return RoarResult(roar_s=score, L_s=l_s, L_t=l_t, L_s_tilde=l_s_tilde, L_t_tilde=l_t_tilde)
