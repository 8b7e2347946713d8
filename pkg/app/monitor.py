"""
End-to-end shift explanation: transport, label transfer, performance estimate,
drift mask and per-instance attributions for one source/target pair.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.baselines import attribute_baseline, predicted_class
from app.core import Dataset, FeatureGrouping, RngSpec
from app.drift import KsResult, drift_mask
from app.errors import DomainError, PreconditionError, ShapeError
from app.model import LossKind, ProbabilisticModel, losses
from app.shapley import (Attribution, EstimatorConfig, ValueFunctionSpec, ValueKind, attribute_dataset,
                         run_parallel, shapley_values)
from app.simulator import MeanImputer
from app.transport import (LabelTransfer, TransportResult, align, estimate_target_performance,
                           label_transport_accuracy, transfer_labels)

logger = logging.getLogger(__name__)

METHODS = ["xpe", "xppe", "lad", "axs", "random", "coupling"]


@dataclass
class ShiftExplanation:
    """Everything one monitoring run produces, aligned with the kept target rows."""

    method: str
    grouping: FeatureGrouping
    transport: TransportResult
    transfer: LabelTransfer
    drift: KsResult
    attributions: List[Attribution]
    source: Dataset
    target: Dataset
    source_loss: float
    estimated_target_loss: float
    label_transport_accuracy: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    @property
    def target_index(self) -> np.ndarray:
        """Original target row of each explained instance."""
        return self.transport.target_index


def random_attributions(n: int, grouping: FeatureGrouping, rng: RngSpec, threads: int = 1) -> List[Attribution]:
    """Uniform random scores, the reference ranking for removal benchmarks."""
    g = grouping.g
    player_kind = "features" if grouping.is_identity else "groups"

    def draw(j: int) -> Attribution:
        values = rng.stream("monitor.random", j).random(g)
        return Attribution(values=values, player_kind=player_kind, method="random",
                           v_empty=0.0, v_full=0.0, estimator="random")

    return run_parallel(draw, n, threads)


def coupling_attributions(model: ProbabilisticModel, target: Dataset, source: Dataset, plan: np.ndarray,
                          grouping: FeatureGrouping, estimator: Optional[EstimatorConfig] = None,
                          rng: Optional[RngSpec] = None, threads: int = 1) -> List[Attribution]:
    """
    Prediction attributions whose absent features are drawn from the coupling.

    Column j of `plan` gives the weights over source rows for target row j.
    """
    plan = np.asarray(plan, dtype=np.float64)
    if plan.shape != (source.n, target.n):
        raise ShapeError(f"Coupling has shape {plan.shape}, expected ({source.n}, {target.n})")
    rng = rng or RngSpec(0)

    def explain(j: int) -> Attribution:
        x_t = target.features[j]
        spec = ValueFunctionSpec(kind=ValueKind.COUPLING_PREDICTION, model=model, target_sample=x_t,
                                 grouping=grouping, coupling_row=plan[:, j], coupling_sources=source.features,
                                 output_class=predicted_class(model, x_t))
        return shapley_values(spec, estimator, rng.stream("shapley.coupling", j), method="coupling")

    return run_parallel(explain, target.n, threads)


def explain_shift(method: str, model: ProbabilisticModel, source: Dataset, target: Dataset,
                  grouping: FeatureGrouping, estimator: Optional[EstimatorConfig] = None,
                  rng: Optional[RngSpec] = None, alpha: float = 0.05,
                  loss_kind: LossKind = LossKind.CROSS_ENTROPY, tabular: bool = False,
                  plan: Optional[np.ndarray] = None, threads: int = 1) -> ShiftExplanation:
    """
    Run the monitoring pipeline for one method.

    Args:
        method: xpe, xppe, lad, axs, random or coupling
        model: Model under monitoring
        source: Labeled source sample
        target: Target sample; labels optional, missing cells are imputed with source means
        grouping: Player definition
        estimator: Exact/kernel switch and budget
        rng: Seed spec; every random use site derives its own stream
        alpha: KS significance level
        loss_kind: Loss for the performance estimate and XPE
        tabular: Use a 30-row source background instead of the zero baseline for baselines
        plan: External coupling for the coupling method, either over the kept rows or over
            the full samples (then restricted to the kept rows); the solved plan otherwise
        threads: Worker count; results do not depend on it

    Returns:
        ShiftExplanation
    """
    if method not in METHODS:
        raise DomainError(f"Unknown method: {method}. Must be one of {METHODS}")
    if not source.has_labels:
        raise PreconditionError("The source sample must be labeled")
    if source.d != target.d:
        raise ShapeError(f"Source has {source.d} features, target has {target.d}")
    if grouping.d != source.d:
        raise ShapeError(f"Grouping covers {grouping.d} features, data has {source.d}")
    if source.has_missing:
        raise PreconditionError("The source sample must not contain missing values")
    rng = rng or RngSpec(0)
    warnings: List[str] = []

    if target.has_missing:
        count = int(target.missing.mask.sum())
        target = MeanImputer.fit(source).impute(target)
        message = f"Imputed {count} missing target cells with source means"
        logger.warning(f"⚠ {message}")
        warnings.append(message)

    transport = align(source, target, rng.stream("transport.subsample"), threads=threads)
    if transport.subsampled:
        warnings.append(
            f"Sample sizes differ ({source.n} source, {target.n} target); "
            f"subsampled both to {transport.source_index.size}"
        )
    kept_source = source.subset(transport.source_index)
    kept_target = target.subset(transport.target_index)
    transfer = transfer_labels(transport.transport_map, kept_source)

    source_loss = float(np.mean(losses(loss_kind, model.predict_proba(source.features), source.labels)))
    estimated = estimate_target_performance(model, kept_target, transfer, loss_kind)
    accuracy = label_transport_accuracy(transfer, kept_target.labels) if kept_target.has_labels else None
    drift = drift_mask(source, target, alpha, threads=threads)

    if method in ("xpe", "xppe"):
        attributions = attribute_dataset(method, model, kept_target, transport.transport_map, kept_source,
                                         grouping, transfer=transfer, estimator=estimator, rng=rng,
                                         loss_kind=loss_kind, threads=threads)
    elif method in ("lad", "axs"):
        attributions = attribute_baseline(method, model, kept_target, transport.transport_map, kept_source,
                                          grouping, ks_result=drift, estimator=estimator, rng=rng,
                                          tabular=tabular, threads=threads)
    elif method == "coupling":
        if plan is None:
            plan = transport.coupling.plan
        elif transport.subsampled and np.shape(plan) == (source.n, target.n):
            plan = np.asarray(plan, dtype=np.float64)[np.ix_(transport.source_index, transport.target_index)]
            empty = np.flatnonzero(plan.sum(axis=0) <= 0)
            if empty.size:
                raise PreconditionError(
                    f"Coupling puts no mass on the kept source rows for target rows "
                    f"{transport.target_index[empty].tolist()}"
                )
        attributions = coupling_attributions(model, kept_target, kept_source, plan, grouping,
                                             estimator, rng, threads)
    else:
        attributions = random_attributions(kept_target.n, grouping, rng, threads)

    degenerate = [j for j, a in enumerate(attributions) if a.degenerate]
    if degenerate:
        warnings.append(f"Degenerate kernel regression for instances {degenerate}; values split uniformly")

    logger.info(
        f"✓ {method.upper()} monitoring: source loss {source_loss:.4f}, "
        f"estimated target loss {estimated:.4f} over {kept_target.n} instances"
    )
    return ShiftExplanation(
        method=method,
        grouping=grouping,
        transport=transport,
        transfer=transfer,
        drift=drift,
        attributions=attributions,
        source=kept_source,
        target=kept_target,
        source_loss=source_loss,
        estimated_target_loss=estimated,
        label_transport_accuracy=accuracy,
        warnings=warnings,
    )
