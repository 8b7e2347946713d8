"""
Discrete optimal transport between empirical source and target samples.

Equal-size samples with uniform weights are coupled exactly by solving the
linear assignment problem; the plan is reduced to deterministic maps, which
carry source labels over to the target for label-free performance estimation.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from app.core import Dataset, equalize_sizes
from app.errors import DomainError, PreconditionError, ShapeError
from app.model import LossKind, ProbabilisticModel, losses

logger = logging.getLogger(__name__)

MARGINAL_TOL = 1e-12
ROW_BLOCK = 256


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise transport costs, source rows by target columns."""

    costs: np.ndarray
    cost_kind: str = "squared_euclidean"
    embedding_used: bool = False

    def __post_init__(self):
        costs = np.array(self.costs, dtype=np.float64)
        if costs.ndim != 2:
            raise ShapeError(f"Cost matrix must be 2-D, got shape {costs.shape}")
        if costs.size and (not np.all(np.isfinite(costs)) or costs.min() < 0):
            raise DomainError("Costs must be finite and non-negative")
        if self.cost_kind not in ("squared_euclidean", "precomputed"):
            raise DomainError(f"Unknown cost kind: {self.cost_kind}")
        costs.setflags(write=False)
        object.__setattr__(self, "costs", costs)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.costs.shape


@dataclass(frozen=True)
class Coupling:
    """Transport plan with uniform marginals and its objective value."""

    plan: np.ndarray
    objective: float

    def __post_init__(self):
        plan = np.array(self.plan, dtype=np.float64)
        if plan.ndim != 2 or plan.size == 0:
            raise ShapeError(f"Coupling must be a non-empty matrix, got shape {plan.shape}")
        if plan.min() < 0:
            raise DomainError("Coupling entries must be non-negative")
        n_s, n_t = plan.shape
        if np.max(np.abs(plan.sum(axis=1) - 1.0 / n_s)) > MARGINAL_TOL:
            raise DomainError("Coupling row sums differ from 1/n_s")
        if np.max(np.abs(plan.sum(axis=0) - 1.0 / n_t)) > MARGINAL_TOL:
            raise DomainError("Coupling column sums differ from 1/n_t")
        plan.setflags(write=False)
        object.__setattr__(self, "plan", plan)

    def conditional_row(self, target_index: int) -> np.ndarray:
        """Weights of the conditional coupling over source samples for one target sample."""
        column = self.plan[:, target_index]
        return column / column.sum()


@dataclass(frozen=True)
class TransportMap:
    """Deterministic reductions of a coupling: T (forward) and T^-1 (inverse)."""

    forward: np.ndarray
    inverse: np.ndarray


@dataclass(frozen=True)
class LabelTransfer:
    """Labels carried from matched source samples onto target samples."""

    estimated_labels: np.ndarray
    matched_source_index: np.ndarray


def _squared_distances(a: np.ndarray, b: np.ndarray, threads: int) -> np.ndarray:
    out = np.empty((a.shape[0], b.shape[0]))

    def fill(start: int) -> None:
        block = a[start:start + ROW_BLOCK]
        diff = block[:, None, :] - b[None, :, :]
        out[start:start + ROW_BLOCK] = np.einsum("ijk,ijk->ij", diff, diff)

    starts = range(0, a.shape[0], ROW_BLOCK)
    if threads > 1 and a.shape[0] > ROW_BLOCK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for start in starts:
            fill(start)
    return out


def cost_matrix(source: Dataset, target: Dataset,
                embedding: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                threads: int = 1) -> CostMatrix:
    """
    Squared Euclidean costs between source and target rows.

    Args:
        source: Source sample
        target: Target sample
        embedding: Optional (source_embedding [n_s, e], target_embedding [n_t, e]);
            when given, distances are measured in the embedding space
        threads: Worker count for the row-blocked computation

    Returns:
        CostMatrix of shape [n_s, n_t]
    """
    if embedding is not None:
        a = np.asarray(embedding[0], dtype=np.float64)
        b = np.asarray(embedding[1], dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
            raise ShapeError(f"Embedding dimensions differ: {a.shape} vs {b.shape}")
        if a.shape[0] != source.n or b.shape[0] != target.n:
            raise ShapeError("Embedding row counts must match the samples")
    else:
        if source.d != target.d:
            raise ShapeError(f"Source has {source.d} features, target has {target.d}")
        if source.has_missing or target.has_missing:
            raise PreconditionError("Impute missing values before computing transport costs")
        a, b = source.features, target.features
    costs = _squared_distances(a, b, threads)
    return CostMatrix(costs=costs, cost_kind="squared_euclidean", embedding_used=embedding is not None)


def solve_coupling(costs: Union[CostMatrix, np.ndarray]) -> Coupling:
    """
    Optimal coupling for equal-size samples with uniform marginals.

    The problem is solved exactly as a linear assignment; the returned plan is
    1/n times a permutation matrix. Repeated solves of the same instance return
    the same plan.
    """
    matrix = costs.costs if isinstance(costs, CostMatrix) else np.asarray(costs, dtype=np.float64)
    if matrix.size == 0:
        raise DomainError("Cannot solve transport for an empty cost matrix")
    n_s, n_t = matrix.shape
    if n_s != n_t:
        raise ShapeError(f"Assignment solver needs equal sample counts, got {n_s} and {n_t}; subsample first")
    rows, cols = linear_sum_assignment(matrix)
    plan = np.zeros((n_s, n_t))
    plan[rows, cols] = 1.0 / n_s
    objective = float(matrix[rows, cols].sum() / n_s)
    return Coupling(plan=plan, objective=objective)


def coupling_to_maps(coupling: Coupling) -> TransportMap:
    """Row-wise and column-wise argmax of the plan, ties to the lowest index."""
    return TransportMap(
        forward=np.argmax(coupling.plan, axis=1),
        inverse=np.argmax(coupling.plan, axis=0),
    )


def transfer_labels(transport_map: TransportMap, source: Dataset) -> LabelTransfer:
    """Give every target sample the label of its matched source sample."""
    if not source.has_labels:
        raise PreconditionError("Label transfer requires a labeled source sample")
    inverse = np.asarray(transport_map.inverse, dtype=np.int64)
    return LabelTransfer(estimated_labels=source.labels[inverse], matched_source_index=inverse)


def estimate_target_performance(model: ProbabilisticModel, target: Dataset, transfer: LabelTransfer,
                                loss_kind: Union[str, LossKind] = LossKind.CROSS_ENTROPY) -> float:
    """Mean loss of the model on the target sample against the transferred labels."""
    if transfer.estimated_labels.shape[0] != target.n:
        raise ShapeError(f"{transfer.estimated_labels.shape[0]} transferred labels for {target.n} target rows")
    if transfer.estimated_labels.max() >= model.n_classes:
        raise ShapeError(f"Transferred label exceeds the model's {model.n_classes} classes")
    proba = model.predict_proba(target.features)
    return float(np.mean(losses(loss_kind, proba, transfer.estimated_labels)))


def label_transport_accuracy(transfer: LabelTransfer, true_target_labels: np.ndarray) -> float:
    """Fraction of target samples whose transferred label is correct."""
    truth = np.asarray(true_target_labels)
    if truth.shape != transfer.estimated_labels.shape:
        raise ShapeError(f"Label vectors differ in length: {transfer.estimated_labels.shape} vs {truth.shape}")
    return float(np.mean(transfer.estimated_labels == truth))


def label_preservation_gap(model: ProbabilisticModel, target: Dataset, transfer: LabelTransfer,
                           loss_kind: Union[str, LossKind] = LossKind.CROSS_ENTROPY) -> float:
    """|true target loss - estimated target loss|; bounded by 2ε for ε-label-preserving shifts."""
    if not target.has_labels:
        raise PreconditionError("The true target loss needs target labels")
    true_loss = float(np.mean(losses(loss_kind, model.predict_proba(target.features), target.labels)))
    return abs(true_loss - estimate_target_performance(model, target, transfer, loss_kind))


@dataclass(frozen=True)
class TransportResult:
    """Outcome of aligning a source and a target sample (after subsampling)."""

    source_index: np.ndarray
    target_index: np.ndarray
    costs: CostMatrix
    coupling: Coupling
    transport_map: TransportMap
    subsampled: bool

    def matched_source_rows(self) -> np.ndarray:
        """Original source row index matched to each kept target row."""
        return self.source_index[self.transport_map.inverse]

    def to_json(self) -> Dict[str, Any]:
        return {
            "forward": self.transport_map.forward.tolist(),
            "inverse": self.transport_map.inverse.tolist(),
            "objective": self.coupling.objective,
            "cost_kind": self.costs.cost_kind,
        }


def align(source: Dataset, target: Dataset, rng: np.random.Generator,
          embedding: Optional[Tuple[np.ndarray, np.ndarray]] = None, threads: int = 1) -> TransportResult:
    """
    Subsample to equal size, then cost -> coupling -> maps.

    Args:
        source: Source sample
        target: Target sample
        rng: Stream used only when the sizes differ
        embedding: Optional full-sample embeddings (rows aligned with the datasets)
        threads: Worker count for the cost matrix

    Returns:
        TransportResult whose maps index into the kept subsets
    """
    source_idx, target_idx = equalize_sizes(source, target, rng)
    subsampled = source_idx.size != source.n or target_idx.size != target.n
    if subsampled:
        logger.warning(
            f"⚠ Sample sizes differ ({source.n} source, {target.n} target); "
            f"subsampled both to {source_idx.size}"
        )
    kept_embedding = None
    if embedding is not None:
        kept_embedding = (np.asarray(embedding[0])[source_idx], np.asarray(embedding[1])[target_idx])
    costs = cost_matrix(source.subset(source_idx), target.subset(target_idx), kept_embedding, threads)
    coupling = solve_coupling(costs)
    logger.info(f"✓ Optimal coupling over {source_idx.size} pairs, objective {coupling.objective:.6g}")
    return TransportResult(
        source_index=source_idx,
        target_index=target_idx,
        costs=costs,
        coupling=coupling,
        transport_map=coupling_to_maps(coupling),
        subsampled=subsampled,
    )
