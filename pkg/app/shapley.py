"""
Coalition-game engine for Shapley attributions.

Games expose `n_players` and a vectorised `values(masks)`. ValueFunctionSpec
builds the games used for shift explanations (partial feature shifts and
partial feature absence); exact enumeration and a kernel-weighted least squares
estimator turn any game into an Attribution.
"""
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Protocol, Sequence, Union

import numpy as np
from scipy.special import binom, gammaln

from app import config
from app.core import Dataset, FeatureGrouping, RngSpec
from app.errors import CapacityError, DomainError, PreconditionError, ShapeError
from app.model import LossKind, ProbabilisticModel, entropy, losses
from app.transport import LabelTransfer, TransportMap

logger = logging.getLogger(__name__)

HARD_EXACT_CAP = config.MAX_EXACT_CAP
EVAL_CHUNK = 4096

Coalition = FrozenSet[int]


class CoalitionGame(Protocol):
    """A cooperative game over players 0..n_players-1."""

    n_players: int

    def values(self, masks: np.ndarray) -> np.ndarray:
        """Worth of each coalition; masks is bool [m, n_players]."""
        ...


def masks_from_bits(bits: np.ndarray, g: int) -> np.ndarray:
    """Bool coalition masks [m, g] from integer bitmasks (bit i = player i)."""
    bits = np.asarray(bits, dtype=np.int64)
    return ((bits[:, None] >> np.arange(g)[None, :]) & 1).astype(bool)


def bits_from_masks(masks: np.ndarray) -> np.ndarray:
    masks = np.asarray(masks, dtype=bool)
    return (masks.astype(np.int64) << np.arange(masks.shape[1])[None, :]).sum(axis=1)


def coalition_mask(members: Iterable[int], g: int) -> np.ndarray:
    mask = np.zeros(g, dtype=bool)
    for member in members:
        if not 0 <= member < g:
            raise DomainError(f"Player id {member} out of range 0..{g - 1}")
        mask[member] = True
    return mask


@dataclass(frozen=True)
class TableGame:
    """Game given by an explicit value per bitmask (length 2^g)."""

    table: np.ndarray

    @property
    def n_players(self) -> int:
        return (len(self.table) - 1).bit_length()

    def values(self, masks: np.ndarray) -> np.ndarray:
        return np.asarray(self.table, dtype=np.float64)[bits_from_masks(masks)]


@dataclass(frozen=True)
class CallableGame:
    """Game given by a Python function of the member set."""

    n_players: int
    fn: Callable[[Coalition], float]

    def values(self, masks: np.ndarray) -> np.ndarray:
        return np.array([self.fn(frozenset(np.flatnonzero(m).tolist())) for m in masks], dtype=np.float64)


class ValueKind(str, Enum):
    BASELINE = "baseline"
    MARGINAL = "marginal"
    TRANSPORT_PREDICTION = "transport_prediction"
    COUPLING_PREDICTION = "coupling_prediction"
    XPE_LOSS = "xpe_loss"
    XPPE_ENTROPY = "xppe_entropy"


REQUIRED_FIELDS = {
    ValueKind.BASELINE: {"baseline_vector", "output_class"},
    ValueKind.MARGINAL: {"background_samples", "output_class"},
    ValueKind.TRANSPORT_PREDICTION: {"source_counterpart", "output_class"},
    ValueKind.COUPLING_PREDICTION: {"coupling_row", "coupling_sources", "output_class"},
    ValueKind.XPE_LOSS: {"source_counterpart", "estimated_label", "loss_kind"},
    ValueKind.XPPE_ENTROPY: {"source_counterpart"},
}
OPTIONAL_FIELDS = ("source_counterpart", "coupling_row", "coupling_sources", "baseline_vector",
                   "background_samples", "estimated_label", "output_class", "loss_kind")


def partial_shift(x_t: np.ndarray, x_s: np.ndarray, members: Iterable[int],
                  grouping: FeatureGrouping) -> np.ndarray:
    """
    Hybrid input for a partial feature shift.

    Features whose group is in the coalition keep the target value; all
    other features are reverted to the source value.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    if x_t.shape != x_s.shape or x_t.shape[-1] != grouping.d:
        raise ShapeError(f"Cannot mix vectors of shapes {x_t.shape} and {x_s.shape} under a {grouping.d}-feature grouping")
    keep = grouping.feature_mask(coalition_mask(members, grouping.g))
    return np.where(keep, x_t, x_s)


@dataclass(frozen=True)
class ValueFunctionSpec:
    """
    Coalition game binding a model, a target sample and a scalarization.

    Prediction kinds return the probability of `output_class`; xpe_loss returns
    the loss against the transferred label; xppe_entropy returns the predictive
    entropy. Players are the groups of `grouping`.
    """

    kind: ValueKind
    model: ProbabilisticModel
    target_sample: np.ndarray
    grouping: FeatureGrouping
    source_counterpart: Optional[np.ndarray] = None
    coupling_row: Optional[np.ndarray] = None
    coupling_sources: Optional[np.ndarray] = None
    baseline_vector: Optional[np.ndarray] = None
    background_samples: Optional[np.ndarray] = None
    estimated_label: Optional[int] = None
    output_class: Optional[int] = None
    loss_kind: Optional[LossKind] = None

    def __post_init__(self):
        kind = ValueKind(self.kind)
        object.__setattr__(self, "kind", kind)
        present = {name for name in OPTIONAL_FIELDS if getattr(self, name) is not None}
        required = REQUIRED_FIELDS[kind]
        if required - present:
            raise PreconditionError(f"Value function {kind.value} is missing {sorted(required - present)}")
        if present - required:
            raise PreconditionError(f"Value function {kind.value} does not take {sorted(present - required)}")

        x_t = np.asarray(self.target_sample, dtype=np.float64)
        if x_t.shape != (self.grouping.d,):
            raise ShapeError(f"Target sample has shape {x_t.shape}, grouping covers {self.grouping.d} features")
        object.__setattr__(self, "target_sample", x_t)
        for name in ("source_counterpart", "baseline_vector"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64)
                if value.shape != x_t.shape:
                    raise ShapeError(f"{name} has shape {value.shape}, expected {x_t.shape}")
                object.__setattr__(self, name, value)
        for name in ("background_samples", "coupling_sources"):
            value = getattr(self, name)
            if value is not None:
                value = np.atleast_2d(np.asarray(value, dtype=np.float64))
                if value.shape[1] != x_t.size:
                    raise ShapeError(f"{name} rows have {value.shape[1]} features, expected {x_t.size}")
                object.__setattr__(self, name, value)
        if self.coupling_row is not None:
            row = np.asarray(self.coupling_row, dtype=np.float64)
            if row.shape != (self.coupling_sources.shape[0],) or row.min() < 0 or row.sum() <= 0:
                raise DomainError("Coupling row must hold non-negative weights, one per source sample")
            object.__setattr__(self, "coupling_row", row / row.sum())
        if self.output_class is not None and not 0 <= self.output_class < self.model.n_classes:
            raise DomainError(f"Output class {self.output_class} out of range 0..{self.model.n_classes - 1}")
        if self.estimated_label is not None and not 0 <= self.estimated_label < self.model.n_classes:
            raise DomainError(f"Estimated label {self.estimated_label} out of range 0..{self.model.n_classes - 1}")
        if self.loss_kind is not None:
            object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))

    @property
    def n_players(self) -> int:
        return self.grouping.g

    def _references(self):
        """Reference rows used for features outside the coalition, with weights."""
        if self.kind == ValueKind.BASELINE:
            return self.baseline_vector[None, :], np.ones(1)
        if self.kind == ValueKind.MARGINAL:
            k = self.background_samples.shape[0]
            return self.background_samples, np.full(k, 1.0 / k)
        if self.kind == ValueKind.COUPLING_PREDICTION:
            support = np.flatnonzero(self.coupling_row > 0)
            return self.coupling_sources[support], self.coupling_row[support]
        return self.source_counterpart[None, :], np.ones(1)

    def values(self, masks: np.ndarray) -> np.ndarray:
        masks = np.asarray(masks, dtype=bool)
        keep = self.grouping.feature_mask(masks)
        refs, weights = self._references()
        # [m, k, d]: coalition members keep the target value
        inputs = np.where(keep[:, None, :], self.target_sample[None, None, :], refs[None, :, :])
        m, k, d = inputs.shape
        # Identical hybrid rows share one model call, so equal inputs give equal worths
        rows, inverse = np.unique(inputs.reshape(m * k, d), axis=0, return_inverse=True)
        proba = self.model.predict_proba(rows)[np.ravel(inverse)]
        if self.kind == ValueKind.XPE_LOSS:
            scores = losses(self.loss_kind, proba, np.full(m * k, self.estimated_label))
        elif self.kind == ValueKind.XPPE_ENTROPY:
            scores = entropy(proba)
        else:
            scores = proba[:, self.output_class]
        return scores.reshape(m, k) @ weights


def evaluate_value(spec: ValueFunctionSpec, members: Iterable[int]) -> float:
    """Worth v(K) of a single coalition."""
    return float(spec.values(coalition_mask(members, spec.n_players)[None, :])[0])


@dataclass
class Attribution:
    """Shapley values for one explained instance."""

    values: np.ndarray
    player_kind: str
    method: str
    v_empty: float
    v_full: float
    estimator: str = "exact"
    degenerate: bool = False

    @property
    def g(self) -> int:
        return self.values.size

    def efficiency_gap(self) -> float:
        return abs(float(self.values.sum()) - (self.v_full - self.v_empty))


class _CachedGame:
    """Memoises coalition values by bitmask within one attribution run."""

    def __init__(self, game: CoalitionGame):
        self.game = game
        self.g = game.n_players
        self.cache: Dict[int, float] = {}

    def values_for_bits(self, bits: Sequence[int]) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64)
        missing = np.array(sorted({int(b) for b in bits} - self.cache.keys()), dtype=np.int64)
        for start in range(0, missing.size, EVAL_CHUNK):
            chunk = missing[start:start + EVAL_CHUNK]
            for b, value in zip(chunk.tolist(), self.game.values(masks_from_bits(chunk, self.g))):
                self.cache[b] = float(value)
        return np.array([self.cache[int(b)] for b in bits])


def _player_kind(game: CoalitionGame) -> str:
    grouping = getattr(game, "grouping", None)
    return "features" if grouping is None or grouping.is_identity else "groups"


def _method_tag(game: CoalitionGame) -> str:
    kind = getattr(game, "kind", None)
    return kind.value if isinstance(kind, ValueKind) else "game"


def shapley_weights(g: int) -> np.ndarray:
    """Weight 1 / (g * C(g-1, s)) of a marginal contribution to a coalition of size s."""
    sizes = np.arange(g)
    return np.exp(gammaln(sizes + 1) + gammaln(g - sizes) - gammaln(g + 1))


def exact_shapley(game: CoalitionGame, method: Optional[str] = None) -> Attribution:
    """
    Shapley values by full enumeration of the 2^g coalitions.

    Args:
        game: Coalition game with at most 20 players
        method: Tag stored on the Attribution (defaults to the value kind)

    Returns:
        Attribution satisfying efficiency up to floating point error
    """
    g = game.n_players
    if g > HARD_EXACT_CAP:
        raise CapacityError(f"Exact enumeration is capped at {HARD_EXACT_CAP} players, got {g}; use kernel_shapley")
    if g < 1:
        raise DomainError("A game needs at least one player")

    all_bits = np.arange(1 << g, dtype=np.int64)
    v = np.empty(all_bits.size)
    # Every coalition is evaluated exactly once, indexed by its bitmask
    for start in range(0, all_bits.size, EVAL_CHUNK):
        chunk = all_bits[start:start + EVAL_CHUNK]
        v[start:start + EVAL_CHUNK] = game.values(masks_from_bits(chunk, g))
    sizes = masks_from_bits(all_bits, g).sum(axis=1)
    weights = shapley_weights(g)

    phi = np.empty(g)
    for i in range(g):
        without = all_bits[((all_bits >> i) & 1) == 0]
        phi[i] = np.sum(weights[sizes[without]] * (v[without | (1 << i)] - v[without]))

    return Attribution(
        values=phi,
        player_kind=_player_kind(game),
        method=method or _method_tag(game),
        v_empty=float(v[0]),
        v_full=float(v[-1]),
        estimator="exact",
    )


def _size_masses(g: int) -> np.ndarray:
    """Kernel mass per size pair (s, g-s) for s = 1..ceil((g-1)/2), normalised."""
    n_sizes = int(np.ceil((g - 1) / 2.0))
    n_paired = (g - 1) // 2
    sizes = np.arange(1, n_sizes + 1)
    mass = (g - 1) / (sizes * (g - sizes))
    mass[:n_paired] *= 2.0
    return mass / mass.sum()


def _subsets_of_size(g: int, s: int, paired: bool) -> List[int]:
    full = (1 << g) - 1
    bits = []
    for combo in itertools.combinations(range(g), s):
        b = sum(1 << i for i in combo)
        bits.append(b)
        if paired:
            bits.append(full ^ b)
    return bits


def _kernel_design(g: int, budget: int, rng: np.random.Generator):
    """
    Coalitions and regression weights for the kernel estimator.

    Sizes whose full enumeration fits their share of the budget are enumerated
    with exact kernel weights; the remaining budget goes to paired random
    samples from the other sizes, weighted by frequency.
    """
    full = (1 << g) - 1
    if g < 31 and budget >= full - 1:
        bits = np.arange(1, full, dtype=np.int64)
        sizes = masks_from_bits(bits, g).sum(axis=1)
        weights = (g - 1) / (binom(g, sizes) * sizes * (g - sizes))
        return bits, weights

    mass = _size_masses(g)
    n_sizes = mass.size
    n_paired = (g - 1) // 2
    bits: List[int] = []
    weights: List[float] = []
    remaining = budget
    complete = 0
    for k in range(n_sizes):
        s = k + 1
        paired = k < n_paired
        n_subsets = binom(g, s) * (2 if paired else 1)
        share = mass[k] / mass[k:].sum()
        if n_subsets > remaining * share + 1e-8:
            break
        subset_bits = _subsets_of_size(g, s, paired)
        bits.extend(subset_bits)
        weights.extend([mass[k] / n_subsets] * len(subset_bits))
        remaining -= len(subset_bits)
        complete += 1

    leftover = mass[complete:]
    if remaining > 0 and leftover.size:
        probs = leftover / leftover.sum()
        counts: Dict[int, int] = {}
        attempts = 0
        max_attempts = 4 * remaining + 100
        while len(counts) < remaining and attempts < max_attempts:
            attempts += 1
            s = complete + 1 + int(rng.choice(leftover.size, p=probs))
            members = rng.choice(g, size=s, replace=False)
            b = int(np.sum(1 << members.astype(np.int64)))
            for key in (b, full ^ b):
                counts[key] = counts.get(key, 0) + 1
        sampled = np.array(sorted(counts), dtype=np.int64)
        freq = np.array([counts[int(b)] for b in sampled], dtype=np.float64)
        bits.extend(sampled.tolist())
        weights.extend((freq / freq.sum() * leftover.sum()).tolist())
    return np.array(bits, dtype=np.int64), np.array(weights, dtype=np.float64)


def kernel_shapley(game: CoalitionGame, budget: int = 3000,
                   rng: Union[np.random.Generator, int, None] = None,
                   method: Optional[str] = None) -> Attribution:
    """
    Shapley values by constrained kernel-weighted least squares.

    The empty and full coalitions are always evaluated exactly and imposed as
    constraints, so the intercept equals v(empty) and the values sum to
    v(full) - v(empty).

    Args:
        game: Coalition game with at least 2 players
        budget: Number of non-trivial coalitions to evaluate
        rng: Generator (or seed) for coalition sampling
        method: Tag stored on the Attribution

    Returns:
        Attribution; `degenerate` is set when all sampled values were equal
    """
    g = game.n_players
    if g < 2:
        raise DomainError(f"Kernel estimator needs at least 2 players, got {g}")
    if budget < 2:
        raise DomainError(f"Kernel estimator needs a budget >= 2, got {budget}")
    if not isinstance(rng, np.random.Generator):
        rng = RngSpec(0 if rng is None else int(rng)).stream("shapley.kernel")

    cached = _CachedGame(game)
    full = (1 << g) - 1
    v_empty, v_full = cached.values_for_bits([0, full])
    delta = v_full - v_empty

    bits, weights = _kernel_design(g, budget, rng)
    y = cached.values_for_bits(bits) - v_empty
    tag = method or _method_tag(game)

    if np.ptp(y) == 0:
        logger.warning(f"⚠ Degenerate kernel regression for {tag}: all sampled values equal; splitting uniformly")
        return Attribution(
            values=np.full(g, delta / g),
            player_kind=_player_kind(game),
            method=tag,
            v_empty=float(v_empty),
            v_full=float(v_full),
            estimator="kernel",
            degenerate=True,
        )

    z = masks_from_bits(bits, g).astype(np.float64)
    # Eliminate the last player through the efficiency constraint
    design = z[:, :-1] - z[:, -1:]
    target = y - z[:, -1] * delta
    root = np.sqrt(weights)
    head, *_ = np.linalg.lstsq(design * root[:, None], target * root, rcond=None)
    phi = np.append(head, delta - head.sum())

    return Attribution(
        values=phi,
        player_kind=_player_kind(game),
        method=tag,
        v_empty=float(v_empty),
        v_full=float(v_full),
        estimator="kernel",
    )


@dataclass(frozen=True)
class EstimatorConfig:
    """Exact enumeration up to `exact_cap` players, kernel estimator beyond."""

    exact_cap: int = config.EXACT_CAP
    budget: int = config.BUDGET

    def __post_init__(self):
        if not 1 <= self.exact_cap <= HARD_EXACT_CAP:
            raise DomainError(f"exact_cap must lie in 1..{HARD_EXACT_CAP}, got {self.exact_cap}")
        if self.budget < 2:
            raise DomainError(f"budget must be >= 2, got {self.budget}")


def shapley_values(game: CoalitionGame, estimator: Optional[EstimatorConfig] = None,
                   rng: Union[np.random.Generator, int, None] = None,
                   method: Optional[str] = None) -> Attribution:
    """Pick the exact or the kernel estimator by player count."""
    estimator = estimator or EstimatorConfig()
    if game.n_players <= estimator.exact_cap:
        return exact_shapley(game, method=method)
    return kernel_shapley(game, budget=estimator.budget, rng=rng, method=method)


def xpe_spec(model: ProbabilisticModel, x_t: np.ndarray, x_s: np.ndarray, estimated_label: int,
             grouping: FeatureGrouping, loss_kind: LossKind = LossKind.CROSS_ENTROPY) -> ValueFunctionSpec:
    return ValueFunctionSpec(kind=ValueKind.XPE_LOSS, model=model, target_sample=x_t, grouping=grouping,
                             source_counterpart=x_s, estimated_label=int(estimated_label), loss_kind=loss_kind)


def xppe_spec(model: ProbabilisticModel, x_t: np.ndarray, x_s: np.ndarray,
              grouping: FeatureGrouping) -> ValueFunctionSpec:
    return ValueFunctionSpec(kind=ValueKind.XPPE_ENTROPY, model=model, target_sample=x_t, grouping=grouping,
                             source_counterpart=x_s)


def run_parallel(fn: Callable[[int], Attribution], count: int, threads: int = 1) -> List[Attribution]:
    """Evaluate fn(0..count-1) on a thread pool and return results in index order."""
    if threads <= 1 or count <= 1:
        return [fn(j) for j in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


def attribute_dataset(method: str, model: ProbabilisticModel, target: Dataset, transport_map: TransportMap,
                      source: Dataset, grouping: FeatureGrouping,
                      transfer: Optional[LabelTransfer] = None,
                      estimator: Optional[EstimatorConfig] = None,
                      rng: Optional[RngSpec] = None,
                      loss_kind: LossKind = LossKind.CROSS_ENTROPY,
                      threads: int = 1) -> List[Attribution]:
    """
    XPE or XPPE attribution for every target instance.

    Args:
        method: "xpe" (loss against transferred labels) or "xppe" (entropy)
        model: Model under monitoring
        target: Target sample, aligned with the transport map
        transport_map: Maps whose inverse gives each target row's source counterpart
        source: Source sample, aligned with the transport map
        grouping: Player definition
        transfer: Label transfer (required for xpe)
        estimator: Exact/kernel switch and budget
        rng: Seed spec; instance j draws from its own stream
        loss_kind: Loss used by xpe
        threads: Worker count; results do not depend on it

    Returns:
        One Attribution per target row, in row order
    """
    if method not in ("xpe", "xppe"):
        raise DomainError(f"Unknown shift attribution method: {method}")
    if method == "xpe" and transfer is None:
        raise PreconditionError("XPE needs a label transfer")
    if target.d != grouping.d or source.d != grouping.d:
        raise ShapeError(f"Grouping covers {grouping.d} features, data has {source.d}/{target.d}")
    if transport_map.inverse.shape[0] != target.n:
        raise ShapeError(f"Transport map covers {transport_map.inverse.shape[0]} targets, got {target.n}")
    estimator = estimator or EstimatorConfig()
    rng = rng or RngSpec(0)

    def explain(j: int) -> Attribution:
        x_t = target.features[j]
        x_s = source.features[transport_map.inverse[j]]
        if method == "xpe":
            spec = xpe_spec(model, x_t, x_s, int(transfer.estimated_labels[j]), grouping, loss_kind)
        else:
            spec = xppe_spec(model, x_t, x_s, grouping)
        return shapley_values(spec, estimator, rng.stream(f"shapley.{method}", j), method=method)

    results = run_parallel(explain, target.n, threads)
    logger.info(f"✓ Computed {len(results)} {method.upper()} attributions over {grouping.g} players")
    return results
