"""
Comparison attributions: Local Attribution Difference (LAD) and
Attribution x Shift (AxS).

Both explain the probability of the class the model predicts at the target
sample, with a zero baseline by default or a marginal background sample.
"""
import logging
from typing import List, Optional

import numpy as np

from app.core import Dataset, FeatureGrouping, RngSpec
from app.drift import KsResult
from app.errors import DomainError, ShapeError
from app.model import ProbabilisticModel
from app.shapley import Attribution, EstimatorConfig, ValueFunctionSpec, ValueKind, run_parallel, shapley_values
from app.transport import TransportMap

logger = logging.getLogger(__name__)

# Background rows drawn from the source for tabular mode
BACKGROUND_SIZE = 30


def predicted_class(model: ProbabilisticModel, x: np.ndarray) -> int:
    """c* = argmax f(x), ties to the lowest class id."""
    return int(np.argmax(model.predict_proba(np.asarray(x, dtype=np.float64)[None, :])[0]))


def standard_spec(model: ProbabilisticModel, x: np.ndarray, output_class: int, grouping: FeatureGrouping,
                  background: Optional[np.ndarray] = None) -> ValueFunctionSpec:
    """Prediction game for class `output_class` at x: zero baseline, or marginal over `background`."""
    x = np.asarray(x, dtype=np.float64)
    if background is None:
        return ValueFunctionSpec(kind=ValueKind.BASELINE, model=model, target_sample=x, grouping=grouping,
                                 baseline_vector=np.zeros_like(x), output_class=output_class)
    return ValueFunctionSpec(kind=ValueKind.MARGINAL, model=model, target_sample=x, grouping=grouping,
                             background_samples=background, output_class=output_class)


def sample_background(source: Dataset, rng: np.random.Generator, size: int = BACKGROUND_SIZE) -> np.ndarray:
    """Up to `size` random source rows, in increasing row order."""
    take = min(size, source.n)
    return source.features[np.sort(rng.choice(source.n, size=take, replace=False))]


def lad(model: ProbabilisticModel, x_t: np.ndarray, x_s: np.ndarray, grouping: FeatureGrouping,
        estimator: Optional[EstimatorConfig] = None, background: Optional[np.ndarray] = None,
        rng: Optional[RngSpec] = None, index: int = 0) -> Attribution:
    """
    Local attribution difference |phi(x_t) - phi(x_s)|.

    Both samples are explained for the same class c* = argmax f(x_t). The
    result does not satisfy efficiency; v_empty and v_full are taken from the
    target game.

    Args:
        model: Model under monitoring
        x_t: Target sample
        x_s: Matched source sample
        grouping: Player definition
        estimator: Exact/kernel switch
        background: Marginal background rows; zero baseline when None
        rng: Seed spec for the kernel path
        index: Instance index selecting the random streams

    Returns:
        Attribution with method "lad"
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    if x_t.shape != x_s.shape:
        raise ShapeError(f"Target sample has shape {x_t.shape}, source sample {x_s.shape}")
    rng = rng or RngSpec(0)
    c_star = predicted_class(model, x_t)

    phi_t = shapley_values(standard_spec(model, x_t, c_star, grouping, background), estimator,
                           rng.stream("baselines.lad.target", index), method="lad")
    phi_s = shapley_values(standard_spec(model, x_s, c_star, grouping, background), estimator,
                           rng.stream("baselines.lad.source", index), method="lad")
    return Attribution(
        values=np.abs(phi_t.values - phi_s.values),
        player_kind=phi_t.player_kind,
        method="lad",
        v_empty=phi_t.v_empty,
        v_full=phi_t.v_full,
        estimator=phi_t.estimator,
        degenerate=phi_t.degenerate or phi_s.degenerate,
    )


def axs(model: ProbabilisticModel, x_t: np.ndarray, ks_result: KsResult, grouping: FeatureGrouping,
        estimator: Optional[EstimatorConfig] = None, background: Optional[np.ndarray] = None,
        rng: Optional[RngSpec] = None, index: int = 0) -> Attribution:
    """
    Standard attribution at x_t masked to the drifted groups.

    A group counts as drifted when any member feature is flagged by the KS mask.
    """
    mask = np.asarray(ks_result.mask, dtype=bool)
    if mask.shape != (grouping.d,):
        raise ShapeError(f"Drift mask has {mask.size} entries, grouping covers {grouping.d} features")
    rng = rng or RngSpec(0)
    c_star = predicted_class(model, x_t)
    phi = shapley_values(standard_spec(model, x_t, c_star, grouping, background), estimator,
                         rng.stream("baselines.axs", index), method="axs")
    group_mask = grouping.aggregate_or(mask)
    return Attribution(
        values=np.where(group_mask, phi.values, 0.0),
        player_kind=phi.player_kind,
        method="axs",
        v_empty=phi.v_empty,
        v_full=phi.v_full,
        estimator=phi.estimator,
        degenerate=phi.degenerate,
    )


def attribute_baseline(method: str, model: ProbabilisticModel, target: Dataset, transport_map: TransportMap,
                       source: Dataset, grouping: FeatureGrouping, ks_result: Optional[KsResult] = None,
                       estimator: Optional[EstimatorConfig] = None, rng: Optional[RngSpec] = None,
                       tabular: bool = False, threads: int = 1) -> List[Attribution]:
    """
    LAD or AxS for every target row, in row order.

    With `tabular` set, a background of 30 random source rows replaces the
    zero baseline; the background is drawn once and shared by all instances.
    """
    if method not in ("lad", "axs"):
        raise DomainError(f"Unknown baseline method: {method}")
    if method == "axs" and ks_result is None:
        raise DomainError("AxS needs a KS drift mask")
    rng = rng or RngSpec(0)
    background = sample_background(source, rng.stream("baselines.background")) if tabular else None

    def explain(j: int) -> Attribution:
        x_t = target.features[j]
        if method == "lad":
            x_s = source.features[transport_map.inverse[j]]
            return lad(model, x_t, x_s, grouping, estimator, background, rng, j)
        return axs(model, x_t, ks_result, grouping, estimator, background, rng, j)

    results = run_parallel(explain, target.n, threads)
    logger.info(f"✓ Computed {len(results)} {method.upper()} attributions over {grouping.g} players")
    return results
