"""
Unit tests for the transport module.
"""
import itertools
import math

import numpy as np
import pytest

from app.core import Dataset, MissingMask
from app.errors import DomainError, PreconditionError, ShapeError
from app.model import LossKind, TrainConfig, init_model
from app.transport import (Coupling, LabelTransfer, TransportMap, align, cost_matrix, coupling_to_maps,
                           estimate_target_performance, label_preservation_gap, label_transport_accuracy,
                           solve_coupling, transfer_labels)


def _data(rows, labels=None):
    return Dataset(features=np.asarray(rows, dtype=float), labels=labels)


class OneHotModel:
    """Outputs a fixed one-hot row per input row."""

    n_classes = 2
    input_dim = 1

    def __init__(self, classes):
        self.classes = np.asarray(classes)

    def predict_proba(self, x):
        return np.eye(self.n_classes)[self.classes[: np.asarray(x).shape[0]]]


class TestCostMatrix:
    """Test pairwise costs."""

    def test_three_four_five(self):
        """Test squared distance of a 3-4-5 triangle."""
        assert cost_matrix(_data([[0, 0]]), _data([[3, 4]])).costs.tolist() == [[25.0]]

    def test_one_dimensional(self):
        """Test the 2x2 case."""
        costs = cost_matrix(_data([[0], [10]]), _data([[1], [9]])).costs
        assert costs.tolist() == [[1.0, 81.0], [81.0, 1.0]]

    def test_dimension_mismatch(self):
        """Test differing widths raise a shape error."""
        with pytest.raises(ShapeError):
            cost_matrix(_data([[0, 0]]), _data([[0]]))

    def test_embedding(self):
        """Test costs measured in an embedding space."""
        costs = cost_matrix(_data([[0, 0]]), _data([[5, 5]]),
                            embedding=(np.array([[1.0]]), np.array([[3.0]])))
        assert costs.costs.tolist() == [[4.0]]
        assert costs.embedding_used

    def test_threads_do_not_change_costs(self):
        """Test the row-blocked parallel path."""
        rng = np.random.default_rng(0)
        a, b = _data(rng.normal(size=(600, 3))), _data(rng.normal(size=(600, 3)))
        assert np.array_equal(cost_matrix(a, b, threads=1).costs, cost_matrix(a, b, threads=4).costs)


class TestSolveCoupling:
    """Test the assignment solver."""

    def test_two_by_two(self):
        """Test the identity pairing wins with objective 1."""
        coupling = solve_coupling(np.array([[1.0, 81.0], [81.0, 1.0]]))
        assert coupling.plan.tolist() == [[0.5, 0.0], [0.0, 0.5]]
        assert coupling.objective == 1.0

    def test_identical_point_sets(self):
        """Test zero-cost identity coupling."""
        rows = _data([[0, 1], [2, 3], [4, 5]])
        coupling = solve_coupling(cost_matrix(rows, rows))
        assert coupling.objective == 0.0
        assert coupling_to_maps(coupling).forward.tolist() == [0, 1, 2]

    def test_non_crossing_pairing(self):
        """Test 0 -> 0.4 and 1 -> 0.6."""
        coupling = solve_coupling(cost_matrix(_data([[0.0], [1.0]]), _data([[0.4], [0.6]])))
        assert coupling_to_maps(coupling).forward.tolist() == [0, 1]
        assert coupling.objective == pytest.approx(0.16)

    def test_empty(self):
        """Test empty input raises a domain error."""
        with pytest.raises(DomainError):
            solve_coupling(np.zeros((0, 0)))

    def test_unequal_sizes(self):
        """Test the solver refuses rectangular problems."""
        with pytest.raises(ShapeError):
            solve_coupling(np.zeros((2, 3)))

    def test_brute_force_optimality(self):
        """Test the objective equals the best permutation on 100 random matrices."""
        rng = np.random.default_rng(42)
        for _ in range(100):
            n = int(rng.integers(2, 8))
            costs = rng.random((n, n)) * 10
            best = min(sum(costs[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n
            coupling = solve_coupling(costs)
            assert abs(coupling.objective - best) <= 1e-9
            assert np.allclose(coupling.plan.sum(axis=0), 1.0 / n, atol=1e-12)
            assert np.allclose(coupling.plan.sum(axis=1), 1.0 / n, atol=1e-12)

    def test_deterministic(self):
        """Test repeated solves return the same plan."""
        costs = np.random.default_rng(3).random((6, 6))
        assert np.array_equal(solve_coupling(costs).plan, solve_coupling(costs).plan)

    @pytest.mark.parametrize("scale", [0.5, 3.0, 1e3])
    def test_scaling_costs_keeps_plan(self, scale):
        """Test multiplying costs by a positive constant leaves plan and maps unchanged."""
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(2, 12))
            costs = rng.random((n, n)) * 10
            base = solve_coupling(costs)
            scaled = solve_coupling(costs * scale)
            assert np.array_equal(base.plan, scaled.plan)
            assert scaled.objective == pytest.approx(base.objective * scale, rel=1e-12)
            base_map, scaled_map = coupling_to_maps(base), coupling_to_maps(scaled)
            assert np.array_equal(base_map.forward, scaled_map.forward)
            assert np.array_equal(base_map.inverse, scaled_map.inverse)

    def test_marginal_validation(self):
        """Test plans with wrong marginals are rejected."""
        with pytest.raises(DomainError):
            Coupling(plan=np.array([[0.5, 0.5], [0.0, 0.0]]), objective=0.0)


class TestMapsAndLabels:
    """Test map reduction and label transfer."""

    def test_permutation_maps(self):
        """Test a permutation plan and its inverse."""
        plan = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]]) / 3.0
        maps = coupling_to_maps(Coupling(plan=plan, objective=0.0))
        assert maps.forward.tolist() == [1, 2, 0]
        assert maps.inverse.tolist() == [2, 0, 1]

    def test_tie_picks_lowest_index(self):
        """Test argmax ties resolve to column 0."""
        plan = np.full((2, 2), 0.25)
        maps = coupling_to_maps(Coupling(plan=plan, objective=0.0))
        assert maps.forward.tolist() == [0, 0]

    def test_transfer(self):
        """Test permutation and repeated-match lookups."""
        source = _data([[0], [1], [2]], labels=[0, 1, 2])
        transfer = transfer_labels(TransportMap(np.arange(3), np.array([2, 0, 1])), source)
        assert transfer.estimated_labels.tolist() == [2, 0, 1]

        source = _data([[0], [1]], labels=[1, 0])
        transfer = transfer_labels(TransportMap(np.array([0, 0]), np.array([0, 0])), source)
        assert transfer.estimated_labels.tolist() == [1, 1]

    def test_transfer_needs_labels(self):
        """Test unlabeled sources raise a precondition error."""
        with pytest.raises(PreconditionError):
            transfer_labels(TransportMap(np.arange(1), np.arange(1)), _data([[0]]))

    def test_label_transport_accuracy(self):
        """Test direct count of agreements."""
        transfer = LabelTransfer(np.array([0, 1, 1, 0]), np.arange(4))
        assert label_transport_accuracy(transfer, [0, 1, 0, 0]) == 0.75
        assert label_transport_accuracy(transfer, [0, 1, 1, 0]) == 1.0
        assert label_transport_accuracy(transfer, [1, 0, 0, 1]) == 0.0


class TestPerformanceEstimate:
    """Test label-free target performance estimation."""

    def test_uniform_model(self):
        """Test a uniform model scores ln 2."""
        model = init_model("logreg", 1, 2, TrainConfig())
        target = _data([[0.5], [2.0]])
        transfer = LabelTransfer(np.array([0, 1]), np.array([0, 1]))
        assert estimate_target_performance(model, target, transfer) == pytest.approx(math.log(2.0))

    def test_perfect_agreement(self):
        """Test one-hot predictions of the transferred labels give zero loss."""
        transfer = LabelTransfer(np.array([0, 1, 1]), np.arange(3))
        model = OneHotModel([0, 1, 1])
        assert estimate_target_performance(model, _data([[0], [1], [2]]), transfer) <= 1e-11

    def test_zero_one_half(self):
        """Test argmax agreement on half the instances."""
        transfer = LabelTransfer(np.array([0, 1, 0, 1]), np.arange(4))
        model = OneHotModel([0, 1, 1, 0])
        target = _data([[0], [1], [2], [3]])
        assert estimate_target_performance(model, target, transfer, LossKind.ZERO_ONE) == 0.5

    def test_label_preserving_shift_bound(self):
        """Test the estimate is exact when transport recovers every pairing."""
        rng = np.random.default_rng(5)
        features = rng.normal(size=(30, 2)) * 10
        labels = (features[:, 0] > 0).astype(int)
        source = _data(features, labels)
        target = _data(features + 0.01, labels)
        model = init_model("logreg", 2, 2, TrainConfig())
        model.params["W"] = np.array([[0.3, -0.3], [0.1, 0.2]])
        result = align(source, target, np.random.default_rng(0))
        transfer = transfer_labels(result.transport_map, source)
        assert label_preservation_gap(model, target, transfer) == pytest.approx(0.0, abs=1e-12)


class TestAlign:
    """Test the end-to-end alignment."""

    def test_subsamples_larger_side(self):
        """Test unequal sizes are equalized before solving."""
        source = _data(np.arange(10.0)[:, None], labels=[0, 1] * 5)
        target = _data(np.arange(4.0)[:, None])
        result = align(source, target, np.random.default_rng(1))
        assert result.subsampled
        assert result.source_index.size == 4
        assert result.matched_source_rows().size == 4
        assert set(result.matched_source_rows().tolist()) <= set(range(10))

    def test_identity(self):
        """Test aligning a sample with itself."""
        source = _data([[3.0, 1.0], [0.0, 2.0], [5.0, 5.0]], labels=[0, 1, 0])
        result = align(source, source, np.random.default_rng(0))
        assert result.transport_map.inverse.tolist() == [0, 1, 2]
        assert result.to_json()["objective"] == 0.0

    def test_missing_values_rejected(self):
        """Test transport needs imputed data."""
        target = Dataset(features=np.array([[1.0]]), missing=MissingMask(np.array([[True]])))
        with pytest.raises(PreconditionError):
            align(_data([[0.0]]), target, np.random.default_rng(0))
