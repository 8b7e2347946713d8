"""
Unit tests for the baselines module.
"""
import numpy as np
import pytest

from app.baselines import attribute_baseline, axs, lad, predicted_class, standard_spec
from app.core import Dataset, RngSpec, make_grouping
from app.drift import KsResult
from app.errors import DomainError, ShapeError
from app.model import TrainConfig, init_model
from app.shapley import exact_shapley
from app.transport import TransportMap


def _model(d=4, seed=0, zero_weights=False):
    model = init_model("logreg", d, 3, TrainConfig())
    rng = np.random.default_rng(seed)
    model.params["W"] = np.zeros((d, 3)) if zero_weights else rng.normal(size=(d, 3))
    model.params["b"] = rng.normal(size=3)
    return model


def _mask(flags):
    flags = np.asarray(flags, dtype=bool)
    return KsResult(statistic=np.zeros(flags.size), p_value=np.where(flags, 0.0, 1.0), mask=flags, alpha=0.05)


class TestLad:
    """Test the local attribution difference."""

    def test_same_sample_is_zero(self):
        """Test x_s = x_t gives a zero vector."""
        x = np.array([1.0, -1.0, 0.5, 2.0])
        assert np.all(lad(_model(), x, x, make_grouping(4)).values == 0.0)

    def test_constant_model(self):
        """Test a model ignoring every feature gets zero attributions."""
        result = lad(_model(zero_weights=True), np.ones(4), -np.ones(4), make_grouping(4))
        assert np.allclose(result.values, 0.0, atol=1e-15)

    def test_matches_exact_difference(self):
        """Test the output against both exact games for class c*."""
        model = _model(seed=1)
        grouping = make_grouping(4)
        x_t, x_s = np.array([1.0, 2.0, -1.0, 0.0]), np.array([1.0, 2.0, -1.0, 3.0])
        c_star = predicted_class(model, x_t)
        phi_t = exact_shapley(standard_spec(model, x_t, c_star, grouping)).values
        phi_s = exact_shapley(standard_spec(model, x_s, c_star, grouping)).values
        result = lad(model, x_t, x_s, grouping)
        assert result.values == pytest.approx(np.abs(phi_t - phi_s), abs=1e-12)
        assert np.all(result.values >= 0)
        assert result.method == "lad"
        assert result.v_full == pytest.approx(float(model.predict_proba(x_t)[c_star]))

    def test_shape_mismatch(self):
        """Test differing sample shapes."""
        with pytest.raises(ShapeError):
            lad(_model(), np.zeros(4), np.zeros(3), make_grouping(4))


class TestAxs:
    """Test attribution times shift."""

    def test_all_false_mask(self):
        """Test an all-false mask gives zeros."""
        result = axs(_model(), np.ones(4), _mask([False] * 4), make_grouping(4))
        assert np.all(result.values == 0.0)

    def test_all_true_mask(self):
        """Test an all-true mask keeps the standard attribution."""
        model = _model(seed=2)
        x = np.array([0.5, 1.5, -2.0, 1.0])
        grouping = make_grouping(4)
        plain = exact_shapley(standard_spec(model, x, predicted_class(model, x), grouping)).values
        assert np.array_equal(axs(model, x, _mask([True] * 4), grouping).values, plain)

    def test_group_support(self):
        """Test a flag on feature 0 keeps only the group holding feature 0."""
        grouping = make_grouping(4, "contiguous_blocks", block_size=2)
        result = axs(_model(seed=3), np.array([1.0, 2.0, 3.0, 4.0]), _mask([True, False, False, False]), grouping)
        assert result.values[1] == 0.0
        assert result.player_kind == "groups"

    def test_mask_length(self):
        """Test the mask must cover every feature."""
        with pytest.raises(ShapeError):
            axs(_model(), np.ones(4), _mask([True, False]), make_grouping(4))


class TestAttributeBaseline:
    """Test dataset-level baselines."""

    def _pair(self):
        rng = np.random.default_rng(5)
        source = Dataset(features=rng.normal(size=(5, 4)), labels=[0, 1, 2, 0, 1])
        target = Dataset(features=rng.normal(size=(5, 4)))
        return source, target, TransportMap(np.arange(5), np.array([4, 3, 2, 1, 0]))

    def test_lad_rows(self):
        """Test instance j is paired with its inverse-map source row."""
        source, target, maps = self._pair()
        results = attribute_baseline("lad", _model(), target, maps, source, make_grouping(4))
        expected = lad(_model(), target.features[1], source.features[3], make_grouping(4))
        assert np.array_equal(results[1].values, expected.values)

    def test_tabular_background(self):
        """Test the tabular mode is deterministic and thread independent."""
        source, target, maps = self._pair()
        kwargs = dict(ks_result=_mask([True] * 4), rng=RngSpec(3), tabular=True)
        one = attribute_baseline("axs", _model(), target, maps, source, make_grouping(4), threads=1, **kwargs)
        two = attribute_baseline("axs", _model(), target, maps, source, make_grouping(4), threads=3, **kwargs)
        assert all(np.array_equal(a.values, b.values) for a, b in zip(one, two))

    def test_axs_needs_mask(self):
        """Test AxS without a drift result."""
        source, target, maps = self._pair()
        with pytest.raises(DomainError):
            attribute_baseline("axs", _model(), target, maps, source, make_grouping(4))
