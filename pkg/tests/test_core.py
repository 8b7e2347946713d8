"""
Unit tests for the core module.
"""
import numpy as np
import pytest

from app.core import (Dataset, FeatureGrouping, MissingMask, RngSpec, equalize_sizes, load_dataset, make_grouping,
                      mix64, parse_grouping, save_dataset)
from app.errors import DomainError, ParseError, SchemaError, ShapeError


class TestDataset:
    """Test Dataset validation."""

    def test_basic_properties(self):
        """Test shape, label and class count properties."""
        data = Dataset(features=np.zeros((4, 3)), labels=[0, 1, 2, 1])
        assert data.n == 4
        assert data.d == 3
        assert data.has_labels
        assert not data.has_missing
        assert data.n_classes == 3

    def test_rejects_non_finite_without_mask(self):
        """Test that NaN needs an explicit missing flag."""
        features = np.array([[1.0, np.nan]])
        with pytest.raises(DomainError):
            Dataset(features=features)

    def test_accepts_flagged_missing(self):
        """Test that flagged cells become NaN."""
        mask = MissingMask(np.array([[False, True]]))
        data = Dataset(features=np.array([[1.0, 5.0]]), missing=mask)
        assert data.has_missing
        assert np.isnan(data.features[0, 1])
        assert data.features[0, 0] == 1.0

    def test_rejects_negative_labels(self):
        """Test label range validation."""
        with pytest.raises(DomainError):
            Dataset(features=np.zeros((2, 1)), labels=[0, -1])

    def test_single_class_label_space(self):
        """Test labels must span at least two classes."""
        with pytest.raises(SchemaError):
            Dataset(features=np.zeros((3, 1)), labels=[0, 0, 0])
        with pytest.raises(SchemaError):
            Dataset(features=np.zeros((2, 1)), labels=[0, 1], classes=1)

    def test_explicit_label_space(self):
        """Test an explicit class count survives subsets and new features."""
        data = Dataset(features=np.zeros((3, 1)), labels=[0, 0, 1], classes=4)
        assert data.n_classes == 4
        assert data.subset([0, 1]).n_classes == 4
        assert data.with_features(np.ones((3, 1))).n_classes == 4
        with pytest.raises(DomainError):
            Dataset(features=np.zeros((2, 1)), labels=[0, 3], classes=3)

    def test_single_class_file(self, tmp_path):
        """Test a file holding only class 0 needs the label space from elsewhere."""
        path = tmp_path / "one_class.csv"
        path.write_text("a,label\n1,0\n2,0\n")
        with pytest.raises(SchemaError):
            load_dataset(path)
        assert load_dataset(path, classes=2).n_classes == 2

    def test_rejects_empty(self):
        """Test n >= 1 and d >= 1."""
        with pytest.raises(ShapeError):
            Dataset(features=np.zeros((0, 3)))

    def test_subset_keeps_order(self):
        """Test that subset returns rows in the requested order."""
        data = Dataset(features=np.arange(6.0).reshape(3, 2), labels=[0, 1, 0])
        sub = data.subset([2, 0])
        assert sub.features.tolist() == [[4.0, 5.0], [0.0, 1.0]]
        assert sub.labels.tolist() == [0, 0]

    def test_features_are_read_only(self):
        """Test immutability of the feature matrix."""
        data = Dataset(features=np.zeros((2, 2)))
        with pytest.raises(ValueError):
            data.features[0, 0] = 1.0


class TestGrouping:
    """Test feature groupings."""

    def test_identity_default(self):
        """Test the identity grouping."""
        grouping = make_grouping(4)
        assert grouping.g == 4
        assert grouping.is_identity

    def test_contiguous_blocks(self):
        """Test block grouping with a short last block."""
        grouping = make_grouping(5, "contiguous_blocks", block_size=2)
        assert grouping.group_of.tolist() == [0, 0, 1, 1, 2]
        assert grouping.g == 3
        assert not grouping.is_identity

    def test_explicit_must_be_surjective(self):
        """Test that gaps in the group ids are rejected."""
        with pytest.raises(DomainError):
            make_grouping(3, "explicit", vector=[0, 2, 2])

    def test_feature_mask_expands_players(self):
        """Test coalition expansion to features."""
        grouping = FeatureGrouping(np.array([0, 0, 1]))
        assert grouping.feature_mask(np.array([False, True])).tolist() == [False, False, True]

    def test_aggregate_or(self):
        """Test group flags as OR over member features."""
        grouping = FeatureGrouping(np.array([0, 0, 1, 1]))
        assert grouping.aggregate_or([False, True, False, False]).tolist() == [True, False]

    def test_parse_grouping(self):
        """Test the CLI grouping syntax."""
        assert parse_grouping("identity", 3).is_identity
        assert parse_grouping("blocks:2", 4).group_of.tolist() == [0, 0, 1, 1]
        assert parse_grouping("explicit:1,0,1", 3).group_of.tolist() == [1, 0, 1]

    def test_parse_grouping_errors(self):
        """Test malformed grouping specifications."""
        with pytest.raises(DomainError):
            parse_grouping("blocks:x", 4)
        with pytest.raises(DomainError):
            parse_grouping("explicit:0,2", 2)
        with pytest.raises(DomainError):
            parse_grouping("rings:3", 4)


class TestDatasetIO:
    """Test the CSV contract."""

    def test_round_trip_with_missing(self, tmp_path):
        """Test that saved data loads back bit-exactly."""
        features = np.array([[0.1, 1.0 / 3.0], [2.5, 7.0]])
        mask = MissingMask(np.array([[False, False], [True, False]]))
        data = Dataset(features=features, labels=[1, 0], feature_names=["a", "b"], missing=mask)
        path = tmp_path / "data.csv"
        save_dataset(data, path)

        loaded = load_dataset(path)
        assert loaded.feature_names == ["a", "b"]
        assert loaded.labels.tolist() == [1, 0]
        assert loaded.missing.mask.tolist() == mask.mask.tolist()
        assert loaded.features[0, 1] == 1.0 / 3.0
        assert loaded.features[0, 0] == 0.1

    def test_nan_token_is_missing(self, tmp_path):
        """Test the literal NaN marks a missing cell."""
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1,NaN,0\n2,3,1\n")
        data = load_dataset(path)
        assert data.missing.mask.tolist() == [[False, True], [False, False]]

    def test_malformed_cell(self, tmp_path):
        """Test that a bad cell names its row and column."""
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1,2,0\n3,abc,1\n")
        with pytest.raises(ParseError, match="row 2, column 'x1'"):
            load_dataset(path)

    def test_missing_label_column(self, tmp_path):
        """Test schema error for an absent label column."""
        path = tmp_path / "data.csv"
        path.write_text("x0,x1\n1,2\n")
        with pytest.raises(SchemaError):
            load_dataset(path)
        assert not load_dataset(path, label_column=None).has_labels

    def test_ragged_row(self, tmp_path):
        """Test schema error for rows with the wrong cell count."""
        path = tmp_path / "data.csv"
        path.write_text("x0,x1,label\n1,2\n")
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_file_not_found(self, tmp_path):
        """Test missing files raise FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "absent.csv")


class TestRng:
    """Test seeded stream derivation."""

    def test_streams_are_reproducible(self):
        """Test equal keys give equal draws."""
        a = RngSpec(42).stream("shapley.xpe", 3).random(5)
        b = RngSpec(42).stream("shapley.xpe", 3).random(5)
        assert np.array_equal(a, b)

    def test_streams_differ_by_key(self):
        """Test tags, indices and seeds all change the stream."""
        base = RngSpec(42).stream("shapley.xpe", 3).random(3)
        assert not np.array_equal(base, RngSpec(42).stream("shapley.xpe", 4).random(3))
        assert not np.array_equal(base, RngSpec(42).stream("shapley.xppe", 3).random(3))
        assert not np.array_equal(base, RngSpec(43).stream("shapley.xpe", 3).random(3))

    def test_mix64_known_value(self):
        """Test the SplitMix64 finalizer on seed 0."""
        assert mix64(0) == 0xE220A8397B1DCDAF

    def test_rejects_out_of_range_seed(self):
        """Test seeds must fit 64 bits."""
        with pytest.raises(DomainError):
            RngSpec(-1)

    def test_equalize_sizes(self):
        """Test that the larger sample is subsampled to the smaller size."""
        source = Dataset(features=np.zeros((10, 2)))
        target = Dataset(features=np.zeros((4, 2)))
        s_idx, t_idx = equalize_sizes(source, target, RngSpec(0).stream("test"))
        assert s_idx.size == 4
        assert t_idx.tolist() == [0, 1, 2, 3]
        assert np.all(np.diff(s_idx) > 0)
