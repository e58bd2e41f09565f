import itertools
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import LogisticRegression

from unifiedfl.data import (
    Dataset,
    class_histograms,
    kmeans,
    load_csv,
    load_idx,
    mean_pairwise_tv,
    partition_iid,
    partition_noniid,
    synth_gaussian_mixture,
    train_test_split,
    write_csv,
    write_idx,
)
from unifiedfl.estimators import GraphNetClassifier
from unifiedfl.exceptions import ContractViolation, ParseError


def sse(X, labels):
    return sum(((X[labels == c] - X[labels == c].mean(0)) ** 2).sum() for c in np.unique(labels))


class TestDataset:
    def test_rejects_out_of_range(self):
        with pytest.raises(ContractViolation):
            Dataset(np.array([[1.5]]), np.array([0]))
        with pytest.raises(ContractViolation):
            Dataset(np.array([[0.5]]), np.array([3]), num_classes=2)
        with pytest.raises(ContractViolation):
            Dataset(np.array([[np.nan]]), np.array([0]))

    def test_immutable(self):
        d = Dataset(np.array([[0.5]]), np.array([0]))
        with pytest.raises(ValueError):
            d.features[0, 0] = 0.1


class TestSynthetic:
    def test_deterministic(self):
        a = synth_gaussian_mixture(3, 5, 4.0, 20, seed=7)
        b = synth_gaussian_mixture(3, 5, 4.0, 20, seed=7)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_balanced_and_normalized(self):
        d = synth_gaussian_mixture(4, 3, 5.0, 30, seed=0)
        assert np.bincount(d.labels).tolist() == [30] * 4
        assert d.features.min() >= 0 and d.features.max() <= 1

    def test_zero_separation_is_chance(self):
        d = synth_gaussian_mixture(4, 5, 0.0, 500, seed=1)
        tr, te = train_test_split(d, 0.5, 0)
        clf = LogisticRegression(max_iter=500).fit(tr.features, tr.labels)
        assert abs(clf.score(te.features, te.labels) - 0.25) < 0.05

    def test_wide_separation_learned_by_mlp(self):
        d = synth_gaussian_mixture(2, 2, 10.0, 200, seed=2)
        tr, te = train_test_split(d, 0.25, 0)
        clf = GraphNetClassifier("MLP_a", epochs=15, lr=1e-2).fit(tr.features, tr.labels)
        assert clf.score(te.features, te.labels) > 0.99

    def test_label_map_swaps_classes(self):
        a = synth_gaussian_mixture(2, 3, 6.0, 50, seed=3)
        b = synth_gaussian_mixture(2, 3, 6.0, 50, label_map=[1, 0], seed=3)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(b.labels, 1 - a.labels)

    def test_shared_centers(self):
        a = synth_gaussian_mixture(2, 3, 6.0, 200, seed=1, centers_seed=9)
        b = synth_gaussian_mixture(2, 3, 6.0, 200, seed=2, centers_seed=9)
        for c in range(2):
            assert np.abs(a.features[a.labels == c].mean(0) - b.features[b.labels == c].mean(0)).max() < 0.05

    def test_train_test_split_disjoint(self):
        d = synth_gaussian_mixture(2, 3, 6.0, 50, seed=0)
        tr, te = train_test_split(d, 0.3, 1)
        assert len(tr) + len(te) == 100 and len(te) == 30
        assert tr.split == "train" and te.split == "test"


class TestKMeans:
    def test_four_points(self):
        X = np.array([[0.0], [1.0], [10.0], [11.0]])
        res = kmeans(X, 2, seed=0)
        labels = res.assignments
        assert labels[0] == labels[1] != labels[2] == labels[3]
        np.testing.assert_allclose(sorted(res.centers[:, 0]), [0.5, 10.5])
        best = min(sse(X, np.array(l)) for l in itertools.product([0, 1], repeat=4) if len(set(l)) == 2)
        assert res.sse == pytest.approx(best)

    def test_k_equals_n(self, rng):
        X = rng.normal(size=(6, 2))
        res = kmeans(X, 6, seed=0)
        assert len(set(res.assignments.tolist())) == 6
        assert res.sse == 0

    def test_duplicated_dataset_same_centers(self, rng):
        X = np.concatenate([rng.normal(-3, 1, (20, 2)), rng.normal(3, 1, (20, 2))])
        a = kmeans(X, 2, seed=0, init=X[[0, 20]])
        b = kmeans(np.concatenate([X, X]), 2, seed=0, init=X[[0, 20]])
        np.testing.assert_allclose(a.centers, b.centers, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_sse_monotone(self, k, seed):
        X = np.random.default_rng(seed).normal(size=(40, 3))
        res = kmeans(X, k, seed=seed)
        assert np.all(np.diff(res.sse_history) <= 1e-9)
        assert len(set(res.assignments.tolist())) == k


class TestSplits:
    def mixture(self, seed=0, n=500):
        return synth_gaussian_mixture(2, 4, 8.0, n, seed=seed)

    def test_noniid_shards_follow_components(self):
        d = self.mixture()
        plan = partition_noniid(d, 2, 0)
        for ix in plan.indices:
            assert np.bincount(d.labels[ix], minlength=2).max() / len(ix) >= 0.95

    def test_iid_histograms_near_global(self):
        d = synth_gaussian_mixture(2, 4, 3.0, 500, seed=0)
        plan = partition_iid(d, 2, 0)
        for h in class_histograms(d, plan):
            assert np.all(np.abs(h - 0.5) <= 0.05)

    @pytest.mark.parametrize("split", [partition_iid, partition_noniid])
    def test_single_client_gets_everything(self, split):
        d = self.mixture(n=20)
        plan = split(d, 1, 0)
        np.testing.assert_array_equal(np.sort(plan.indices[0]), np.arange(len(d)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 1000))
    def test_disjoint_and_exhaustive(self, m, seed):
        d = synth_gaussian_mixture(3, 2, 4.0, 20, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for plan in (partition_iid(d, m, seed), partition_noniid(d, m, seed)):
                joined = np.concatenate(plan.indices)
                assert len(joined) == len(d)
                assert len(np.unique(joined)) == len(d)

    def test_noniid_more_heterogeneous_than_iid(self):
        for seed in range(5):
            d = synth_gaussian_mixture(2, 4, 6.0, 200, seed=seed)
            tv_non = mean_pairwise_tv(class_histograms(d, partition_noniid(d, 4, seed)))
            tv_iid = mean_pairwise_tv(class_histograms(d, partition_iid(d, 4, seed)))
            assert tv_non > tv_iid

    def test_small_shard_warns(self):
        d = synth_gaussian_mixture(2, 2, 6.0, 10, seed=0)
        with pytest.warns(UserWarning):
            partition_noniid(d, 2, 0)

    def test_bad_sizes(self):
        d = self.mixture(n=10)
        with pytest.raises(ContractViolation):
            partition_iid(d, 2, 0, sizes=[5, 6])


class TestLoaders:
    def test_idx_header(self, tmp_path):
        raw = struct.pack(">HBB", 0, 0x08, 3) + struct.pack(">3I", 2, 2, 2) + bytes([0, 255, 128, 3, 4, 5, 6, 7])
        (tmp_path / "x.idx").write_bytes(raw)
        d = load_idx(tmp_path / "x.idx")
        assert len(d) == 2 and d.input_shape == (2, 2)
        assert d.features[0, 0, 1] == 1.0

    def test_idx_round_trip(self, tmp_path, rng):
        pixels = rng.integers(0, 256, (5, 3, 3), dtype=np.uint8)
        labels = rng.integers(0, 4, 5).astype(np.uint8)
        write_idx(tmp_path / "x", pixels)
        write_idx(tmp_path / "y", labels)
        d = load_idx(tmp_path / "x", tmp_path / "y")
        np.testing.assert_allclose(d.features, pixels / 255.0, atol=1e-12)
        np.testing.assert_array_equal(d.labels, labels)

    def test_idx_errors_carry_offsets(self, tmp_path):
        (tmp_path / "bad").write_bytes(b"\x01\x02\x08\x01" + b"\x00" * 8)
        with pytest.raises(ParseError) as err:
            load_idx(tmp_path / "bad")
        assert err.value.location == 0
        raw = struct.pack(">HBB", 0, 0x08, 1) + struct.pack(">I", 5) + b"\x00\x01"
        (tmp_path / "short").write_bytes(raw)
        with pytest.raises(ParseError) as err:
            load_idx(tmp_path / "short")
        assert err.value.location == len(raw)

    def test_csv_single_row(self, tmp_path):
        (tmp_path / "a.csv").write_text("1,0.5,0.25\n")
        d = load_csv(tmp_path / "a.csv")
        assert len(d) == 1 and d.labels[0] == 1
        np.testing.assert_array_equal(d.features[0], [0.5, 0.25])

    @pytest.mark.parametrize("header", [False, True])
    def test_csv_round_trip(self, tmp_path, header):
        d = synth_gaussian_mixture(3, 4, 5.0, 10, seed=0)
        write_csv(tmp_path / "d.csv", d, header=header)
        back = load_csv(tmp_path / "d.csv")
        np.testing.assert_allclose(back.features, d.features, atol=1e-9)
        np.testing.assert_array_equal(back.labels, d.labels)

    def test_csv_errors_name_line(self, tmp_path):
        (tmp_path / "r.csv").write_text("0,0.1,0.2\n1,0.3\n")
        with pytest.raises(ParseError) as err:
            load_csv(tmp_path / "r.csv")
        assert err.value.location == 2 and err.value.unit == "line"
        (tmp_path / "n.csv").write_text("0,0.1\n1,abc\n")
        with pytest.raises(ParseError):
            load_csv(tmp_path / "n.csv")
