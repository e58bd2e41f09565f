import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import linkage
from sklearn.metrics import silhouette_score

from unifiedfl.clustering import (
    Partition,
    canonical_labels,
    check_distance_matrix,
    cut_by_silhouette,
    cut_tree,
    gradient_moment_descriptor,
    pairwise_distances,
    silhouette,
    smooth_distances,
    static_topology_clusters,
    ward_agglomerate,
)
from unifiedfl.exceptions import ContractViolation
from unifiedfl.model_graph import build_model_graph, topology_descriptor
from unifiedfl.roster import get_architecture
from unifiedfl.theta import theta_distance, unflatten


def brute_force_ward(X):
    """Ward merges recomputed from raw coordinates at every step."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    members = {i: [i] for i in range(n)}
    merges = []
    for step in range(n - 1):
        ids = sorted(members)
        best = None
        for a, b in itertools.combinations(ids, 2):
            A, B = X[members[a]], X[members[b]]
            delta = len(A) * len(B) / (len(A) + len(B)) * np.sum((A.mean(0) - B.mean(0)) ** 2)
            if best is None or delta < best[0]:
                best = (delta, a, b)
        delta, a, b = best
        members[n + step] = members.pop(a) + members.pop(b)
        merges.append((a, b, delta))
    return merges


def direct_silhouette(D, labels):
    labels = np.asarray(labels)
    n = len(labels)
    scores = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            scores.append(0.0)
            continue
        a = sum(D[i, j] for j in own) / len(own)
        b = min(
            sum(D[i, j] for j in range(n) if labels[j] == c) / sum(1 for j in range(n) if labels[j] == c)
            for c in set(labels.tolist()) - {labels[i]}
        )
        scores.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(scores) / n


def set_partition(labels):
    groups = {}
    for i, c in enumerate(labels):
        groups.setdefault(int(c), set()).add(i)
    return frozenset(frozenset(g) for g in groups.values())


class TestDistances:
    def test_identical(self):
        np.testing.assert_array_equal(pairwise_distances([np.ones(3)] * 4), 0)

    def test_one_dimensional(self):
        D = pairwise_distances([np.array([0.0]), np.array([1.0]), np.array([10.0])])
        np.testing.assert_array_equal(D, [[0, 1, 10], [1, 0, 9], [10, 9, 0]])

    def test_matches_theta_distance(self, rng):
        thetas = [unflatten(v, 4, 4) for v in rng.normal(size=(5, 18))]
        D = pairwise_distances(thetas)
        for i, j in itertools.product(range(5), repeat=2):
            assert D[i, j] == pytest.approx(theta_distance(thetas[i], thetas[j]), abs=1e-12)

    def test_contracts(self):
        with pytest.raises(ContractViolation):
            pairwise_distances([np.zeros(2)])
        with pytest.raises(ContractViolation):
            pairwise_distances([np.zeros(2), np.zeros(3)])
        with pytest.raises(ContractViolation):
            check_distance_matrix(np.array([[0.0, 1.0], [2.0, 0.0]]))


class TestWard:
    def test_hand_example(self):
        tree = ward_agglomerate(pairwise_distances([[0.0], [1.0], [10.0]]))
        assert tree.merge_pairs() == [(0, 1), (2, 3)]
        np.testing.assert_allclose(tree.heights, [0.5, (2 * 1 / 3) * (0.5 - 10) ** 2], rtol=1e-12)

    def test_identical_points(self):
        tree = ward_agglomerate(pairwise_distances([[1.0, 2.0], [1.0, 2.0], [5.0, 0.0]]))
        assert tree.merge_pairs()[0] == (0, 1)
        assert tree.heights[0] == 0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n, dim = rng.integers(2, 7), rng.integers(1, 5)
            X = rng.normal(size=(n, dim))
            tree = ward_agglomerate(pairwise_distances(list(X)))
            ref = brute_force_ward(X)
            assert tree.merge_pairs() == [(a, b) for a, b, _ in ref]
            np.testing.assert_allclose(tree.heights, [d for _, _, d in ref], atol=1e-9)

    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            X = rng.normal(size=(rng.integers(3, 12), 3))
            tree = ward_agglomerate(pairwise_distances(list(X)))
            Z = linkage(X, "ward")
            np.testing.assert_array_equal(tree.merges[:, [0, 1, 3]], Z[:, [0, 1, 3]])
            # scipy reports sqrt(2 * cost)
            np.testing.assert_allclose(np.sqrt(2 * tree.heights), Z[:, 2], rtol=1e-10)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 9), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_monotone_and_additive(self, n, dim, seed):
        X = np.random.default_rng(seed).normal(size=(n, dim))
        tree = ward_agglomerate(pairwise_distances(list(X)))
        assert np.all(np.diff(tree.heights) >= -1e-12)
        counts = np.concatenate([np.ones(n), tree.merges[:, 3]])
        for a, b, _, c in tree.merges:
            assert counts[int(a)] + counts[int(b)] == c


class TestSilhouette:
    def test_hand_example(self):
        D = pairwise_distances([[0.0], [1.0], [10.0], [11.0]])
        expected = ((10.5 - 1) / 10.5 + (9.5 - 1) / 9.5) / 2
        assert silhouette(D, [0, 0, 1, 1]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.8997, abs=1e-4)

    def test_duplicated_pairs_far_apart(self):
        D = pairwise_distances([[0.0], [0.0], [1e6], [1e6]])
        assert silhouette(D, [0, 0, 1, 1]) == pytest.approx(1.0)

    def test_swapped_is_lower(self):
        D = pairwise_distances([[0.0], [1.0], [10.0], [11.0]])
        assert silhouette(D, [0, 1, 0, 1]) < silhouette(D, [0, 0, 1, 1])

    def test_direct_definition(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(3, 11))
            D = pairwise_distances(list(rng.normal(size=(n, 2))))
            k = int(rng.integers(2, n))
            labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
            rng.shuffle(labels)
            s = silhouette(D, labels)
            assert s == pytest.approx(direct_silhouette(D, labels), abs=1e-9)
            assert -1 <= s <= 1
            assert s == pytest.approx(silhouette_score(D, labels, metric="precomputed"), abs=1e-9)

    def test_undefined_cluster_counts(self):
        D = pairwise_distances([[0.0], [1.0], [3.0]])
        with pytest.raises(ContractViolation):
            silhouette(D, [0, 0, 0])
        with pytest.raises(ContractViolation):
            silhouette(D, [0, 1, 2])


class TestCut:
    def test_two_tight_pairs(self):
        D = pairwise_distances([[0.0], [1.0], [10.0], [11.0]])
        p = cut_by_silhouette(ward_agglomerate(D), D)
        assert p.M == 2
        assert p.assignment == (0, 0, 1, 1)

    def test_equidistant_tie(self):
        D = np.ones((3, 3)) - np.eye(3)
        p = cut_by_silhouette(ward_agglomerate(D), D)
        assert p.assignment == (0, 0, 1)

    def test_two_clients_single_cluster(self):
        D = pairwise_distances([[0.0], [5.0]])
        p = cut_by_silhouette(ward_agglomerate(D), D)
        assert p.M == 1 and p.warning

    def test_cut_tree_counts(self, rng):
        tree = ward_agglomerate(pairwise_distances(list(rng.normal(size=(7, 2)))))
        for K in range(1, 8):
            labels = cut_tree(tree, K)
            assert labels.max() + 1 == K
            np.testing.assert_array_equal(labels, canonical_labels(labels))

    def test_k_max_caps(self, rng):
        X = np.arange(10, dtype=float)[:, None] * 100
        D = pairwise_distances(list(X))
        assert cut_by_silhouette(ward_agglomerate(D), D, K_max=3).M <= 3

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 9), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariant(self, n, seed, scale):
        X = np.random.default_rng(seed).normal(size=(n, 3))
        D = pairwise_distances(list(X))
        Ds = pairwise_distances(list(X * scale))
        assert cut_by_silhouette(ward_agglomerate(D), D).assignment == \
            cut_by_silhouette(ward_agglomerate(Ds), Ds).assignment

    @settings(max_examples=40, deadline=None)
    @given(st.integers(3, 9), st.integers(0, 2**32 - 1))
    def test_permutation_equivariant(self, n, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, 3))
        perm = rng.permutation(n)
        D = pairwise_distances(list(X))
        Dp = pairwise_distances(list(X[perm]))
        a = cut_by_silhouette(ward_agglomerate(D), D).assignment
        b = cut_by_silhouette(ward_agglomerate(Dp), Dp).assignment
        assert set_partition(np.asarray(a)[perm]) == set_partition(b)

    def test_matches_exhaustive_search_on_separated_blobs(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            n = int(rng.integers(4, 7))
            k = int(rng.integers(2, n))
            truth = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
            X = truth[:, None] * 100.0 + rng.normal(0, 0.1, (n, 2))
            D = pairwise_distances(list(X))
            best, best_score = None, -np.inf
            for labels in itertools.product(range(n), repeat=n):
                M = len(set(labels))
                if not (2 <= M <= min(6, n - 1)) or canonical_labels(labels).tolist() != list(labels):
                    continue
                s = direct_silhouette(D, labels)
                if s > best_score + 1e-12:
                    best, best_score = labels, s
            got = cut_by_silhouette(ward_agglomerate(D), D)
            assert set_partition(got.assignment) == set_partition(best)


class TestPartition:
    def test_from_labels_canonical(self):
        p = Partition.from_labels([5, 5, 2, 7])
        assert p.assignment == (0, 0, 1, 2) and p.M == 3
        assert p.members() == [[0, 1], [2], [3]]

    def test_invalid(self):
        with pytest.raises(ContractViolation):
            Partition((0, 2), 3)


class TestStaticTopology:
    def test_mlps_and_cnns_separate(self):
        names = ["MLP_a", "MLP_b", "MLP_c", "MLP_a", "MLP_b"] + ["CNN_a"] * 5
        descs = [topology_descriptor(build_model_graph(get_architecture(n), i)) for i, n in enumerate(names)]
        p = static_topology_clusters(descs, 2)
        assert set_partition(p.assignment) == frozenset({frozenset(range(5)), frozenset(range(5, 10))})

    def test_identical_descriptors_balanced(self):
        d = topology_descriptor(build_model_graph(get_architecture("MLP_a"), 0))
        p = static_topology_clusters([d] * 4, 2)
        assert p.assignment == (0, 0, 1, 1)
        assert p.assignment == static_topology_clusters([d] * 4, 2).assignment

    def test_k_equals_n(self, rng):
        p = static_topology_clusters(list(rng.normal(size=(5, 8))), 5)
        assert p.M == 5

    def test_bad_k(self, rng):
        with pytest.raises(ContractViolation):
            static_topology_clusters(list(rng.normal(size=(3, 8))), 4)


class TestGradientMoments:
    def test_zero(self):
        np.testing.assert_array_equal(gradient_moment_descriptor(np.zeros(18)), np.zeros(8))

    def test_two_point_block(self):
        g = np.zeros(10)
        g[0:2] = (1.0, 3.0)
        out = gradient_moment_descriptor(g, 2, 2)
        assert tuple(out[:2]) == (2.0, 1.0)

    def test_direct_summation(self, rng):
        for _ in range(10):
            g = rng.normal(size=18)
            out = gradient_moment_descriptor(g, 4, 4)
            for b in range(4):
                block = g[4 * b:4 * b + 4].tolist()
                mean = sum(block) / 4
                var = sum((x - mean) ** 2 for x in block) / 4
                assert out[2 * b] == pytest.approx(mean, abs=1e-12)
                assert out[2 * b + 1] == pytest.approx(var, abs=1e-12)


class TestSmoothing:
    def test_off_and_on(self):
        a, b = np.ones((2, 2)), np.zeros((2, 2))
        np.testing.assert_array_equal(smooth_distances(None, b, 0.5), b)
        np.testing.assert_array_equal(smooth_distances(a, b, 0.0), b)
        np.testing.assert_allclose(smooth_distances(a, b, 0.25), 0.25)
        with pytest.raises(ContractViolation):
            smooth_distances(a, b, 1.0)
