"""Client clustering: distances, Ward agglomeration, silhouette cuts.

All functions are pure; ties are always broken toward the lexicographically
smallest index pair so that federation traces are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation

__all__ = [
    "LinkageTree",
    "Partition",
    "pairwise_distances",
    "check_distance_matrix",
    "ward_agglomerate",
    "cut_tree",
    "silhouette",
    "silhouette_samples",
    "cut_by_silhouette",
    "static_topology_clusters",
    "gradient_moment_descriptor",
    "smooth_distances",
    "canonical_labels",
]

DEFAULT_K_MAX = 6


def pairwise_distances(vectors) -> np.ndarray:
    """Euclidean distance matrix; each pair is computed once and mirrored."""
    vecs = [np.asarray(getattr(v, "values", v), dtype=np.float64).reshape(-1) for v in vectors]
    if len(vecs) < 2:
        raise ContractViolation(f"need at least 2 vectors, got {len(vecs)}")
    lengths = {v.shape[0] for v in vecs}
    if len(lengths) != 1:
        raise ContractViolation(f"vectors have mismatched lengths {sorted(lengths)}")
    n = len(vecs)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = np.linalg.norm(vecs[i] - vecs[j])
    return D


def check_distance_matrix(D) -> np.ndarray:
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ContractViolation(f"distance matrix must be square, got shape {D.shape}")
    if not np.all(np.isfinite(D)):
        raise ContractViolation("distance matrix has non-finite entries")
    if np.any(D < 0):
        raise ContractViolation("distance matrix has negative entries")
    if not np.array_equal(D, D.T):
        raise ContractViolation("distance matrix is not symmetric")
    if np.any(np.diag(D) != 0):
        raise ContractViolation("distance matrix has a non-zero diagonal")
    return D


@dataclass(frozen=True)
class LinkageTree:
    """Merge history in scipy's linkage layout.

    Row ``s`` of ``merges`` is ``(left, right, height, count)``: clusters
    ``left`` and ``right`` (leaves are ``0..n-1``, the cluster formed at step
    ``s`` gets id ``n + s``) merge at Ward cost ``height``.
    """

    n: int
    merges: np.ndarray

    @property
    def heights(self) -> np.ndarray:
        return self.merges[:, 2]

    def merge_pairs(self) -> list:
        return [(int(a), int(b)) for a, b in self.merges[:, :2]]


def ward_agglomerate(D) -> LinkageTree:
    """Ward agglomeration from a distance matrix via Lance-Williams updates.

    Costs are Ward increments: two singletons at distance ``d`` merge at
    ``d**2 / 2``; for Euclidean inputs a general merge costs
    ``|A||B| / (|A| + |B|) * ||mu_A - mu_B||**2``.
    """
    D = check_distance_matrix(D)
    n = D.shape[0]
    size = np.zeros(2 * n - 1)
    size[:n] = 1
    cost = np.full((2 * n - 1, 2 * n - 1), np.inf)
    cost[:n, :n] = 0.5 * D ** 2
    active = list(range(n))
    merges = np.zeros((max(n - 1, 0), 4))
    for step in range(n - 1):
        best, pair = np.inf, None
        # active is kept sorted, so the first strict minimum is the lexicographic winner
        for a_pos, i in enumerate(active):
            for j in active[a_pos + 1:]:
                if cost[i, j] < best:
                    best, pair = cost[i, j], (i, j)
        i, j = pair
        new = n + step
        ni, nj = size[i], size[j]
        active.remove(i)
        active.remove(j)
        for k in active:
            nk = size[k]
            c = ((ni + nk) * cost[k, i] + (nj + nk) * cost[k, j] - nk * cost[i, j]) / (ni + nj + nk)
            cost[k, new] = cost[new, k] = c
        size[new] = ni + nj
        active.append(new)
        merges[step] = (i, j, best, ni + nj)
    return LinkageTree(n, merges)


def canonical_labels(labels) -> np.ndarray:
    """Relabel clusters 0, 1, ... in order of first appearance."""
    labels = np.asarray(labels)
    out = np.empty(labels.shape[0], dtype=np.int64)
    seen = {}
    for idx, lab in enumerate(labels.tolist()):
        out[idx] = seen.setdefault(lab, len(seen))
    return out


def cut_tree(tree: LinkageTree, K: int) -> np.ndarray:
    """Flat labels with ``K`` clusters, obtained by replaying the first ``n - K`` merges."""
    n = tree.n
    if not 1 <= K <= n:
        raise ContractViolation(f"cannot cut {n} leaves into {K} clusters")
    parent = np.arange(2 * n - 1)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for step in range(n - K):
        a, b = (int(v) for v in tree.merges[step, :2])
        parent[find(a)] = n + step
        parent[find(b)] = n + step
    return canonical_labels([find(i) for i in range(n)])


@dataclass(frozen=True)
class Partition:
    """Cluster assignment of clients.

    ``warning`` is set when the partition was forced (silhouette undefined).
    """

    assignment: tuple
    M: int
    silhouette: float = float("nan")
    warning: str = ""

    def __post_init__(self):
        labels = np.asarray(self.assignment)
        if self.M < 1 or self.M > max(len(labels), 1):
            raise ContractViolation(f"cluster count {self.M} out of range for {len(labels)} clients")
        if set(labels.tolist()) != set(range(self.M)):
            raise ContractViolation("every cluster id in [0, M) must be non-empty")

    @classmethod
    def from_labels(cls, labels, **kwargs) -> "Partition":
        labels = canonical_labels(labels)
        return cls(tuple(int(v) for v in labels), int(labels.max()) + 1 if labels.size else 0, **kwargs)

    @classmethod
    def single(cls, n: int, **kwargs) -> "Partition":
        return cls(tuple([0] * n), 1, **kwargs)

    @property
    def n(self) -> int:
        return len(self.assignment)

    def members(self) -> list:
        out = [[] for _ in range(self.M)]
        for client, c in enumerate(self.assignment):
            out[c].append(client)
        return out

    def to_dict(self) -> dict:
        return {
            "assignments": list(self.assignment),
            "K": self.M,
            "silhouette": None if np.isnan(self.silhouette) else float(self.silhouette),
            "warning": self.warning,
        }


def silhouette_samples(D, labels) -> np.ndarray:
    """Per-point silhouette values; singletons score 0."""
    D = np.asarray(D, dtype=np.float64)
    labels = np.asarray(labels)
    ids = np.unique(labels)
    n = labels.shape[0]
    if not 2 <= ids.shape[0] <= n - 1:
        raise ContractViolation(f"silhouette undefined for {ids.shape[0]} clusters over {n} points")
    s = np.zeros(n)
    for i in range(n):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in ids if c != labels[i])
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return s


def silhouette(D, partition) -> float:
    """Mean silhouette of a partition (a ``Partition`` or a label vector)."""
    labels = partition.assignment if isinstance(partition, Partition) else partition
    return float(silhouette_samples(D, labels).mean())


def cut_by_silhouette(tree: LinkageTree, D, K_max: int = DEFAULT_K_MAX) -> Partition:
    """Cut maximizing mean silhouette over K = 2..min(K_max, n - 1).

    Ties go to the smaller K. With fewer than three clients the silhouette
    is undefined and the single-cluster partition is returned with a warning.
    """
    if K_max < 2:
        raise ContractViolation(f"K_max must be >= 2, got {K_max}")
    n = tree.n
    if n < 3:
        return Partition.single(n, warning=f"silhouette undefined for n={n}; using one cluster")
    best_score, best_labels = -np.inf, None
    for K in range(2, min(K_max, n - 1) + 1):
        labels = cut_tree(tree, K)
        score = silhouette(D, labels)
        if score > best_score + 1e-12:
            best_score, best_labels = score, labels
    return Partition.from_labels(best_labels, silhouette=best_score)


def _standardize(X: np.ndarray) -> np.ndarray:
    sd = X.std(axis=0)
    keep = sd > 0
    return (X[:, keep] - X[:, keep].mean(axis=0)) / sd[keep]


def static_topology_clusters(descriptors, K: int) -> Partition:
    """Fixed-K Ward clustering of z-scored topology descriptors.

    Coordinates that are constant across clients are dropped.
    """
    X = np.array([np.asarray(d.as_array() if hasattr(d, "as_array") else d, dtype=np.float64)
                  for d in descriptors])
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ContractViolation(f"K={K} must lie in [1, {n}]")
    if n == 1:
        return Partition.single(1)
    Z = _standardize(X)
    D = pairwise_distances(list(Z)) if Z.shape[1] else np.zeros((n, n))
    return Partition.from_labels(cut_tree(ward_agglomerate(D), K))


def gradient_moment_descriptor(gradient, G_e: int = None, G_v: int = None) -> np.ndarray:
    """(mean, population variance) of the theta gradient in each of the four group blocks.

    ``gradient`` is a ``GradientBundle`` or a raw theta-gradient vector; the
    group counts default to an even split of the per-group coordinates.
    """
    g = np.asarray(getattr(gradient, "d_theta", gradient), dtype=np.float64)
    if G_e is None or G_v is None:
        G_e = G_v = (g.shape[0] - 2) // 4
    bounds = np.cumsum([0, G_e, G_e, G_v, G_v])
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        block = g[lo:hi]
        out += [block.mean(), block.var()]
    return np.array(out)


def smooth_distances(previous, current, coefficient: float) -> np.ndarray:
    """Exponential moving average ``c * previous + (1 - c) * current``."""
    current = np.asarray(current, dtype=np.float64)
    if previous is None or coefficient == 0:
        return current
    if not 0 <= coefficient < 1:
        raise ContractViolation(f"ema coefficient must be in [0, 1), got {coefficient}")
    return coefficient * np.asarray(previous) + (1 - coefficient) * current
