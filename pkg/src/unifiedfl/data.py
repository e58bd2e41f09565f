"""Datasets, k-means client splits and file loaders."""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, ParseError

__all__ = [
    "Dataset",
    "SplitPlan",
    "KMeansResult",
    "synth_gaussian_mixture",
    "kmeans",
    "partition_noniid",
    "partition_iid",
    "train_test_split",
    "class_histograms",
    "mean_pairwise_tv",
    "load_idx",
    "write_idx",
    "load_csv",
    "write_csv",
]


@dataclass(frozen=True)
class Dataset:
    """Immutable labelled samples with features in [0, 1]."""

    features: np.ndarray
    labels: np.ndarray
    split: str = "train"
    provenance: str = ""
    num_classes: int = 0

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).reshape(-1)
        if x.shape[0] < 1:
            raise ContractViolation("dataset must contain at least one sample")
        if x.shape[0] != y.shape[0]:
            raise ContractViolation(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if self.split not in ("train", "val", "test"):
            raise ContractViolation(f"unknown split tag {self.split!r}")
        if not np.all(np.isfinite(x)):
            raise ContractViolation("features must be finite")
        if x.min() < 0 or x.max() > 1:
            raise ContractViolation(f"features must lie in [0, 1], got [{x.min()}, {x.max()}]")
        num_classes = self.num_classes or int(y.max()) + 1
        if y.min() < 0 or y.max() >= num_classes:
            raise ContractViolation(f"labels must lie in [0, {num_classes})")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "num_classes", num_classes)

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.features.shape[1:]

    def subset(self, indices, split: str = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], split or self.split,
                       self.provenance, self.num_classes)


def _mixture_centers(num_classes, dim, separation, rng):
    if dim >= num_classes:
        # orthonormal directions scaled so every pair sits exactly `separation` apart
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        return q.T * (separation / np.sqrt(2.0))
    centers = rng.standard_normal((num_classes, dim))
    d = np.sqrt(((centers[:, None] - centers[None]) ** 2).sum(-1))
    closest = d[np.triu_indices(num_classes, 1)].min()
    return centers * (separation / closest) if closest > 0 else centers * 0


def synth_gaussian_mixture(num_classes: int, dim: int, class_separation: float, samples_per_class: int,
                           label_map=None, seed: int = 0, centers_seed: int = None, shape=None,
                           split: str = "train") -> Dataset:
    """Unit-variance isotropic Gaussian classes, min-max scaled to [0, 1].

    Parameters
    ----------
    class_separation : float
        Distance between every pair of class centers (in units of sigma).
    label_map : sequence of int, optional
        ``label_map[c]`` is the label emitted for component ``c``; permuting
        it on the same centers builds tasks whose labels conflict.
    centers_seed : int, optional
        Seed for the centers alone, so that datasets drawn with different
        ``seed`` values share their class geometry. Defaults to ``seed``.
    shape : tuple, optional
        Per-sample feature shape, e.g. ``(1, 4, 4)``; must multiply to ``dim``.
    """
    if num_classes < 2:
        raise ContractViolation("num_classes must be >= 2")
    if class_separation < 0:
        raise ContractViolation("class_separation must be non-negative")
    label_map = np.arange(num_classes) if label_map is None else np.asarray(label_map, dtype=np.int64)
    if label_map.shape != (num_classes,):
        raise ContractViolation(f"label_map must have {num_classes} entries")
    shape = (dim,) if shape is None else tuple(shape)
    if int(np.prod(shape)) != dim:
        raise ContractViolation(f"shape {shape} does not hold {dim} features")
    centers = _mixture_centers(num_classes, dim, class_separation,
                               np.random.default_rng(seed if centers_seed is None else centers_seed))
    rng = np.random.default_rng(seed)
    comp = np.repeat(np.arange(num_classes), samples_per_class)
    x = centers[comp] + rng.standard_normal((comp.shape[0], dim))
    lo, hi = x.min(), x.max()
    x = (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)
    order = rng.permutation(comp.shape[0])
    return Dataset(x[order].reshape((-1,) + shape), label_map[comp[order]], split,
                   f"gaussian_mixture(sep={class_separation}, seed={seed})",
                   max(num_classes, int(label_map.max()) + 1))


def train_test_split(dataset: Dataset, test_fraction: float, seed: int):
    """Random (train, test) split with at least one sample on each side."""
    n = len(dataset)
    n_test = min(max(1, int(round(test_fraction * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return dataset.subset(np.sort(perm[n_test:]), "train"), dataset.subset(np.sort(perm[:n_test]), "test")


# --- k-means -------------------------------------------------------------------


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    sse_history: list = field(default_factory=list)
    iterations: int = 0

    @property
    def sse(self) -> float:
        return self.sse_history[-1]


def _sq_dists(X, C):
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(-1)


def _plus_plus(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(X, np.array(centers)).min(axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(X[idx])
    return np.array(centers)


def _repair_empty(X, labels, C, k):
    for c in range(k):
        if np.any(labels == c):
            continue
        counts = np.bincount(labels, minlength=k)
        big = int(np.argmax(counts))
        members = np.flatnonzero(labels == big)
        far = members[np.argmax(((X[members] - C[big]) ** 2).sum(-1))]
        labels[far] = c
    return labels


def kmeans(features, k: int, max_iters: int = 100, seed: int = 0, init=None) -> KMeansResult:
    """k-means++ seeding followed by Lloyd iterations.

    Stops at an assignment fixpoint or after ``max_iters`` updates. An empty
    cluster takes the point of the largest cluster farthest from its center.
    ``sse_history`` holds the within-cluster SSE after every update.
    """
    X = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ContractViolation(f"k={k} must lie in [1, {n}]")
    if max_iters < 1:
        raise ContractViolation("max_iters must be >= 1")
    C = _plus_plus(X, k, np.random.default_rng(seed)) if init is None else np.array(init, dtype=np.float64)
    labels = np.argmin(_sq_dists(X, C), axis=1)
    labels = _repair_empty(X, labels, C, k)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        C = np.array([X[labels == c].mean(axis=0) for c in range(k)])
        history.append(float(((X - C[labels]) ** 2).sum()))
        new = _repair_empty(X, np.argmin(_sq_dists(X, C), axis=1), C, k)
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, C, history, it)


# --- client splits -------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    """Disjoint per-client index lists covering a parent train split."""

    indices: tuple
    strategy: str

    def __post_init__(self):
        if self.strategy not in ("noniid_kmeans", "iid_random"):
            raise ContractViolation(f"unknown split strategy {self.strategy!r}")

    @property
    def sizes(self) -> list:
        return [len(ix) for ix in self.indices]

    def client_datasets(self, dataset: Dataset) -> list:
        return [dataset.subset(ix) for ix in self.indices]


def partition_noniid(dataset: Dataset, m: int, seed: int, batch_size: int = 32) -> SplitPlan:
    """One client per k-means cluster (k = m) of the flattened features."""
    n = len(dataset)
    if not 1 <= m <= n:
        raise ContractViolation(f"m={m} must lie in [1, {n}]")
    if m == 1:
        return SplitPlan((np.arange(n),), "noniid_kmeans")
    res = kmeans(dataset.features.reshape(n, -1), m, seed=seed)
    shards = tuple(np.flatnonzero(res.assignments == c) for c in range(m))
    for c, ix in enumerate(shards):
        if len(ix) < batch_size:
            warnings.warn(f"client {c} shard has {len(ix)} samples, fewer than one batch of {batch_size}")
    return SplitPlan(shards, "noniid_kmeans")


def partition_iid(dataset: Dataset, m: int, seed: int, sizes=None) -> SplitPlan:
    """Uniform random shards; equal sizes unless ``sizes`` (e.g. a non-IID plan's) is given."""
    n = len(dataset)
    if not 1 <= m <= n:
        raise ContractViolation(f"m={m} must lie in [1, {n}]")
    if sizes is None:
        sizes = [n // m + (1 if c < n % m else 0) for c in range(m)]
    if len(sizes) != m or sum(sizes) != n:
        raise ContractViolation(f"shard sizes {list(sizes)} do not split {n} samples into {m} clients")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + list(sizes))
    return SplitPlan(tuple(np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])), "iid_random")


def class_histograms(dataset: Dataset, plan: SplitPlan) -> np.ndarray:
    """Row-normalized label histogram of every client shard."""
    h = np.array([np.bincount(dataset.labels[ix], minlength=dataset.num_classes) for ix in plan.indices],
                 dtype=np.float64)
    return h / h.sum(axis=1, keepdims=True)


def mean_pairwise_tv(hists) -> float:
    """Mean total-variation distance over client pairs."""
    h = np.asarray(hists)
    m = h.shape[0]
    if m < 2:
        return 0.0
    return float(np.mean([0.5 * np.abs(h[i] - h[j]).sum() for i in range(m) for j in range(i + 1, m)]))


# --- file formats --------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise ParseError("file too short for an idx magic number", len(data))
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise ParseError(f"bad idx magic 0x{int.from_bytes(data[:4], 'big'):08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError("truncated idx dimension header", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    expected = header + int(np.prod(dims)) * dtype.itemsize
    if len(data) != expected:
        raise ParseError(f"idx payload should end at byte {expected}, file has {len(data)} bytes",
                         min(len(data), expected))
    arr = np.frombuffer(data, dtype=dtype, offset=header).reshape(dims)
    return arr


def write_idx(path, array) -> None:
    """Write ``array`` in idx format; uint8 stays bytes, other reals become float64."""
    array = np.asarray(array)
    if array.dtype == np.uint8:
        code, out = 0x08, array
    else:
        code, out = 0x0E, array.astype(">f8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(np.ascontiguousarray(out).tobytes())


def load_idx(path, labels_path=None, split: str = "train", num_classes: int = 0) -> Dataset:
    """Load an idx image file (and optional idx label file).

    Unsigned-byte pixels are scaled by 1/255; without a label file every
    label is 0.
    """
    raw = _read_idx_array(path)
    x = raw.astype(np.float64) / 255.0 if raw.dtype == np.uint8 else raw.astype(np.float64)
    if raw.ndim == 1:
        x = x[:, None]
    if labels_path is not None:
        y = _read_idx_array(labels_path).astype(np.int64).reshape(-1)
        if y.shape[0] != x.shape[0]:
            raise ParseError(f"label file holds {y.shape[0]} labels for {x.shape[0]} samples", 4)
    else:
        y = np.zeros(x.shape[0], dtype=np.int64)
    return Dataset(x, y, split, f"idx:{path}", num_classes)


def write_csv(path, dataset: Dataset, header: bool = False) -> None:
    x = dataset.features.reshape(len(dataset), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(["label"] + [f"f{i}" for i in range(x.shape[1])])
        for lab, row in zip(dataset.labels, x):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def load_csv(path, shape=None, split: str = "train", num_classes: int = 0) -> Dataset:
    """Load ``label,f0,f1,...`` rows; a non-numeric first row is taken as a header."""
    labels, rows = [], []
    width = None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    continue
                raise ParseError("non-numeric field", lineno, unit="line") from None
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise ParseError(f"ragged row with {len(values)} fields, expected {width}", lineno, unit="line")
            if width < 2:
                raise ParseError("row needs a label and at least one feature", lineno, unit="line")
            if values[0] != int(values[0]):
                raise ParseError(f"label {values[0]} is not an integer", lineno, unit="line")
            labels.append(int(values[0]))
            rows.append(values[1:])
    if not rows:
        raise ParseError("no data rows", 1, unit="line")
    x = np.array(rows, dtype=np.float64)
    if shape is not None:
        x = x.reshape((-1,) + tuple(shape))
    return Dataset(x, labels, split, f"csv:{path}", num_classes)
