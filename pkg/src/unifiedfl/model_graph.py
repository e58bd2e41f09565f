"""Model-graph representation of feed-forward networks.

A network is rewritten as a layered DAG. Dense layers contribute one node
per neuron and one edge per weight; conv layers contribute one node per
output channel and one edge per (input channel, output channel) pair that
carries the ``kernel_h x kernel_w`` filter slab. A dense layer fed by a
flattened conv stack connects each channel node to each neuron with a slab
edge of ``H * W`` weights.

Weights are stored layer-blocked (``(out, in)`` for dense, ``(out, in, kh,
kw)`` for conv) so that edges of one layer are contiguous, target-major
views into a single array. :meth:`ModelGraph.edges` and
:meth:`ModelGraph.nodes` expose the per-element view.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence, Union

import numpy as np

from .exceptions import ParseError, SpecValidationError

__all__ = [
    "Dense",
    "Conv2d",
    "Activation",
    "Flatten",
    "ArchitectureSpec",
    "GraphLayer",
    "NodeFeature",
    "EdgeFeature",
    "ModelGraph",
    "TopologyDescriptor",
    "build_model_graph",
    "assign_groups",
    "betweenness_centrality",
    "brandes_betweenness",
    "topology_descriptor",
    "serialize_graph",
    "deserialize_graph",
]

ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"


@dataclass(frozen=True)
class Flatten:
    pass


LayerDescriptor = Union[Dense, Conv2d, Activation, Flatten]

_DESCRIPTOR_TYPES = {"dense": Dense, "conv2d": Conv2d, "activation": Activation, "flatten": Flatten}


def _descriptor_to_dict(layer):
    kind = {Dense: "dense", Conv2d: "conv2d", Activation: "activation", Flatten: "flatten"}[type(layer)]
    out = {"type": kind}
    out.update(layer.__dict__)
    return out


@dataclass(frozen=True)
class _ResolvedLayer:
    kind: str
    activation: str
    in_shape: tuple
    out_shape: tuple
    n_sources: int
    n_targets: int
    slab_shape: tuple
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ArchitectureSpec:
    """Ordered layer list plus the input shape it consumes.

    ``input_shape`` is ``(features,)`` for vector input or ``(C, H, W)`` for
    images. ``num_classes`` is optional; when given the final dense layer is
    checked against it.
    """

    name: str
    input_shape: tuple
    layers: tuple
    num_classes: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))

    def resolve(self) -> list[_ResolvedLayer]:
        """Walk the layer list, check shapes and return trainable layers.

        Raises :class:`SpecValidationError` naming the first offending layer.
        """
        if len(self.input_shape) not in (1, 3) or any(d < 1 for d in self.input_shape):
            raise SpecValidationError(f"input_shape must be (D,) or (C, H, W) with positive dims, got {self.input_shape}")
        shape = self.input_shape
        resolved: list[dict] = []
        prev_was_activation = False
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
                prev_was_activation = False
                continue
            if isinstance(layer, Activation):
                if layer.kind not in ACTIVATIONS:
                    raise SpecValidationError(f"unknown activation {layer.kind!r}", idx)
                if not resolved or prev_was_activation or resolved[-1]["activation_set"]:
                    raise SpecValidationError("activation must directly follow a trainable layer", idx)
                resolved[-1]["activation"] = layer.kind
                resolved[-1]["activation_set"] = True
                prev_was_activation = True
                continue
            prev_was_activation = False
            if isinstance(layer, Dense):
                if layer.in_dim < 1 or layer.out_dim < 1:
                    raise SpecValidationError("dense dimensions must be positive", idx)
                if len(shape) != 1:
                    raise SpecValidationError(f"dense layer needs flattened input, got shape {shape}", idx)
                if shape[0] != layer.in_dim:
                    raise SpecValidationError(f"dense in_dim={layer.in_dim} but incoming size is {shape[0]}", idx)
                if resolved:
                    n_sources = resolved[-1]["n_targets"]
                else:
                    n_sources = layer.in_dim
                if layer.in_dim % n_sources:
                    raise SpecValidationError("flattened size not divisible by source node count", idx)
                slab = layer.in_dim // n_sources
                resolved.append(dict(
                    kind="dense", activation="identity", activation_set=False,
                    in_shape=shape, out_shape=(layer.out_dim,), n_sources=n_sources,
                    n_targets=layer.out_dim, slab_shape=() if slab == 1 else (slab,),
                ))
                shape = (layer.out_dim,)
            elif isinstance(layer, Conv2d):
                if min(layer.in_channels, layer.out_channels, layer.kernel_h, layer.kernel_w, layer.stride) < 1 or layer.padding < 0:
                    raise SpecValidationError("conv2d sizes must be positive (padding >= 0)", idx)
                if len(shape) != 3:
                    raise SpecValidationError(f"conv2d layer needs (C, H, W) input, got shape {shape}", idx)
                c, h, w = shape
                if c != layer.in_channels:
                    raise SpecValidationError(f"conv2d in_channels={layer.in_channels} but incoming channels are {c}", idx)
                ho = (h + 2 * layer.padding - layer.kernel_h) // layer.stride + 1
                wo = (w + 2 * layer.padding - layer.kernel_w) // layer.stride + 1
                if ho < 1 or wo < 1:
                    raise SpecValidationError(f"conv2d output would be empty for input {shape}", idx)
                resolved.append(dict(
                    kind="conv2d", activation="identity", activation_set=False,
                    in_shape=shape, out_shape=(layer.out_channels, ho, wo), n_sources=layer.in_channels,
                    n_targets=layer.out_channels, slab_shape=(layer.kernel_h, layer.kernel_w),
                    stride=layer.stride, padding=layer.padding,
                ))
                shape = (layer.out_channels, ho, wo)
            else:
                raise SpecValidationError(f"unknown layer descriptor {layer!r}", idx)
        if not resolved:
            raise SpecValidationError("architecture has no trainable layer")
        last = resolved[-1]
        if last["kind"] != "dense":
            raise SpecValidationError("final trainable layer must be dense", len(self.layers) - 1)
        if len(shape) != 1 or shape[0] != last["n_targets"]:
            raise SpecValidationError("no layers may follow the final dense layer except an activation", len(self.layers) - 1)
        if last["activation"] != "identity":
            raise SpecValidationError("output layer activation must be identity", len(self.layers) - 1)
        if self.num_classes is not None and last["n_targets"] != self.num_classes:
            raise SpecValidationError(
                f"final dense out_dim={last['n_targets']} does not match num_classes={self.num_classes}",
                len(self.layers) - 1,
            )
        out = []
        for r in resolved:
            r.pop("activation_set")
            out.append(_ResolvedLayer(**r))
        return out

    @property
    def output_dim(self) -> int:
        return self.resolve()[-1].n_targets

    def parameter_count(self) -> int:
        """Closed-form count of scalar weights and biases."""
        total = 0
        for layer in self.layers:
            if isinstance(layer, Dense):
                total += layer.in_dim * layer.out_dim + layer.out_dim
            elif isinstance(layer, Conv2d):
                total += layer.in_channels * layer.out_channels * layer.kernel_h * layer.kernel_w + layer.out_channels
        return total

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [_descriptor_to_dict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        layers = []
        for idx, item in enumerate(data["layers"]):
            item = dict(item)
            kind = item.pop("type", None)
            if kind not in _DESCRIPTOR_TYPES:
                raise SpecValidationError(f"unknown layer type {kind!r}", idx)
            try:
                layers.append(_DESCRIPTOR_TYPES[kind](**item))
            except TypeError as exc:
                raise SpecValidationError(str(exc), idx) from None
        return cls(data["name"], tuple(data["input_shape"]), tuple(layers), data.get("num_classes"))


@dataclass(eq=False)
class GraphLayer:
    """All edges entering, and nodes of, one graph layer.

    ``weight`` is ``(n_targets, n_sources * prod(slab_shape))`` for dense
    layers and ``(n_targets, n_sources, kh, kw)`` for conv layers; ``bias``
    holds one value per target node.
    """

    kind: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str
    in_shape: tuple
    out_shape: tuple
    n_sources: int
    slab_shape: tuple
    stride: int = 1
    padding: int = 0
    edge_group: int = 0
    node_group: int = 0

    @property
    def n_targets(self) -> int:
        return int(self.bias.shape[0])

    @property
    def n_edges(self) -> int:
        return self.n_targets * self.n_sources

    @property
    def n_params(self) -> int:
        return int(self.weight.size + self.bias.size)

    def edge_weight(self, target: int, source: int) -> np.ndarray:
        if self.kind == "conv2d":
            return self.weight[target, source]
        if not self.slab_shape:
            return self.weight[target, source]
        slab = self.slab_shape[0]
        return self.weight[target, source * slab:(source + 1) * slab]


@dataclass(frozen=True)
class NodeFeature:
    node: int
    layer: int
    bias: float
    group_id: int


@dataclass(frozen=True)
class EdgeFeature:
    source: int
    target: int
    weight: np.ndarray
    kind: str
    group_id: int
    stride: int = 1
    padding: int = 0


@dataclass(eq=False)
class ModelGraph:
    """Layered DAG of node (bias) and edge (weight) features.

    Node ids run over input nodes first, then each layer's target nodes in
    order. Edge ids run layer by layer, target-major.
    """

    name: str
    input_shape: tuple
    layers: list
    num_input_nodes: int
    edge_groups: int = 1
    node_groups: int = 1
    _offsets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        counts = [self.num_input_nodes] + [layer.n_targets for layer in self.layers]
        self._offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    # --- structure -------------------------------------------------------
    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def num_nodes(self) -> int:
        return int(self._offsets[-1])

    @property
    def num_edges(self) -> int:
        return sum(layer.n_edges for layer in self.layers)

    @property
    def num_classes(self) -> int:
        return self.layers[-1].n_targets

    def layer_nodes(self, ell: int) -> range:
        """Node ids of layer ``ell`` (0 is the input layer)."""
        return range(int(self._offsets[ell]), int(self._offsets[ell + 1]))

    @property
    def input_nodes(self) -> list:
        return list(self.layer_nodes(0))

    @property
    def output_nodes(self) -> list:
        return list(self.layer_nodes(self.depth))

    @property
    def layer_of(self) -> np.ndarray:
        counts = np.diff(self._offsets)
        return np.repeat(np.arange(self.depth + 1), counts)

    def parameter_count(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def edge_index(self) -> tuple[np.ndarray, np.ndarray]:
        """Source and target id arrays in edge-id order."""
        srcs, dsts = [], []
        for ell, layer in enumerate(self.layers, start=1):
            s0, t0 = self._offsets[ell - 1], self._offsets[ell]
            t = np.repeat(np.arange(layer.n_targets), layer.n_sources)
            s = np.tile(np.arange(layer.n_sources), layer.n_targets)
            srcs.append(s + s0)
            dsts.append(t + t0)
        if not srcs:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        return np.concatenate(srcs), np.concatenate(dsts)

    def incoming_edges(self, node: int) -> range:
        """Edge ids entering ``node`` (contiguous by construction)."""
        ell = int(np.searchsorted(self._offsets, node, side="right")) - 1
        if ell == 0:
            return range(0)
        layer = self.layers[ell - 1]
        local = node - int(self._offsets[ell])
        base = sum(lay.n_edges for lay in self.layers[: ell - 1])
        start = base + local * layer.n_sources
        return range(start, start + layer.n_sources)

    @property
    def adjacency(self) -> list:
        return [self.incoming_edges(v) for v in range(self.num_nodes)]

    def nodes(self) -> Iterator[NodeFeature]:
        for v in self.layer_nodes(0):
            yield NodeFeature(v, 0, 0.0, 0)
        for ell, layer in enumerate(self.layers, start=1):
            for local, v in enumerate(self.layer_nodes(ell)):
                yield NodeFeature(v, ell, float(layer.bias[local]), layer.node_group)

    def edges(self) -> Iterator[EdgeFeature]:
        for ell, layer in enumerate(self.layers, start=1):
            s0, t0 = int(self._offsets[ell - 1]), int(self._offsets[ell])
            kind = "conv2d" if layer.kind == "conv2d" else "dense"
            for t in range(layer.n_targets):
                for s in range(layer.n_sources):
                    yield EdgeFeature(s0 + s, t0 + t, layer.edge_weight(t, s), kind,
                                      layer.edge_group, layer.stride, layer.padding)

    # --- parameters ------------------------------------------------------
    def base_parameters(self) -> list:
        """Flat list ``[w_1, b_1, w_2, b_2, ...]`` of base arrays (not copies)."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "ModelGraph":
        """Copy of the graph whose base features are replaced by ``params``."""
        if len(params) != 2 * self.depth:
            raise ValueError(f"expected {2 * self.depth} arrays, got {len(params)}")
        layers = []
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ValueError(f"parameter shape mismatch in layer {i + 1}")
            layers.append(replace(layer, weight=np.asarray(w, dtype=np.float64), bias=np.asarray(b, dtype=np.float64)))
        return ModelGraph(self.name, self.input_shape, layers, self.num_input_nodes,
                          self.edge_groups, self.node_groups)

    def copy(self) -> "ModelGraph":
        return self.with_parameters([p.copy() for p in self.base_parameters()])

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        if (self.name, self.input_shape, self.num_input_nodes, self.edge_groups, self.node_groups, self.depth) != (
            other.name, other.input_shape, other.num_input_nodes, other.edge_groups, other.node_groups, other.depth
        ):
            return False
        for a, b in zip(self.layers, other.layers):
            meta_a = (a.kind, a.activation, a.in_shape, a.out_shape, a.n_sources, a.slab_shape,
                      a.stride, a.padding, a.edge_group, a.node_group)
            meta_b = (b.kind, b.activation, b.in_shape, b.out_shape, b.n_sources, b.slab_shape,
                      b.stride, b.padding, b.edge_group, b.node_group)
            if meta_a != meta_b:
                return False
            for x, y in ((a.weight, b.weight), (a.bias, b.bias)):
                if x.shape != y.shape or not np.array_equal(x.view(np.uint64), y.view(np.uint64)):
                    return False
        return True

    __hash__ = None


def _glorot_uniform(rng, shape, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _layers_from_resolved(resolved, weights, biases):
    return [
        GraphLayer(r.kind, w, b, r.activation, r.in_shape, r.out_shape, r.n_sources,
                   r.slab_shape, r.stride, r.padding)
        for r, w, b in zip(resolved, weights, biases)
    ]


def build_model_graph(spec: ArchitectureSpec, seed: int, edge_groups: int = 4, node_groups: int = 4) -> ModelGraph:
    """Convert ``spec`` into a model-graph with Glorot-uniform weights and zero biases.

    Groups are assigned with :func:`assign_groups` using ``edge_groups`` and
    ``node_groups``.
    """
    resolved = spec.resolve()
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for r in resolved:
        if r.kind == "dense":
            fan_in = r.in_shape[0]
            shape = (r.n_targets, fan_in)
            w = _glorot_uniform(rng, shape, fan_in, r.n_targets)
        else:
            kh, kw = r.slab_shape
            shape = (r.n_targets, r.n_sources, kh, kw)
            w = _glorot_uniform(rng, shape, r.n_sources * kh * kw, r.n_targets * kh * kw)
        weights.append(w)
        biases.append(np.zeros(r.n_targets))
    first = resolved[0]
    num_inputs = first.n_sources
    graph = ModelGraph(spec.name, spec.input_shape, _layers_from_resolved(resolved, weights, biases), num_inputs)
    return assign_groups(graph, edge_groups, node_groups)


def assign_groups(graph: ModelGraph, G_e: int, G_v: int) -> ModelGraph:
    """Group edges and nodes by normalized depth of the target layer.

    ``group = floor(G * (layer - 1) / depth)``; every element of a layer
    shares its group. Returns a new graph sharing the weight arrays.
    """
    if G_e < 1 or G_v < 1:
        raise ValueError("group counts must be >= 1")
    depth = graph.depth
    layers = [
        replace(layer, edge_group=(G_e * (ell - 1)) // depth, node_group=(G_v * (ell - 1)) // depth)
        for ell, layer in enumerate(graph.layers, start=1)
    ]
    return ModelGraph(graph.name, graph.input_shape, layers, graph.num_input_nodes, G_e, G_v)


# --- betweenness -------------------------------------------------------------


def brandes_betweenness(num_nodes: int, sources: Sequence[int], targets: Sequence[int]) -> np.ndarray:
    """Unnormalized directed shortest-path betweenness (Brandes 2001).

    Works on any unweighted directed graph given as an edge list.
    """
    succ = [[] for _ in range(num_nodes)]
    for s, t in zip(sources, targets):
        succ[int(s)].append(int(t))
    cb = np.zeros(num_nodes)
    for s in range(num_nodes):
        stack = []
        preds = [[] for _ in range(num_nodes)]
        sigma = np.zeros(num_nodes)
        dist = np.full(num_nodes, -1, dtype=np.int64)
        sigma[s] = 1.0
        dist[s] = 0
        queue = [s]
        head = 0
        while head < len(queue):
            v = queue[head]
            head += 1
            stack.append(v)
            for w in succ[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(num_nodes)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                cb[w] += delta[w]
    return cb


def _layered_betweenness(graph: ModelGraph) -> np.ndarray:
    # Every path between two layers has the same length, so each path is a
    # shortest path and sigma_st(v) = paths(s, v) * paths(v, t).
    L = graph.depth
    adj = [np.ones((layer.n_sources, layer.n_targets)) for layer in graph.layers]
    paths = {}
    for a in range(L + 1):
        n_a = len(graph.layer_nodes(a))
        cur = np.eye(n_a)
        paths[(a, a)] = cur
        for b in range(a + 1, L + 1):
            cur = cur @ adj[b - 1]
            paths[(a, b)] = cur
    cb = np.zeros(graph.num_nodes)
    for ell in range(1, L):
        acc = np.zeros(len(graph.layer_nodes(ell)))
        for a in range(ell):
            for b in range(ell + 1, L + 1):
                p_ab = paths[(a, b)]
                inv = np.divide(1.0, p_ab, out=np.zeros_like(p_ab), where=p_ab > 0)
                m = inv @ paths[(ell, b)].T
                acc += np.einsum("sv,sv->v", paths[(a, ell)], m)
        nodes = graph.layer_nodes(ell)
        cb[nodes.start:nodes.stop] = acc
    return cb


def betweenness_centrality(graph: ModelGraph) -> np.ndarray:
    """Per-node unnormalized directed betweenness of a model-graph.

    Uses layer-wise path counting, which is exact for layered DAGs and
    avoids a per-source traversal over large graphs.
    """
    return _layered_betweenness(graph)


# --- topology descriptor -----------------------------------------------------


@dataclass(frozen=True)
class TopologyDescriptor:
    node_count: float
    edge_count: float
    depth: float
    mean_in_degree: float
    max_in_degree: float
    mean_betweenness: float
    log10_params: float
    conv_edge_fraction: float

    def as_array(self) -> np.ndarray:
        return np.array([
            self.node_count, self.edge_count, self.depth, self.mean_in_degree,
            self.max_in_degree, self.mean_betweenness, self.log10_params, self.conv_edge_fraction,
        ], dtype=np.float64)


def topology_descriptor(graph: ModelGraph) -> TopologyDescriptor:
    n_nodes = graph.num_nodes
    n_edges = graph.num_edges
    conv_edges = sum(layer.n_edges for layer in graph.layers if layer.kind == "conv2d")
    return TopologyDescriptor(
        node_count=float(n_nodes),
        edge_count=float(n_edges),
        depth=float(graph.depth),
        mean_in_degree=n_edges / n_nodes,
        max_in_degree=float(max(layer.n_sources for layer in graph.layers)),
        mean_betweenness=float(betweenness_centrality(graph).mean()),
        log10_params=math.log10(graph.parameter_count()),
        conv_edge_fraction=conv_edges / n_edges,
    )


# --- binary format -----------------------------------------------------------

MAGIC = b"UFG1"
_KIND_TAG = {"dense": 0, "conv2d": 1}
_ACT_TAG = {"identity": 0, "relu": 1}
_NODE_INPUT, _NODE_NEURON, _NODE_CHANNEL = 0, 1, 2


def _node_dtype():
    return np.dtype([("group", "<u4"), ("kind", "u1"), ("ndim", "<u4"), ("bias", "<f8")])


def _edge_dtype(slab_shape):
    fields = [("src", "<u4"), ("dst", "<u4"), ("group", "<u4"), ("kind", "u1"), ("ndim", "<u4")]
    if slab_shape:
        fields.append(("dims", "<u4", (len(slab_shape),)))
    n = int(np.prod(slab_shape)) if slab_shape else 1
    fields.append(("w", "<f8", (n,)) if n > 1 or slab_shape else ("w", "<f8"))
    return np.dtype(fields)


def serialize_graph(graph: ModelGraph) -> bytes:
    """Encode ``graph`` in the little-endian ``UFG1`` record format."""
    parts = [MAGIC]
    name = graph.name.encode("utf-8")
    parts.append(struct.pack("<I", len(name)) + name)
    parts.append(struct.pack("<I", len(graph.input_shape)) + struct.pack(f"<{len(graph.input_shape)}I", *graph.input_shape))
    parts.append(struct.pack("<III", graph.edge_groups, graph.node_groups, graph.depth))
    for layer in graph.layers:
        slab = tuple(layer.slab_shape) + (0,) * (2 - len(layer.slab_shape))
        parts.append(struct.pack(
            "<BBIIBIIII", _KIND_TAG[layer.kind], _ACT_TAG[layer.activation], layer.n_targets,
            layer.n_sources, len(layer.slab_shape), slab[0], slab[1], layer.stride, layer.padding,
        ))
    parts.append(struct.pack("<II", graph.num_nodes, graph.num_edges))

    nd = _node_dtype()
    inputs = np.zeros(graph.num_input_nodes, dtype=nd)
    inputs["kind"] = _NODE_INPUT
    parts.append(inputs.tobytes())
    for layer in graph.layers:
        rec = np.zeros(layer.n_targets, dtype=nd)
        rec["group"] = layer.node_group
        rec["kind"] = _NODE_CHANNEL if layer.kind == "conv2d" else _NODE_NEURON
        rec["bias"] = layer.bias
        parts.append(rec.tobytes())

    src_all, dst_all = graph.edge_index()
    start = 0
    for layer in graph.layers:
        ed = _edge_dtype(layer.slab_shape)
        rec = np.zeros(layer.n_edges, dtype=ed)
        rec["src"] = src_all[start:start + layer.n_edges]
        rec["dst"] = dst_all[start:start + layer.n_edges]
        rec["group"] = layer.edge_group
        rec["kind"] = _KIND_TAG[layer.kind]
        rec["ndim"] = len(layer.slab_shape)
        if layer.slab_shape:
            rec["dims"] = layer.slab_shape
        rec["w"] = layer.weight.reshape(rec["w"].shape)
        parts.append(rec.tobytes())
        start += layer.n_edges
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str):
        if self.pos + n > len(self.data):
            raise ParseError(f"truncated stream while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _walk_shapes(input_shape, table):
    shape = tuple(input_shape)
    out = []
    for kind, act, n_t, n_s, slab, stride, padding in table:
        if kind == "conv2d":
            if len(shape) != 3:
                raise ValueError("conv layer after flattened input")
            kh, kw = slab
            ho = (shape[1] + 2 * padding - kh) // stride + 1
            wo = (shape[2] + 2 * padding - kw) // stride + 1
            if ho < 1 or wo < 1 or shape[0] != n_s:
                raise ValueError("conv layer shape mismatch")
            in_shape, shape = shape, (n_t, ho, wo)
        else:
            flat = int(np.prod(shape))
            if flat != n_s * (int(np.prod(slab)) if slab else 1):
                raise ValueError("dense layer shape mismatch")
            in_shape, shape = (flat,), (n_t,)
        out.append((in_shape, shape))
    return out


def deserialize_graph(data: bytes) -> ModelGraph:
    """Inverse of :func:`serialize_graph`; raises :class:`ParseError` with the byte offset."""
    if not data:
        raise ParseError("empty stream", 0)
    r = _Reader(bytes(data))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise ParseError("bad magic, expected b'UFG1'", 0)
    (name_len,) = r.unpack("<I", "name length")
    try:
        name = bytes(r.take(name_len, "name")).decode("utf-8")
    except UnicodeDecodeError:
        raise ParseError("graph name is not utf-8", r.pos - name_len) from None
    (ndim,) = r.unpack("<I", "input rank")
    if ndim not in (1, 3):
        raise ParseError(f"input rank must be 1 or 3, got {ndim}", r.pos - 4)
    input_shape = r.unpack(f"<{ndim}I", "input shape")
    G_e, G_v, depth = r.unpack("<III", "group counts")
    if depth < 1:
        raise ParseError("graph has no layers", r.pos - 4)
    table = []
    kinds = {v: k for k, v in _KIND_TAG.items()}
    acts = {v: k for k, v in _ACT_TAG.items()}
    for _ in range(depth):
        at = r.pos
        kind, act, n_t, n_s, nslab, s0, s1, stride, padding = r.unpack("<BBIIBIIII", "layer table")
        if kind not in kinds or act not in acts or nslab > 2 or n_t < 1 or n_s < 1 or stride < 1:
            raise ParseError("invalid layer record", at)
        slab = (s0, s1)[:nslab]
        if kinds[kind] == "conv2d" and nslab != 2:
            raise ParseError("conv layer needs a 2-d slab", at)
        table.append((kinds[kind], acts[act], n_t, n_s, slab, stride, padding))
    try:
        shapes = _walk_shapes(input_shape, table)
    except ValueError as exc:
        raise ParseError(f"inconsistent layer table: {exc}", r.pos) from None
    n_nodes, n_edges = r.unpack("<II", "counts")
    n_inputs = table[0][3]
    if n_nodes != n_inputs + sum(t[2] for t in table) or n_edges != sum(t[2] * t[3] for t in table):
        raise ParseError("node/edge counts disagree with layer table", r.pos - 8)

    nd = _node_dtype()
    at = r.pos
    inputs = np.frombuffer(r.take(nd.itemsize * n_inputs, "input node records"), dtype=nd)
    if np.any(inputs["kind"] != _NODE_INPUT):
        raise ParseError("expected input node record", at + nd.itemsize * int(np.argmax(inputs["kind"] != _NODE_INPUT)))
    biases, node_groups = [], []
    for kind, _, n_t, *_rest in table:
        at = r.pos
        rec = np.frombuffer(r.take(nd.itemsize * n_t, "node records"), dtype=nd)
        expect = _NODE_CHANNEL if kind == "conv2d" else _NODE_NEURON
        bad = (rec["kind"] != expect) | (rec["ndim"] != 0) | (rec["group"] != rec["group"][0])
        if np.any(bad):
            raise ParseError("malformed node record", at + nd.itemsize * int(np.argmax(bad)))
        biases.append(rec["bias"].astype(np.float64))
        node_groups.append(int(rec["group"][0]))

    weights, edge_groups = [], []
    offset = n_inputs
    src_base = 0
    for (kind, _, n_t, n_s, slab, _, _), (in_shape, _) in zip(table, shapes):
        ed = _edge_dtype(slab)
        at = r.pos
        rec = np.frombuffer(r.take(ed.itemsize * n_t * n_s, "edge records"), dtype=ed)
        exp_src = np.tile(np.arange(n_s), n_t) + src_base
        exp_dst = np.repeat(np.arange(n_t), n_s) + offset
        bad = (rec["src"] != exp_src) | (rec["dst"] != exp_dst) | (rec["kind"] != _KIND_TAG[kind])
        bad |= (rec["ndim"] != len(slab)) | (rec["group"] != rec["group"][0])
        if slab:
            bad |= np.any(rec["dims"] != np.asarray(slab), axis=1)
        if np.any(bad):
            raise ParseError("malformed edge record", at + ed.itemsize * int(np.argmax(bad)))
        w = np.array(rec["w"], dtype=np.float64)
        if kind == "conv2d":
            w = w.reshape(n_t, n_s, *slab)
        else:
            w = w.reshape(n_t, in_shape[0])
        weights.append(w)
        edge_groups.append(int(rec["group"][0]))
        src_base = offset
        offset += n_t
    if r.pos != len(r.data):
        raise ParseError("trailing bytes after graph", r.pos)

    layers = []
    for (kind, act, n_t, n_s, slab, stride, padding), (in_shape, out_shape), w, b, ge, gv in zip(
        table, shapes, weights, biases, edge_groups, node_groups
    ):
        layers.append(GraphLayer(kind, w, b, act, in_shape, out_shape, n_s, tuple(slab), stride, padding, ge, gv))
    return ModelGraph(name, tuple(input_shape), layers, n_inputs, G_e, G_v)
