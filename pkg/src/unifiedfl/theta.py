"""Shared parameter vector and SoftSign scale/shift modulation.

Flat coordinate order of a ``ThetaVector`` of group counts ``(G_e, G_v)``::

    edge_scale[0:G_e] | edge_shift[0:G_e] | node_scale[0:G_v] | node_shift[0:G_v]
    | global_edge_scale | global_node_scale

so ``P = 2 * G_e + 2 * G_v + 2``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation, ParseError

__all__ = [
    "ThetaVector",
    "EffectiveParameters",
    "theta_length",
    "softsign",
    "modulate",
    "theta_distance",
    "init_theta",
    "flatten",
    "unflatten",
    "save_theta",
    "load_theta",
    "dumps_theta",
    "loads_theta",
]


def theta_length(G_e: int, G_v: int) -> int:
    return 2 * G_e + 2 * G_v + 2


class ThetaVector:
    """Fixed-length shared parameters; the only payload clients upload.

    Block accessors return views into :attr:`values`.
    """

    __slots__ = ("values", "G_e", "G_v")

    def __init__(self, values, G_e: int, G_v: int):
        values = np.array(values, dtype=np.float64).reshape(-1)
        if values.shape[0] != theta_length(G_e, G_v):
            raise ContractViolation(
                f"theta vector has length {values.shape[0]}, expected {theta_length(G_e, G_v)} for G_e={G_e}, G_v={G_v}"
            )
        if not np.all(np.isfinite(values)):
            raise ContractViolation("theta vector has non-finite entries")
        self.values = values
        self.G_e = int(G_e)
        self.G_v = int(G_v)

    def __len__(self):
        return self.values.shape[0]

    @property
    def edge_scale(self):
        return self.values[: self.G_e]

    @property
    def edge_shift(self):
        return self.values[self.G_e: 2 * self.G_e]

    @property
    def node_scale(self):
        o = 2 * self.G_e
        return self.values[o: o + self.G_v]

    @property
    def node_shift(self):
        o = 2 * self.G_e + self.G_v
        return self.values[o: o + self.G_v]

    @property
    def global_edge_scale(self) -> float:
        return float(self.values[-2])

    @property
    def global_node_scale(self) -> float:
        return float(self.values[-1])

    def block_slices(self) -> dict:
        """Coordinate ranges of the four per-group blocks."""
        e, v = self.G_e, self.G_v
        return {
            "edge_scale": slice(0, e),
            "edge_shift": slice(e, 2 * e),
            "node_scale": slice(2 * e, 2 * e + v),
            "node_shift": slice(2 * e + v, 2 * e + 2 * v),
        }

    def copy(self) -> "ThetaVector":
        return ThetaVector(self.values.copy(), self.G_e, self.G_v)

    def __eq__(self, other):
        if not isinstance(other, ThetaVector):
            return NotImplemented
        return (self.G_e, self.G_v) == (other.G_e, other.G_v) and np.array_equal(self.values, other.values)

    __hash__ = None

    def __repr__(self):
        return f"ThetaVector(G_e={self.G_e}, G_v={self.G_v}, values={np.array2string(self.values, precision=4)})"


def init_theta(G_e: int = 4, G_v: int = 4) -> ThetaVector:
    """Unit scales and zero shifts."""
    t = ThetaVector(np.zeros(theta_length(G_e, G_v)), G_e, G_v)
    t.edge_scale[:] = 1.0
    t.node_scale[:] = 1.0
    t.values[-2:] = 1.0
    return t


def flatten(theta: ThetaVector) -> np.ndarray:
    return theta.values.copy()


def unflatten(vector, G_e: int, G_v: int) -> ThetaVector:
    return ThetaVector(vector, G_e, G_v)


def softsign(x, s):
    """Scaled softsign ``s * x / (1 + |x|)``, bounded by ``|s|``."""
    x = np.asarray(x, dtype=np.float64)
    return s * x / (1.0 + np.abs(x))


@dataclass(eq=False)
class EffectiveParameters:
    """Modulated weights and biases, one pair per graph layer.

    ``pre_weights`` / ``pre_biases`` keep the SoftSign arguments
    ``base * scale + shift`` needed for the backward pass.
    """

    weights: list
    biases: list
    pre_weights: list
    pre_biases: list

    def __eq__(self, other):
        if not isinstance(other, EffectiveParameters):
            return NotImplemented
        pairs = zip(self.weights + self.biases, other.weights + other.biases)
        return all(np.array_equal(a.view(np.uint64), b.view(np.uint64)) for a, b in pairs)

    __hash__ = None


def _check_groups(graph, theta):
    if (graph.edge_groups, graph.node_groups) != (theta.G_e, theta.G_v):
        raise ContractViolation(
            f"graph grouped with (G_e={graph.edge_groups}, G_v={graph.node_groups}) "
            f"but theta has (G_e={theta.G_e}, G_v={theta.G_v})"
        )


def modulate(graph, theta: ThetaVector) -> EffectiveParameters:
    """Effective parameters of ``graph`` under ``theta``; the graph is not mutated."""
    _check_groups(graph, theta)
    ws, bs, aws, abs_ = [], [], [], []
    se, sv = theta.global_edge_scale, theta.global_node_scale
    for layer in graph.layers:
        ge, gv = layer.edge_group, layer.node_group
        aw = layer.weight * theta.edge_scale[ge] + theta.edge_shift[ge]
        ab = layer.bias * theta.node_scale[gv] + theta.node_shift[gv]
        ws.append(softsign(aw, se))
        bs.append(softsign(ab, sv))
        aws.append(aw)
        abs_.append(ab)
    return EffectiveParameters(ws, bs, aws, abs_)


def theta_distance(a: ThetaVector, b: ThetaVector) -> float:
    if len(a) != len(b):
        raise ContractViolation(f"theta lengths differ: {len(a)} vs {len(b)}")
    return float(np.linalg.norm(a.values - b.values))


# --- checkpoint format -------------------------------------------------------

THETA_MAGIC = b"UFT1"


def dumps_theta(theta: ThetaVector) -> bytes:
    return THETA_MAGIC + struct.pack("<II", theta.G_e, theta.G_v) + theta.values.astype("<f8").tobytes()


def loads_theta(data: bytes) -> ThetaVector:
    if len(data) < 4 or data[:4] != THETA_MAGIC:
        raise ParseError("bad magic, expected b'UFT1'", 0)
    if len(data) < 12:
        raise ParseError("truncated header", len(data))
    G_e, G_v = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * theta_length(G_e, G_v)
    if len(data) != expected:
        raise ParseError(f"expected {expected} bytes for G_e={G_e}, G_v={G_v}, got {len(data)}", min(len(data), expected))
    return ThetaVector(np.frombuffer(data[12:], dtype="<f8").astype(np.float64), G_e, G_v)


def save_theta(theta: ThetaVector, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_theta(theta))


def load_theta(path) -> ThetaVector:
    with open(path, "rb") as fh:
        return loads_theta(fh.read())
