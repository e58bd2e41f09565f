"""Forward pass, cross-entropy, exact reverse-mode gradients and optimizers.

Everything runs in float64. The SoftSign modulation is re-applied from the
immutable base features on every call, so gradients flow both to the shared
vector and to the client's own weights and biases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ContractViolation, NumericError
from .model_graph import ModelGraph
from .theta import ThetaVector, modulate

__all__ = [
    "Batch",
    "GradientBundle",
    "SGD",
    "AdamW",
    "make_optimizer",
    "ClientState",
    "EpochResult",
    "forward",
    "predict",
    "loss_cross_entropy",
    "backward",
    "optimizer_step",
    "local_epoch",
    "gradient_check",
    "kink_crossings",
    "kink_free_batch",
]


@dataclass
class Batch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.shape[0] < 1 or self.features.shape[0] != self.labels.shape[0]:
            raise ContractViolation("batch needs >= 1 sample and one label per sample")
        if not np.all(np.isfinite(self.features)):
            raise ContractViolation("batch features must be finite")

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class GradientBundle:
    d_theta: np.ndarray
    d_base: list
    loss_value: float


# --- conv helpers ------------------------------------------------------------


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    B, C, H, W = x.shape
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (B, C, ho, wo, kh, kw) -> (B, ho, wo, C*kh*kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, ho, wo, C * kh * kw)


def _col2im(dcols, in_shape, kh, kw, stride, padding):
    B = dcols.shape[0]
    C, H, W = in_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    d = dcols.reshape(B, ho, wo, C, kh, kw)
    dx = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


# --- forward -----------------------------------------------------------------


def _prepare_input(graph: ModelGraph, features):
    x = np.asarray(features, dtype=np.float64)
    shape = tuple(graph.input_shape)
    if x.ndim == len(shape):
        x = x[None]
    if tuple(x.shape[1:]) != shape:
        if int(np.prod(x.shape[1:])) != int(np.prod(shape)):
            raise ContractViolation(
                f"features of shape {x.shape[1:]} do not match input nodes "
                f"{graph.input_nodes[0]}..{graph.input_nodes[-1]} of shape {shape}"
            )
        x = x.reshape((x.shape[0],) + shape)
    return x


def _check_finite(arr, graph, ell):
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        local = int(bad[1]) if arr.ndim > 1 else 0
        raise NumericError("non-finite activation", node=graph.layer_nodes(ell).start + local)


def _forward(graph, eff, x):
    caches = []
    h = x
    B = x.shape[0]
    for ell, (layer, W, b) in enumerate(zip(graph.layers, eff.weights, eff.biases), start=1):
        if layer.kind == "dense":
            inp = h.reshape(B, -1)
            z = inp @ W.T + b
        else:
            kh, kw = layer.slab_shape
            inp = _im2col(h, kh, kw, layer.stride, layer.padding)
            z = (inp @ W.reshape(W.shape[0], -1).T).transpose(0, 3, 1, 2) + b[None, :, None, None]
        _check_finite(z, graph, ell)
        caches.append((inp, z))
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    return h, caches


def forward(graph: ModelGraph, theta: ThetaVector, features) -> np.ndarray:
    """Logits of ``graph`` modulated by ``theta`` on a batch of ``features``."""
    eff = modulate(graph, theta)
    logits, _ = _forward(graph, eff, _prepare_input(graph, features))
    return logits


def predict(graph: ModelGraph, theta: ThetaVector, features, batch_size: int = 256) -> np.ndarray:
    x = _prepare_input(graph, features)
    eff = modulate(graph, theta)
    out = []
    for i in range(0, x.shape[0], batch_size):
        logits, _ = _forward(graph, eff, x[i:i + batch_size])
        out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_cross_entropy(logits, labels) -> float:
    """Mean negative log-likelihood with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.shape[0]), labels].mean())


# --- backward ----------------------------------------------------------------


def backward(graph: ModelGraph, theta: ThetaVector, batch: Batch) -> GradientBundle:
    """Exact gradients of the mean batch loss w.r.t. ``theta`` and base features."""
    eff = modulate(graph, theta)
    x = _prepare_input(graph, batch.features)
    logits, caches = _forward(graph, eff, x)
    labels = batch.labels
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ContractViolation(f"labels must lie in [0, {logits.shape[1]})")
    B = x.shape[0]
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(B), labels].mean())
    probs = np.exp(logp)
    probs[np.arange(B), labels] -= 1.0
    grad_h = probs / B

    d_theta = np.zeros(len(theta))
    d_es = theta.block_slices()
    es0, sh0 = d_es["edge_scale"].start, d_es["edge_shift"].start
    ns0, nsh0 = d_es["node_scale"].start, d_es["node_shift"].start
    se, sv = theta.global_edge_scale, theta.global_node_scale
    d_base = [None] * (2 * graph.depth)

    for idx in range(graph.depth - 1, -1, -1):
        layer = graph.layers[idx]
        inp, z = caches[idx]
        gz = grad_h * (z > 0) if layer.activation == "relu" else grad_h
        W = eff.weights[idx]
        if layer.kind == "dense":
            gW = gz.T @ inp
            gb = gz.sum(axis=0)
            grad_h = gz @ W if idx > 0 else None
        else:
            O = W.shape[0]
            gz_t = gz.transpose(0, 2, 3, 1)
            gW = (gz_t.reshape(-1, O).T @ inp.reshape(-1, inp.shape[-1])).reshape(W.shape)
            gb = gz.sum(axis=(0, 2, 3))
            if idx > 0:
                dcols = gz_t @ W.reshape(O, -1)
                kh, kw = layer.slab_shape
                grad_h = _col2im(dcols, layer.in_shape, kh, kw, layer.stride, layer.padding)
            else:
                grad_h = None
        if grad_h is not None and idx > 0:
            grad_h = grad_h.reshape((B,) + tuple(caches[idx - 1][1].shape[1:]))

        ge, gv = layer.edge_group, layer.node_group
        aw, ab = eff.pre_weights[idx], eff.pre_biases[idx]
        denom_w = 1.0 + np.abs(aw)
        d_aw = gW * (se / denom_w ** 2)
        d_theta[-2] += float(np.sum(gW * (aw / denom_w)))
        d_theta[es0 + ge] += float(np.sum(d_aw * layer.weight))
        d_theta[sh0 + ge] += float(np.sum(d_aw))
        denom_b = 1.0 + np.abs(ab)
        d_ab = gb * (sv / denom_b ** 2)
        d_theta[-1] += float(np.sum(gb * (ab / denom_b)))
        d_theta[ns0 + gv] += float(np.sum(d_ab * layer.bias))
        d_theta[nsh0 + gv] += float(np.sum(d_ab))
        d_base[2 * idx] = d_aw * theta.edge_scale[ge]
        d_base[2 * idx + 1] = d_ab * theta.node_scale[gv]

    if not np.all(np.isfinite(d_theta)):
        raise NumericError("non-finite gradient with respect to theta")
    return GradientBundle(d_theta, d_base, loss)


# --- optimizers --------------------------------------------------------------


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        if not lr >= 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = float(lr)
        self.t = 0

    def step(self, params, grads, decay=None):
        self.t += 1
        return [p - self.lr * g for p, g in zip(params, grads)]


class AdamW:
    """Adam with decoupled weight decay.

    ``decay`` passed to :meth:`step` selects which parameters are decayed.
    """

    kind = "adamw"

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, weight_decay=1e-2, eps=1e-8):
        if not lr >= 0:
            raise ValueError("learning rate must be non-negative")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.lr, self.beta1, self.beta2 = float(lr), float(beta1), float(beta2)
        self.weight_decay, self.eps = float(weight_decay), float(eps)
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads, decay=None):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if decay is None:
            decay = [True] * len(params)
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != self.m[i].shape:
                raise ContractViolation("parameter shape changed between optimizer steps")
            if decay[i] and self.weight_decay:
                p = p * (1.0 - self.lr * self.weight_decay)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def make_optimizer(kind: str = "adamw", **kwargs):
    if kind == "sgd":
        return SGD(kwargs.get("lr", 1e-3))
    if kind == "adamw":
        return AdamW(**kwargs)
    raise ValueError(f"unknown optimizer {kind!r}")


def optimizer_step(state, params, grads, decay=None):
    """Functional alias for ``state.step``."""
    return state.step(params, grads, decay)


# --- local training ------------------------------------------------------------


@dataclass
class ClientState:
    """Everything one simulated client owns; nothing here is sent to the server."""

    client_id: int
    graph: ModelGraph
    features: np.ndarray
    labels: np.ndarray
    theta: ThetaVector
    theta_optimizer: object
    base_optimizer: Optional[object]
    rng: np.random.Generator
    batch_size: int = 32
    test_features: Optional[np.ndarray] = None
    test_labels: Optional[np.ndarray] = None
    architecture: str = ""
    task: int = 0
    last_gradient: Optional[GradientBundle] = None
    trained_theta: Optional[ThetaVector] = None
    losses: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ContractViolation(f"client {self.client_id} has an empty dataset")


@dataclass
class EpochResult:
    theta: ThetaVector
    base: list
    mean_loss: float
    last_gradient: GradientBundle


def local_epoch(client: ClientState, theta_in: ThetaVector) -> EpochResult:
    """One pass over the client's shuffled data in mini-batches.

    Updates ``client.theta``, ``client.graph`` and the client's optimizer
    and RNG state in place and returns the same values.
    """
    n = len(client.labels)
    order = client.rng.permutation(n)
    theta = theta_in.copy()
    graph = client.graph
    base = graph.base_parameters()
    decay_base = [True, False] * graph.depth
    losses, weights = [], []
    grad = None
    for start in range(0, n, client.batch_size):
        idx = order[start:start + client.batch_size]
        batch = Batch(client.features[idx], client.labels[idx])
        try:
            grad = backward(graph, theta, batch)
        except NumericError as exc:
            raise NumericError(str(exc), client=client.client_id) from exc
        (new_theta,) = client.theta_optimizer.step([theta.values], [grad.d_theta])
        theta = ThetaVector(new_theta, theta.G_e, theta.G_v)
        if client.base_optimizer is not None:
            base = client.base_optimizer.step(base, grad.d_base, decay_base)
            graph = graph.with_parameters(base)
        losses.append(grad.loss_value)
        weights.append(len(idx))
    client.theta = theta
    client.trained_theta = theta
    client.graph = graph
    client.last_gradient = grad
    mean_loss = float(np.average(losses, weights=weights))
    client.losses.append(mean_loss)
    return EpochResult(theta, base, mean_loss, grad)


# --- verification --------------------------------------------------------------


def _loss_at(graph, theta, batch):
    return loss_cross_entropy(forward(graph, theta, batch.features), batch.labels)


def gradient_check(graph: ModelGraph, theta: ThetaVector, batch: Batch, eps: float = 1e-5,
                   base_fraction: float = 0.1, seed: int = 0, floor: float = 1e-6,
                   return_details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Covers every theta coordinate and a random ``base_fraction`` of base
    coordinates. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    bundle = backward(graph, theta, batch)
    errors = []
    theta_err = np.zeros(len(theta))
    for k in range(len(theta)):
        plus, minus = theta.copy(), theta.copy()
        plus.values[k] += eps
        minus.values[k] -= eps
        num = (_loss_at(graph, plus, batch) - _loss_at(graph, minus, batch)) / (2 * eps)
        ana = bundle.d_theta[k]
        theta_err[k] = abs(ana - num) / max(abs(ana), abs(num), floor)
    errors.append(theta_err)

    base_err = np.zeros(0)
    if base_fraction > 0:
        rng = np.random.default_rng(seed)
        params = graph.base_parameters()
        sizes = [p.size for p in params]
        total = sum(sizes)
        picks = rng.choice(total, size=max(1, int(round(base_fraction * total))), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        base_err = np.zeros(len(picks))
        for j, flat in enumerate(np.sort(picks)):
            a = int(np.searchsorted(offsets, flat, side="right")) - 1
            local = flat - offsets[a]
            vals = []
            for sign in (1.0, -1.0):
                pert = [p.copy() for p in params]
                pert[a].reshape(-1)[local] += sign * eps
                vals.append(_loss_at(graph.with_parameters(pert), theta, batch))
            num = (vals[0] - vals[1]) / (2 * eps)
            ana = bundle.d_base[a].reshape(-1)[local]
            base_err[j] = abs(ana - num) / max(abs(ana), abs(num), floor)
        errors.append(base_err)
    worst = float(max(e.max() if e.size else 0.0 for e in errors))
    if return_details:
        return worst, theta_err, base_err
    return worst


def _relu_masks(graph, theta, x):
    _, caches = _forward(graph, modulate(graph, theta), x)
    B = x.shape[0]
    masks = [(z > 0).reshape(B, -1) for (layer, (_, z)) in zip(graph.layers, caches) if layer.activation == "relu"]
    return np.concatenate(masks, axis=1) if masks else np.zeros((B, 0), dtype=bool)


def kink_crossings(graph: ModelGraph, theta: ThetaVector, features, eps: float = 1e-5) -> np.ndarray:
    """Per-sample count of relu units whose sign flips under some ``+-eps`` theta step."""
    x = _prepare_input(graph, features)
    base = _relu_masks(graph, theta, x)
    counts = np.zeros(x.shape[0], dtype=np.int64)
    for k in range(len(theta)):
        for sign in (1.0, -1.0):
            pert = theta.copy()
            pert.values[k] += sign * eps
            counts += np.sum(_relu_masks(graph, pert, x) != base, axis=1)
    return counts


def kink_free_batch(graph: ModelGraph, theta: ThetaVector, features, labels, size: int,
                    eps: float = 1e-5, strict: bool = True):
    """Pick ``size`` samples whose relu pattern is unchanged by every ``+-eps`` theta step.

    Candidates are screened in order and samples that straddle a relu kink
    under some perturbation are rejected. With ``strict=False`` a shortfall is
    filled with the candidates crossing the fewest kinks instead of raising.

    Returns
    -------
    batch : Batch
    crossings : ndarray
        Kink crossings of each selected sample (all zero when fully clean).
    """
    x = _prepare_input(graph, features)
    labels = np.asarray(labels)
    counts = kink_crossings(graph, theta, x, eps)
    keep = np.flatnonzero(counts == 0)[:size]
    if keep.shape[0] < size:
        if strict:
            raise ValueError(f"only {keep.shape[0]} of {x.shape[0]} candidates are kink-free; supply more")
        keep = np.argsort(counts, kind="stable")[:size]
    return Batch(x[keep], labels[keep]), counts[keep]
