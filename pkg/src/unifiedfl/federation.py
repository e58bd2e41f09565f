"""In-process federation: two-tier aggregation of the shared vector.

Clients train locally and upload only their ``ThetaVector``. The server
averages uploads inside clusters every ``t_ic`` rounds, averages cluster
centers every ``t_bc`` rounds once the warm-up is over, and (in dynamic mode)
re-partitions clients every ``t_update`` rounds from the uploaded vectors.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .clustering import (
    Partition,
    cut_by_silhouette,
    gradient_moment_descriptor,
    pairwise_distances,
    smooth_distances,
    static_topology_clusters,
    ward_agglomerate,
)
from .data import Dataset
from .engine import ClientState, local_epoch, make_optimizer, predict
from .exceptions import ConfigError, ContractViolation, NumericError
from .metrics import accuracy, precision_recall_f1
from .model_graph import ArchitectureSpec, build_model_graph, topology_descriptor
from .roster import get_architecture
from .theta import ThetaVector, init_theta, save_theta, theta_length

__all__ = [
    "MODES",
    "Schedule",
    "FederationConfig",
    "ClientSpec",
    "ServerState",
    "Payload",
    "RoundEvent",
    "RunHistory",
    "intra_cluster_aggregate",
    "inter_cluster_aggregate",
    "build_clients",
    "init_server",
    "run_round",
    "run_federation",
]

MODES = ("isolated", "vanilla_fedavg", "static_cluster", "dynamic")
SIGNALS = ("theta", "combined", "gradient_moments")


@dataclass(frozen=True)
class Schedule:
    """Aggregation intervals; defaults are the reference hyperparameters."""

    t_ic: int = 5
    t_bc: int = 20
    T_init: int = 30
    t_update: int = 20
    T: int = 100

    def violations(self, strict: bool = True) -> list:
        """Invariant breaches; ``strict=False`` tolerates ``t_bc == t_ic``."""
        out = []
        if self.t_ic < 1:
            out.append(f"t_ic must be >= 1, got {self.t_ic}")
        if self.t_bc < self.t_ic or (strict and self.t_bc == self.t_ic):
            out.append(f"t_bc > t_ic violated (t_bc={self.t_bc}, t_ic={self.t_ic})")
        if self.T_init < 0:
            out.append(f"T_init must be >= 0, got {self.T_init}")
        if self.t_update < 1:
            out.append(f"t_update must be >= 1, got {self.t_update}")
        if self.T < 0:
            out.append(f"T must be >= 0, got {self.T}")
        return out

    def validate(self) -> "Schedule":
        v = self.violations()
        if v:
            raise ConfigError(v)
        return self

    def intra(self, t: int) -> bool:
        return t % self.t_ic == 0

    def inter(self, t: int) -> bool:
        return t > self.T_init and t % self.t_bc == 0

    def recluster(self, t: int) -> bool:
        return t % self.t_update == 0


@dataclass(frozen=True)
class FederationConfig:
    """Run settings other than the client roster.

    ``inter_weighting='client'`` weights cluster centers by member count, so
    the global vector is the per-client mean. ``fedavg_weighting='samples'``
    weights vanilla FedAvg by local sample counts. ``base_lr=None`` reuses
    ``lr`` for the local base features; ``train_base=False`` freezes them.
    ``shared_base_init`` seeds base features per architecture instead of per
    client, so same-backbone clients start from one common initialization.
    ``eval_theta`` picks the vector each client is scored with: ``local`` is
    its last locally trained vector (before the final server merge),
    ``working`` its vector after that merge and ``global`` the server's.
    ``force_single_cluster`` keeps dynamic mode on one cluster and
    ``strict_schedule=False`` admits the degenerate ``t_bc == t_ic`` schedule
    used to collapse dynamic mode onto FedAvg.
    """

    mode: str = "dynamic"
    schedule: Schedule = field(default_factory=Schedule)
    optimizer: str = "adamw"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    base_lr: Optional[float] = None
    train_base: bool = True
    batch_size: int = 32
    G_e: int = 4
    G_v: int = 4
    K_max: int = 6
    static_k: int = 2
    signal: str = "theta"
    ema: float = 0.0
    inter_weighting: str = "cluster"
    fedavg_weighting: str = "uniform"
    force_single_cluster: bool = False
    shared_base_init: bool = False
    eval_theta: str = "local"
    strict_schedule: bool = True
    seed: int = 0

    def violations(self) -> list:
        out = list(self.schedule.violations(self.strict_schedule))
        if self.mode not in MODES:
            out.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.signal not in SIGNALS:
            out.append(f"signal must be one of {SIGNALS}, got {self.signal!r}")
        if self.optimizer not in ("adamw", "sgd"):
            out.append(f"optimizer must be adamw or sgd, got {self.optimizer!r}")
        if not self.lr >= 0:
            out.append(f"lr must be >= 0, got {self.lr}")
        if self.base_lr is not None and not self.base_lr >= 0:
            out.append(f"base_lr must be >= 0, got {self.base_lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            out.append("betas must lie in [0, 1)")
        if self.batch_size < 1:
            out.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.G_e < 1 or self.G_v < 1:
            out.append("G_e and G_v must be >= 1")
        if self.K_max < 2:
            out.append(f"K_max must be >= 2, got {self.K_max}")
        if self.static_k < 1:
            out.append(f"static_k must be >= 1, got {self.static_k}")
        if not 0 <= self.ema < 1:
            out.append(f"ema must lie in [0, 1), got {self.ema}")
        if self.inter_weighting not in ("cluster", "client"):
            out.append(f"inter_weighting must be cluster or client, got {self.inter_weighting!r}")
        if self.eval_theta not in ("local", "working", "global"):
            out.append(f"eval_theta must be local, working or global, got {self.eval_theta!r}")
        if self.fedavg_weighting not in ("uniform", "samples"):
            out.append(f"fedavg_weighting must be uniform or samples, got {self.fedavg_weighting!r}")
        return out


@dataclass(frozen=True)
class ClientSpec:
    """Roster entry: a backbone and the client's local data."""

    architecture: object
    train: Dataset
    test: Optional[Dataset] = None
    task: int = 0


@dataclass(frozen=True)
class Payload:
    """One client-to-server upload as seen by the server."""

    round: int
    client: int
    kind: str
    length: int


@dataclass
class RoundEvent:
    round: int
    intra: bool
    inter: bool
    recluster: bool
    K: int
    silhouette: Optional[float]
    losses: list

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "intra": self.intra,
            "inter": self.inter,
            "recluster": self.recluster,
            "K": self.K,
            "silhouette": self.silhouette,
            "losses": self.losses,
        }


@dataclass
class ServerState:
    global_theta: ThetaVector
    partition: Partition
    centers: list
    schedule: Schedule
    mode: str
    round: int = 0
    events: list = field(default_factory=list)
    partitions: list = field(default_factory=list)
    payloads: list = field(default_factory=list)
    descriptors: Optional[np.ndarray] = None
    smoothed: Optional[np.ndarray] = None

    def receive(self, t: int, client: int, obj, P: int):
        """Record an upload, classifying it by type and length."""
        if isinstance(obj, ThetaVector):
            kind = "theta" if len(obj) == P else "theta_bad_length"
            length = len(obj)
        elif isinstance(obj, np.ndarray):
            kind, length = "array", int(obj.size)
        else:
            kind, length = type(obj).__name__, -1
        self.payloads.append(Payload(t, client, kind, length))
        return obj


@dataclass
class RunHistory:
    config: FederationConfig
    initial_theta: ThetaVector
    final_theta: ThetaVector
    client_thetas: list
    events: list
    partitions: list
    payloads: list
    client_metrics: list
    theta_trajectory: list

    def save(self, out_dir) -> None:
        """Write events.jsonl, partitions.jsonl and theta_final.uft."""
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "events.jsonl"), "w", encoding="utf-8") as fh:
            for e in self.events:
                fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
        with open(os.path.join(out_dir, "partitions.jsonl"), "w", encoding="utf-8") as fh:
            for p in self.partitions:
                fh.write(json.dumps(p, sort_keys=True) + "\n")
        save_theta(self.final_theta, os.path.join(out_dir, "theta_final.uft"))


# --- aggregation ---------------------------------------------------------------


def _stack(thetas):
    return np.stack([t.values for t in thetas])


def intra_cluster_aggregate(thetas, partition: Partition) -> list:
    """Unweighted mean of member vectors, one center per cluster."""
    if len(thetas) != partition.n:
        raise ContractViolation(f"{len(thetas)} vectors for a partition of {partition.n} clients")
    G_e, G_v = thetas[0].G_e, thetas[0].G_v
    centers = []
    for m, members in enumerate(partition.members()):
        if not members:
            raise ContractViolation(f"cluster {m} is empty")
        centers.append(ThetaVector(_stack([thetas[i] for i in members]).mean(axis=0), G_e, G_v))
    return centers


def inter_cluster_aggregate(centers, weights=None) -> ThetaVector:
    """Mean of cluster centers; equal cluster weights unless ``weights`` is given."""
    if len(centers) < 1:
        raise ContractViolation("need at least one cluster center")
    X = _stack(centers)
    vals = X.mean(axis=0) if weights is None else np.average(X, axis=0, weights=weights)
    return ThetaVector(vals, centers[0].G_e, centers[0].G_v)


# --- setup ---------------------------------------------------------------------


def _client_seed(seed: int, client: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(client)])


def _resolve_architecture(arch, dataset: Dataset) -> ArchitectureSpec:
    if isinstance(arch, ArchitectureSpec):
        return arch
    return get_architecture(arch, dataset.input_shape, dataset.num_classes)


def build_clients(specs, config: FederationConfig, theta: ThetaVector) -> list:
    """Instantiate client states with per-(seed, client) deterministic seeds."""
    clients = []
    for cid, spec in enumerate(specs):
        arch = _resolve_architecture(spec.architecture, spec.train)
        graph_seed, shuffle_seed = _client_seed(config.seed, cid).generate_state(2)
        if config.shared_base_init:
            graph_seed = np.random.SeedSequence([int(config.seed), *arch.name.encode()]).generate_state(1)[0]
        graph = build_model_graph(arch, int(graph_seed), config.G_e, config.G_v)
        opt_kwargs = dict(lr=config.lr)
        if config.optimizer == "adamw":
            opt_kwargs.update(beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay)
        base_kwargs = dict(opt_kwargs, lr=config.lr if config.base_lr is None else config.base_lr)
        test = spec.test
        clients.append(ClientState(
            client_id=cid,
            graph=graph,
            features=np.asarray(spec.train.features),
            labels=np.asarray(spec.train.labels),
            theta=theta.copy(),
            theta_optimizer=make_optimizer(config.optimizer, **opt_kwargs),
            base_optimizer=make_optimizer(config.optimizer, **base_kwargs) if config.train_base else None,
            rng=np.random.default_rng(int(shuffle_seed)),
            batch_size=config.batch_size,
            test_features=None if test is None else np.asarray(test.features),
            test_labels=None if test is None else np.asarray(test.labels),
            architecture=arch.name,
            task=spec.task,
        ))
    return clients


def init_server(config: FederationConfig, clients, theta: ThetaVector) -> ServerState:
    """Round-0 server state, including the topology-descriptor upload.

    Static and dynamic modes start from the fixed-K topology clustering;
    vanilla FedAvg uses one cluster and isolated mode one cluster per client.
    """
    n = len(clients)
    P = theta_length(config.G_e, config.G_v)
    server = ServerState(theta.copy(), Partition.single(n), [], config.schedule, config.mode)
    if config.mode in ("static_cluster", "dynamic"):
        desc = np.stack([server.receive(0, c.client_id, topology_descriptor(c.graph).as_array(), P)
                         for c in clients])
        server.descriptors = desc
        if not (config.mode == "dynamic" and config.force_single_cluster):
            server.partition = static_topology_clusters(list(desc), min(config.static_k, n))
    elif config.mode == "isolated":
        server.partition = Partition.from_labels(np.arange(n))
    server.centers = [theta.copy() for _ in range(server.partition.M)]
    server.partitions.append(dict(round=0, **server.partition.to_dict()))
    return server


# --- rounds --------------------------------------------------------------------


def _recluster_vectors(config, server, uploads, clients):
    if config.signal == "theta":
        return [u.values for u in uploads]
    if config.signal == "gradient_moments":
        return [gradient_moment_descriptor(c.last_gradient, config.G_e, config.G_v) for c in clients]
    desc = server.descriptors
    sd = desc.std(axis=0)
    z = np.zeros_like(desc)
    keep = sd > 0
    z[:, keep] = (desc[:, keep] - desc[:, keep].mean(axis=0)) / sd[keep]
    return [np.concatenate([z[i], u.values]) for i, u in enumerate(uploads)]


def run_round(server: ServerState, clients, config: FederationConfig) -> RoundEvent:
    """Advance one round: local epochs, then intra, inter and recluster gates."""
    t = server.round + 1
    P = theta_length(config.G_e, config.G_v)
    sched = server.schedule
    losses = []
    for c in clients:
        try:
            res = local_epoch(c, c.theta)
        except NumericError as exc:
            if exc.client is None:
                raise NumericError(str(exc), client=c.client_id) from exc
            raise
        losses.append(res.mean_loss)

    mode = config.mode
    intra = inter = recluster = False
    if mode == "vanilla_fedavg":
        uploads = [server.receive(t, c.client_id, c.theta.copy(), P) for c in clients]
        w = None if config.fedavg_weighting == "uniform" else [len(c.labels) for c in clients]
        X = _stack(uploads)
        g = ThetaVector(X.mean(axis=0) if w is None else np.average(X, axis=0, weights=w), config.G_e, config.G_v)
        server.global_theta = g
        server.centers = [g]
        for c in clients:
            c.theta = g.copy()
        intra = inter = True
    elif mode in ("static_cluster", "dynamic"):
        intra = sched.intra(t)
        inter = sched.inter(t)
        recluster = mode == "dynamic" and sched.recluster(t)
        uploads = None
        if intra or inter or recluster:
            uploads = [server.receive(t, c.client_id, c.theta.copy(), P) for c in clients]
        if intra or inter:
            centers = intra_cluster_aggregate(uploads, server.partition)
            server.centers = centers
            if intra:
                for c in clients:
                    c.theta = centers[server.partition.assignment[c.client_id]].copy()
            if inter:
                weights = None
                if config.inter_weighting == "client":
                    weights = [len(m) for m in server.partition.members()]
                g = inter_cluster_aggregate(centers, weights)
                server.global_theta = g
                for c in clients:
                    c.theta = g.copy()
        if recluster:
            if config.force_single_cluster:
                server.partition = Partition.single(len(clients))
            else:
                D = pairwise_distances(_recluster_vectors(config, server, uploads, clients))
                if config.ema:
                    server.smoothed = smooth_distances(server.smoothed, D, config.ema)
                    D = server.smoothed
                server.partition = cut_by_silhouette(ward_agglomerate(D), D, config.K_max)
            server.partitions.append(dict(round=t, **server.partition.to_dict()))
    server.round = t
    sil = server.partition.silhouette
    event = RoundEvent(t, intra, inter, recluster, server.partition.M,
                       None if np.isnan(sil) else float(sil), losses)
    server.events.append(event)
    return event


def _evaluate(client: ClientState, theta: ThetaVector) -> dict:
    train_pred = predict(client.graph, theta, client.features)
    out = {"model": client.architecture, "client": client.client_id, "task": client.task,
           "train_accuracy": accuracy(train_pred, client.labels)}
    if client.test_labels is not None:
        pred = predict(client.graph, theta, client.test_features)
        C = client.graph.num_classes
        p, r, f = precision_recall_f1(pred, client.test_labels, "macro")
        mp, mr, mf = precision_recall_f1(pred, client.test_labels, "micro", num_classes=C)
        out.update(precision=p, recall=r, f1=f, micro_precision=mp, micro_recall=mr, micro_f1=mf,
                   test_accuracy=accuracy(pred, client.test_labels))
    return out


def _eval_theta(config, client, server):
    if config.eval_theta == "global":
        return server.global_theta
    if config.eval_theta == "local" and client.trained_theta is not None:
        return client.trained_theta
    return client.theta


def run_federation(config: FederationConfig, specs, theta0: ThetaVector = None,
                   record_trajectory: bool = False) -> RunHistory:
    """Run ``config.schedule.T`` rounds over the client roster ``specs``.

    Configuration problems are raised before any round executes. The
    returned ``final_theta`` is the server's global vector (``theta0`` when
    no global merge ever happened).
    """
    problems = config.violations()
    if not specs:
        problems.append("client roster is empty")
    if problems:
        raise ConfigError(problems)
    theta0 = init_theta(config.G_e, config.G_v) if theta0 is None else theta0.copy()
    if (theta0.G_e, theta0.G_v) != (config.G_e, config.G_v):
        raise ConfigError([f"initial theta grouped ({theta0.G_e}, {theta0.G_v}) but config asks for "
                           f"({config.G_e}, {config.G_v})"])
    clients = build_clients(specs, config, theta0)
    server = init_server(config, clients, theta0)
    trajectory = []
    for _ in range(config.schedule.T):
        run_round(server, clients, config)
        if record_trajectory:
            trajectory.append(np.stack([c.theta.values.copy() for c in clients]))
    return RunHistory(
        config=config,
        initial_theta=theta0,
        final_theta=server.global_theta.copy(),
        client_thetas=[c.theta.copy() for c in clients],
        events=server.events,
        partitions=server.partitions,
        payloads=server.payloads,
        client_metrics=[_evaluate(c, _eval_theta(config, c, server)) for c in clients],
        theta_trajectory=trajectory,
    )


def with_mode(config: FederationConfig, mode: str, **changes) -> FederationConfig:
    return replace(config, mode=mode, **changes)
