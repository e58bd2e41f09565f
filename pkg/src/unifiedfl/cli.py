"""Command-line experiment runner.

    unifiedfl run --config cfg.json [--mode unifiedfl] [--seed 7] [--out DIR]
    unifiedfl validate --config cfg.json
    unifiedfl inspect runs/<dir>/fold_0/events.jsonl

Configs are flat JSON objects; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from collections import Counter

import numpy as np

from .data import (
    Dataset,
    load_csv,
    load_idx,
    partition_iid,
    partition_noniid,
    synth_gaussian_mixture,
    train_test_split,
)
from .exceptions import ConfigError, UnifiedFLError
from .federation import ClientSpec, FederationConfig, Schedule, run_federation
from .metrics import write_report
from .roster import MANDATORY, ROSTER

MODE_ALIASES = {
    "isolated": "isolated",
    "fedavg": "vanilla_fedavg",
    "vanilla_fedavg": "vanilla_fedavg",
    "static": "static_cluster",
    "static_cluster": "static_cluster",
    "unifiedfl": "dynamic",
    "dynamic": "dynamic",
}

DEFAULT_DATA = {
    "source": "synthetic",
    "num_classes": 2,
    "shape": [1, 8, 8],
    "class_separation": 6.0,
    "samples_per_class": 100,
    "label_maps": None,
}

DEFAULTS = {
    "mode": "unifiedfl",
    "clients": list(MANDATORY),
    "data": DEFAULT_DATA,
    "split": "noniid",
    "test_fraction": 0.25,
    "t_ic": 5,
    "t_bc": 20,
    "t_init": 30,
    "t_update": 20,
    "rounds": 100,
    "optimizer": "adamw",
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "weight_decay": 1e-2,
    "base_lr": None,
    "train_base": True,
    "batch_size": 32,
    "signal": "theta",
    "G_e": 4,
    "G_v": 4,
    "K_max": 6,
    "static_k": 2,
    "ema": 0.0,
    "inter_weighting": "cluster",
    "fedavg_weighting": "uniform",
    "shared_base_init": False,
    "eval_theta": "local",
    "folds": 3,
    "seed": 0,
    "out": None,
}

DATA_KEYS = {
    "synthetic": {"source", "num_classes", "shape", "dim", "class_separation", "samples_per_class", "label_maps"},
    "idx": {"source", "train_images", "train_labels", "test_images", "test_labels", "num_classes", "label_maps"},
    "csv": {"source", "train", "test", "shape", "num_classes", "label_maps"},
}

FLAG_KEYS = {
    "mode": "mode", "seed": "seed", "out": "out", "t_ic": "t_ic", "t_bc": "t_bc",
    "t_init": "t_init", "t_update": "t_update", "rounds": "rounds", "folds": "folds",
}


# --- config --------------------------------------------------------------------


def _client_entries(clients):
    out = []
    for c in clients:
        if isinstance(c, str):
            out.append({"architecture": c, "task": 0})
        elif isinstance(c, dict):
            out.append({"architecture": c.get("architecture"), "task": c.get("task", 0)})
        else:
            out.append({"architecture": c, "task": 0})
    return out


def _validate(cfg) -> list:
    v = []
    mode = cfg["mode"]
    if mode not in MODE_ALIASES:
        v.append(f"mode must be one of {sorted(MODE_ALIASES)}, got {mode!r}")
    clients = cfg["clients"]
    if not isinstance(clients, list) or not clients:
        v.append("clients must be a non-empty list")
        clients = []
    for i, c in enumerate(_client_entries(clients)):
        if c["architecture"] not in ROSTER:
            v.append(f"clients[{i}]: unknown architecture {c['architecture']!r} (known: {', '.join(ROSTER)})")
        if not isinstance(c["task"], int) or c["task"] < 0:
            v.append(f"clients[{i}]: task must be a non-negative integer")
    for key in ("t_ic", "t_bc", "t_init", "t_update", "rounds", "folds", "seed", "batch_size",
                "G_e", "G_v", "K_max", "static_k"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            v.append(f"{key} must be an integer, got {cfg[key]!r}")
    if any("must be an integer" in msg for msg in v):
        return v
    sched = Schedule(cfg["t_ic"], cfg["t_bc"], cfg["t_init"], cfg["t_update"], cfg["rounds"])
    v += sched.violations()
    if cfg["folds"] < 1:
        v.append(f"folds must be >= 1, got {cfg['folds']}")
    if cfg["split"] not in ("noniid", "iid", "independent"):
        v.append(f"split must be noniid, iid or independent, got {cfg['split']!r}")
    if not 0 < cfg["test_fraction"] < 1:
        v.append(f"test_fraction must lie in (0, 1), got {cfg['test_fraction']}")
    try:
        fed = federation_config(cfg)
        v += [p for p in fed.violations() if p not in sched.violations()]
    except (TypeError, ValueError) as exc:
        v.append(str(exc))
    v += _validate_data(cfg)
    return v


def _validate_data(cfg) -> list:
    v = []
    data = cfg["data"]
    if not isinstance(data, dict):
        return ["data must be an object"]
    src = data.get("source")
    if src not in DATA_KEYS:
        return [f"data.source must be one of {sorted(DATA_KEYS)}, got {src!r}"]
    for key in sorted(set(data) - DATA_KEYS[src]):
        v.append(f"data: unknown key {key!r} for source {src!r}")
    if src == "synthetic":
        if data.get("num_classes", 0) < 2:
            v.append("data.num_classes must be >= 2")
        if data.get("shape") is None and data.get("dim") is None:
            v.append("data needs a shape or a dim")
        if data.get("class_separation", 0) < 0:
            v.append("data.class_separation must be >= 0")
    elif cfg["split"] == "independent":
        v.append("split 'independent' needs synthetic data")
    required = {"idx": ("train_images",), "csv": ("train",)}.get(src, ())
    for key in required:
        if key not in data:
            v.append(f"data.{key} is required for source {src!r}")
    for key in ("train_images", "train_labels", "test_images", "test_labels", "train", "test"):
        path = data.get(key)
        if path is not None and not os.path.isfile(path):
            v.append(f"data.{key}: no such file {path!r}")
    maps = data.get("label_maps")
    if maps is not None:
        tasks = {c["task"] for c in _client_entries(cfg["clients"])}
        if max(tasks) >= len(maps):
            v.append(f"a client uses task {max(tasks)} but only {len(maps)} label_maps are given")
    return v


def parse_config(path=None, overrides=None) -> dict:
    """Merge defaults, the JSON file at ``path`` and ``overrides`` (flags win).

    Raises ``ConfigError`` listing every problem found.
    """
    cfg = copy.deepcopy(DEFAULTS)
    problems = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read config {path!r}: {exc.strerror}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config {path!r} is not valid JSON: {exc.msg} (line {exc.lineno})"]) from None
        if not isinstance(loaded, dict):
            raise ConfigError(["config must be a JSON object"])
        for key in sorted(set(loaded) - set(DEFAULTS)):
            problems.append(f"unknown key {key!r}")
        for key, value in loaded.items():
            if key == "data" and isinstance(value, dict):
                merged = dict(DEFAULT_DATA) if value.get("source", "synthetic") == "synthetic" else {}
                merged.update(value)
                cfg["data"] = merged
            elif key in DEFAULTS:
                cfg[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    if not problems:
        problems = _validate(cfg)
    if problems:
        raise ConfigError(problems)
    cfg["mode"] = MODE_ALIASES[cfg["mode"]]
    return cfg


def federation_config(cfg, seed=None) -> FederationConfig:
    return FederationConfig(
        mode=MODE_ALIASES.get(cfg["mode"], cfg["mode"]),
        schedule=Schedule(cfg["t_ic"], cfg["t_bc"], cfg["t_init"], cfg["t_update"], cfg["rounds"]),
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        weight_decay=cfg["weight_decay"],
        base_lr=cfg["base_lr"],
        train_base=cfg["train_base"],
        batch_size=cfg["batch_size"],
        G_e=cfg["G_e"],
        G_v=cfg["G_v"],
        K_max=cfg["K_max"],
        static_k=cfg["static_k"],
        signal=cfg["signal"],
        ema=cfg["ema"],
        inter_weighting=cfg["inter_weighting"],
        fedavg_weighting=cfg["fedavg_weighting"],
        shared_base_init=cfg["shared_base_init"],
        eval_theta=cfg["eval_theta"],
        seed=cfg["seed"] if seed is None else seed,
    )


# --- data ----------------------------------------------------------------------


def _relabel(ds: Dataset, label_map) -> Dataset:
    if label_map is None:
        return ds
    lm = np.asarray(label_map, dtype=np.int64)
    return Dataset(ds.features, lm[ds.labels], ds.split, ds.provenance, max(ds.num_classes, int(lm.max()) + 1))


def _synthetic(data, n_samples_scale, seed, centers_seed, split="train"):
    shape = data.get("shape")
    dim = int(np.prod(shape)) if shape is not None else int(data["dim"])
    return synth_gaussian_mixture(data["num_classes"], dim, data["class_separation"],
                                  int(data["samples_per_class"] * n_samples_scale), seed=seed,
                                  centers_seed=centers_seed, shape=shape, split=split)


def build_client_specs(cfg, seed: int) -> list:
    """Client datasets for one fold; label maps are applied per client task."""
    data = cfg["data"]
    entries = _client_entries(cfg["clients"])
    m = len(entries)
    maps = data.get("label_maps")
    src = data["source"]
    pairs = []
    if src == "synthetic" and cfg["split"] == "independent":
        for i in range(m):
            ds = _synthetic(data, 1.0, seed * 1000 + i, seed)
            pairs.append(train_test_split(ds, cfg["test_fraction"], seed + i))
    else:
        if src == "synthetic":
            pool = _synthetic(data, m, seed, seed)
            test = None
        elif src == "idx":
            pool = load_idx(data["train_images"], data.get("train_labels"), num_classes=data.get("num_classes", 0))
            test = None
            if data.get("test_images"):
                test = load_idx(data["test_images"], data.get("test_labels"), "test", pool.num_classes)
        else:
            shape = data.get("shape")
            pool = load_csv(data["train"], shape, num_classes=data.get("num_classes", 0))
            test = load_csv(data["test"], shape, "test", pool.num_classes) if data.get("test") else None
        if test is None:
            pool, test = train_test_split(pool, cfg["test_fraction"], seed)
        if cfg["split"] == "noniid":
            plan = partition_noniid(pool, m, seed, cfg["batch_size"])
        else:
            plan = partition_iid(pool, m, seed)
        test_plan = partition_iid(test, m, seed + 1) if len(test) >= m else None
        for i, ix in enumerate(plan.indices):
            te = test.subset(test_plan.indices[i], "test") if test_plan else test
            pairs.append((pool.subset(ix), te))
    specs = []
    for i, (entry, (tr, te)) in enumerate(zip(entries, pairs)):
        lm = maps[entry["task"]] if maps is not None else None
        specs.append(ClientSpec(entry["architecture"], _relabel(tr, lm), _relabel(te, lm), entry["task"]))
    return specs


# --- run -----------------------------------------------------------------------


def _model_names(metrics):
    counts = Counter(m["model"] for m in metrics)
    seen = Counter()
    names = []
    for m in metrics:
        seen[m["model"]] += 1
        names.append(m["model"] if counts[m["model"]] == 1 else f"{m['model']}#{seen[m['model']]}")
    return names


def output_dir(cfg) -> str:
    root = cfg["out"] or os.environ.get("UNIFIEDFL_OUT") or "runs"
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = os.path.join(root, f"{stamp}_{cfg['mode']}_seed{cfg['seed']}")
    path, k = base, 1
    while os.path.exists(path):
        k += 1
        path = f"{base}_{k}"
    return path


def run(cfg, log=print) -> str:
    """Execute every fold sequentially with seed ``seed + fold``; returns the run directory."""
    out = output_dir(cfg)
    os.makedirs(out)
    with open(os.path.join(out, "config.resolved.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    reports = []
    for fold in range(cfg["folds"]):
        seed = cfg["seed"] + fold
        specs = build_client_specs(cfg, seed)
        hist = run_federation(federation_config(cfg, seed), specs)
        hist.save(os.path.join(out, f"fold_{fold}"))
        names = _model_names(hist.client_metrics)
        reports.append({"mode": cfg["mode"], "fold": fold,
                        "models": list(zip(names, hist.client_metrics))})
        f1 = np.mean([m["f1"] for m in hist.client_metrics])
        log(f"fold {fold}: seed {seed}, mean macro-F1 {f1:.3f}")
    write_report(reports, out)
    return out


def inspect_events(path, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(f"{'round':>5}  {'intra':>5} {'inter':>5} {'reclu':>5}  {'K':>2}  {'silh':>6}  {'mean loss':>9}\n")
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            e = json.loads(line)
            sil = "-" if e["silhouette"] is None else f"{e['silhouette']:.3f}"
            loss = np.mean(e["losses"]) if e["losses"] else float("nan")
            flags = ["x" if e[k] else "." for k in ("intra", "inter", "recluster")]
            stream.write(f"{e['round']:>5}  {flags[0]:>5} {flags[1]:>5} {flags[2]:>5}  {e['K']:>2}  {sil:>6}  {loss:>9.4f}\n")


def _error_report(exc, code):
    report = {"error": type(exc).__name__, "message": str(exc).splitlines()[0]}
    if isinstance(exc, ConfigError):
        report["violations"] = exc.violations
    sys.stderr.write(json.dumps(report, indent=2) + "\n")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unifiedfl", description="Federated training over heterogeneous model-graphs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
        s.add_argument("--mode", choices=["isolated", "fedavg", "static", "unifiedfl"])
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--folds", type=int)
        s.add_argument("--t-ic", dest="t_ic", type=int)
        s.add_argument("--t-bc", dest="t_bc", type=int)
        s.add_argument("--t-init", dest="t_init", type=int)
        s.add_argument("--t-update", dest="t_update", type=int)
        s.add_argument("--rounds", type=int)
    s = sub.add_parser("inspect")
    s.add_argument("events", help="path to an events.jsonl file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "inspect":
        try:
            inspect_events(args.events)
        except (OSError, ValueError, KeyError) as exc:
            return _error_report(exc, 1)
        return 0
    overrides = {key: getattr(args, attr) for attr, key in FLAG_KEYS.items()}
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        return _error_report(exc, 2)
    if args.command == "validate":
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    try:
        out = run(cfg)
    except (UnifiedFLError, OSError) as exc:
        return _error_report(exc, 1)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
