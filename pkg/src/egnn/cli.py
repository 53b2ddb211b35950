"""Command line entry point: ``egnn <verb> [options]``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime or
numerical failure (including a failed equivariance audit).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ContractError, Tensor
from .estimators import from_checkpoint, to_checkpoint
from .experiments import (
    ConfigError,
    ExperimentConfig,
    dumps_report,
    evaluate,
    generate_splits,
    run_experiment,
    write_splits,
)
from .graph import GeometricGraph, fully_connected_edges
from .harness import (
    NonRealizableError,
    check_equivariance,
    pairwise_sq_distances,
    procrustes_align,
    random_transform,
    reconstruct_from_distances,
)
from .model import GraphModel, ModelConfig
from .nbody import DatasetFormatError
from .training import substream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config(path, task: str | None = None, seed: int | None = None) -> ExperimentConfig:
    if path is None:
        d = {}
    else:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    if task is not None:
        if d.get("task", task) != task:
            raise ConfigError(f"task: this command needs task {task!r}, config says {d['task']!r}")
        d["task"] = task
    if seed is not None:
        d["seed"] = seed
    return ExperimentConfig.from_dict(d)


def _prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} already exists and is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- verbs -------------------------------------------------------------------


def cmd_generate(args, task: str) -> int:
    cfg = _load_config(args.config, task, args.seed)
    out = _prepare_out(args.out, args.force)
    t0 = time.perf_counter()
    splits = generate_splits(cfg)
    files = write_splits(task, splits, out)
    cfg_dict = cfg.to_dict()
    _write_json(out / "config.json", cfg_dict)
    _write_json(
        out / "generation.json",
        {
            "config_digest": cfg.digest(),
            "files": [f.name for f in files],
            "counts": {s: len(d[1]) if isinstance(d, tuple) else len(d) for s, d in splits.items()},
            "data_params": cfg.data_params,
            "seed": cfg.seed,
            "version": __version__,
            "timing": {"seconds": time.perf_counter() - t0},
        },
    )
    print(f"wrote {len(files)} split files to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, None, args.seed)
    out = _prepare_out(args.out, args.force)
    _write_json(out / "config.json", cfg.to_dict())
    report, model = run_experiment(cfg)
    (out / "metrics.json").write_text(dumps_report(report) + "\n")
    _write_json(out / "checkpoint.json", to_checkpoint(model))
    print(json.dumps(report["test"], sort_keys=True))
    return 0


def _read_checkpoint(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"checkpoint {path}: invalid JSON: {exc}") from exc


def cmd_eval(args) -> int:
    if args.model is None:
        raise ConfigError("eval needs --model CHECKPOINT")
    cfg = _load_config(args.config, None, args.seed)
    try:
        model = from_checkpoint(_read_checkpoint(args.model))
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc
    metrics = {"config_digest": cfg.digest(), "test": evaluate(cfg, model)}
    if args.out:
        out = _prepare_out(args.out, args.force)
        _write_json(out / "config.json", cfg.to_dict())
        (out / "metrics.json").write_text(dumps_report(metrics) + "\n")
    print(json.dumps(metrics["test"], sort_keys=True))
    return 0


def _audit_graph(cfg: ModelConfig, rng: np.random.Generator, n_nodes: int) -> GeometricGraph:
    edges = fully_connected_edges(n_nodes)
    attr = Tensor(rng.standard_normal((len(edges), cfg.edge_attr_dim))) if cfg.edge_attr_dim else None
    v = Tensor(rng.standard_normal((n_nodes, cfg.coord_dim))) if cfg.kind == "egnn_velocity" or cfg.rf_velocity else None
    return GeometricGraph(
        Tensor(rng.standard_normal((n_nodes, cfg.in_node_dim))),
        Tensor(rng.standard_normal((n_nodes, cfg.coord_dim))),
        edges,
        attr,
        v,
    )


def audit_models(args) -> list[tuple[GraphModel, int]]:
    """(model, dim) pairs to audit: a checkpoint file, or a fresh model per dimension."""
    if Path(args.model).exists():
        ckpt = _read_checkpoint(args.model)
        try:
            model = GraphModel.from_checkpoint(ckpt.get("model", ckpt))
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        return [(model, model.config.coord_dim)]
    try:
        dims = [int(d) for d in args.dims.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--dims: expected comma separated integers, got {args.dims!r}") from exc
    models = []
    for i, n in enumerate(dims):
        try:
            cfg = ModelConfig(kind=args.model, num_layers=args.layers, hidden_dim=16, coord_dim=n, edge_attr_dim=1)
        except ContractError as exc:
            raise ConfigError(f"--model: {exc}") from exc
        models.append((GraphModel.build(cfg, substream(args.seed or 0, f"audit-init-{i}")), n))
    return models


def cmd_audit(args) -> int:
    if args.model is None:
        raise ConfigError("audit-equivariance needs --model (checkpoint path or model kind)")
    if args.trials < 1:
        raise ConfigError(f"--trials: must be >= 1, got {args.trials}")
    rng = substream(args.seed or 0, "transforms")
    results = []
    for model, dim in audit_models(args):
        worst = {"dx": 0.0, "dv": 0.0, "dh": 0.0}
        for trial in range(args.trials):
            g = _audit_graph(model.config, rng, n_nodes=5)
            T = random_transform(dim, rng, reflect=bool(trial % 2))
            rep = check_equivariance(model.forward, g, T, tol=args.tol)
            for k in worst:
                worst[k] = max(worst[k], getattr(rep, k))
        results.append({
            "kind": model.config.kind,
            "dim": dim,
            "layers": model.config.num_layers,
            "trials": args.trials,
            **worst,
            "passed": max(worst.values()) <= args.tol,
        })
    report = {"tol": args.tol, "passed": all(r["passed"] for r in results), "results": results}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = _prepare_out(args.out, args.force)
        (out / "audit.json").write_text(text + "\n")
    print(text)
    return 0 if report["passed"] else 2


def cmd_reconstruct(args) -> int:
    """Reconstruct points from a squared-distance matrix (``--input``) or run round trips."""
    if args.input:
        try:
            payload = json.loads(Path(args.input).read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--input: {exc}") from exc
        D = np.asarray(payload["D"] if isinstance(payload, dict) else payload, dtype=np.float64)
        points = reconstruct_from_distances(D)
        residual = float(np.max(np.abs(pairwise_sq_distances(points) - D), initial=0.0))
        print(json.dumps({"points": points.tolist(), "max_residual": residual}))
        return 0
    rng = substream(args.seed or 0, "reconstruct")
    worst = 0.0
    for _ in range(args.trials):
        m, n = int(rng.integers(3, 11)), int(rng.choice([2, 3, 5]))
        pts = rng.standard_normal((m, n))
        rec = reconstruct_from_distances(pairwise_sq_distances(pts), dim=n)
        aligned, _ = procrustes_align(rec, pts)
        worst = max(worst, float(np.max(np.abs(aligned - pts))))
    report = {"trials": args.trials, "max_error": worst, "tol": args.tol, "passed": worst <= args.tol}
    print(json.dumps(report, sort_keys=True))
    return 0 if report["passed"] else 2


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="egnn", description="E(n)-equivariant graph networks: data, training and audits.")
    p.add_argument("--version", action="version", version=f"egnn {__version__}")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")

    common(sub.add_parser("gen-nbody", help="simulate N-body train/val/test splits"))
    common(sub.add_parser("gen-graphs", help="sample graph train/val/test splits"))
    common(sub.add_parser("train", help="train a model and write metrics + checkpoint"))
    ev = sub.add_parser("eval", help="evaluate a checkpoint on a config's data")
    common(ev, out_required=False)
    ev.add_argument("--model", help="checkpoint written by train")
    au = sub.add_parser("audit-equivariance", help="check E(n) equivariance of a model")
    common(au, out_required=False)
    au.add_argument("--model", help="checkpoint path or model kind")
    au.add_argument("--trials", type=int, default=100)
    au.add_argument("--dims", default="2,3,5,8", help="dimensions for fresh models")
    au.add_argument("--layers", type=int, default=4, help="depth for fresh models")
    au.add_argument("--tol", type=float, default=1e-8)
    rd = sub.add_parser("reconstruct-distances", help="recover points from squared distances")
    rd.add_argument("--input", help="JSON file with a squared-distance matrix")
    rd.add_argument("--trials", type=int, default=50)
    rd.add_argument("--tol", type=float, default=1e-7)
    rd.add_argument("--seed", type=int)
    return p


COMMANDS = {
    "gen-nbody": lambda a: cmd_generate(a, "nbody"),
    "gen-graphs": lambda a: cmd_generate(a, "autoencoder"),
    "train": cmd_train,
    "eval": cmd_eval,
    "audit-equivariance": cmd_audit,
    "reconstruct-distances": cmd_reconstruct,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    try:
        return COMMANDS[args.verb](args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"egnn {args.verb}: configuration error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, NonRealizableError, FloatingPointError, ValueError) as exc:
        print(f"egnn {args.verb}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
