"""Experiment configs, dataset preparation and the three experiment runners.

Each runner returns ``(report, estimator)`` where ``report`` is a JSON-ready
dict ``{config_digest, per_epoch, test, timing, meta}``.  Everything except
``timing`` is a deterministic function of the config.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimators as est
from .graphs import community_small, erdos_renyi, read_graphs, write_graphs
from .harness import pairwise_sq_distances, random_transform
from .nbody import SimParams, read_dataset, simulate_many, write_dataset
from .training import edge_metrics, substream

TASKS = ("nbody", "autoencoder", "invariant")
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 1)."""


_DEFAULT_SIZES = {"nbody": (500, 200, 200), "autoencoder": (500, 100, 100), "invariant": (500, 100, 200)}
_DEFAULT_MODEL = {"nbody": "egnn_velocity", "autoencoder": "egnn", "invariant": "egnn"}
_ALLOWED_MODELS = {
    "nbody": est.NBODY_KINDS,
    "autoencoder": est.AUTOENCODER_KINDS,
    "invariant": est.INVARIANT_KINDS,
}


@dataclass
class ExperimentConfig:
    """One training run.

    ``dataset`` is a directory holding ``train/val/test`` files written by
    :func:`write_splits`; when ``None`` the data are generated from
    ``seed`` and ``data_params``.
    """

    task: str = "nbody"
    model: str | None = None
    num_layers: int = 4
    hidden_dim: int = 64
    dataset: str | None = None
    data_params: dict = field(default_factory=dict)
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    epochs: int = 100
    batch_size: int = 100
    lr: float = 1e-3
    lr_schedule: str = "constant"
    weight_decay: float = 0.0
    seed: int = 0
    early_stopping: bool = False
    clip_norm: float | None = None
    noise_sigma: float = 1.0
    embed_dim: int = 8

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task: unknown value {self.task!r}; expected one of {TASKS}")
        if self.model is None:
            self.model = _DEFAULT_MODEL[self.task]
        if self.model not in _ALLOWED_MODELS[self.task]:
            raise ConfigError(
                f"model: {self.model!r} is not available for task {self.task!r}; "
                f"expected one of {_ALLOWED_MODELS[self.task]}"
            )
        for name, n in zip(("n_train", "n_val", "n_test"), _DEFAULT_SIZES[self.task]):
            if getattr(self, name) is None:
                setattr(self, name, n)
        for name in ("epochs", "batch_size", "n_train", "num_layers", "hidden_dim", "embed_dim"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be an integer >= 1, got {getattr(self, name)!r}")
        for name in ("n_val", "n_test"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be an integer >= 0, got {getattr(self, name)!r}")
        if not self.lr > 0:
            raise ConfigError(f"lr: must be positive, got {self.lr!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay: must be non-negative, got {self.weight_decay!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError(f"clip_norm: must be positive or null, got {self.clip_norm!r}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma: must be non-negative, got {self.noise_sigma!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule: expected 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.early_stopping and self.n_val == 0:
            raise ConfigError("early_stopping: needs n_val > 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# -- datasets ------------------------------------------------------------------


def invariant_target(points: np.ndarray) -> float:
    """Smooth E(n)-invariant function of the pairwise distances."""
    d2 = pairwise_sq_distances(points)
    iu = np.triu_indices(len(points), k=1)
    return float(np.sum(np.exp(-0.5 * d2[iu])))


def make_invariant_data(count: int, rng: np.random.Generator, n_points: int = 6, dim: int = 3, constant=None):
    clouds = [rng.standard_normal((n_points, dim)) for _ in range(count)]
    y = np.array([invariant_target(c) if constant is None else float(constant) for c in clouds])
    return clouds, y


def transform_clouds(clouds, rng: np.random.Generator, reflect: bool = False):
    """Apply an independent random E(n) transform to each point cloud."""
    return [random_transform(c.shape[1], rng, reflect=reflect).apply_points(c) for c in clouds]


def generate_splits(cfg: ExperimentConfig) -> dict:
    """Fresh train/val/test data from the config's ``dataset`` sub-stream."""
    sizes = dict(zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)))
    p = dict(cfg.data_params)
    rng = substream(cfg.seed, "dataset")
    if cfg.task == "nbody":
        try:
            params = SimParams(**p)
        except TypeError as exc:
            raise ConfigError(f"data_params: {exc}") from exc
        base = int(rng.integers(2**31))
        out, offset = {}, 0
        for s in SPLITS:
            out[s] = simulate_many(range(base + offset, base + offset + sizes[s]), params) if sizes[s] else []
            offset += sizes[s]
        return out
    if cfg.task == "autoencoder":
        family = p.pop("family", "erdos_renyi")
        gen = {"erdos_renyi": erdos_renyi, "community_small": community_small}.get(family)
        if gen is None:
            raise ConfigError(f"data_params.family: unknown graph family {family!r}")
        out = {}
        for s in SPLITS:
            graphs = gen(count=sizes[s], seed=int(rng.integers(2**63)), **p) if sizes[s] else []
            out[s] = [g for g in graphs if g.M >= 2]
        return out
    out = {}
    for s in SPLITS:
        out[s] = make_invariant_data(sizes[s], rng, **p)
    return out


def write_splits(task: str, splits: dict, directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for s, data in splits.items():
        if task == "nbody":
            path = directory / f"{s}.jsonl"
            write_dataset(data, path)
        elif task == "autoencoder":
            path = directory / f"{s}.jsonl"
            write_graphs(data, path)
        else:
            clouds, y = data
            path = directory / f"{s}.json"
            path.write_text(json.dumps({"points": [c.tolist() for c in clouds], "y": list(map(float, y))}))
        written.append(path)
    return written


def read_splits(task: str, directory) -> dict:
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"dataset: directory {directory} does not exist")
    out = {}
    for s in SPLITS:
        if task == "invariant":
            path = directory / f"{s}.json"
            if path.exists():
                d = json.loads(path.read_text())
                out[s] = ([np.asarray(c, dtype=np.float64) for c in d["points"]], np.asarray(d["y"]))
        else:
            path = directory / f"{s}.jsonl"
            if path.exists():
                out[s] = (read_dataset if task == "nbody" else read_graphs)(path)
    if "train" not in out:
        raise ConfigError(f"dataset: {directory} has no train split")
    return out


def load_data(cfg: ExperimentConfig) -> dict:
    data = read_splits(cfg.task, cfg.dataset) if cfg.dataset else generate_splits(cfg)
    if cfg.task == "nbody" and data.get("train"):
        dims = {t.p0.shape for split in data.values() for t in split}
        if len(dims) != 1:
            raise ConfigError(f"dataset: trajectories have mixed shapes {sorted(dims)}")
    return data


# -- runners -------------------------------------------------------------------


def _split(data: dict, name: str):
    """Named split, or ``None`` when it is missing or empty."""
    d = data.get(name)
    if d is None:
        return None
    size = len(d[1]) if isinstance(d, tuple) else len(d)
    return d if size else None


def _test_split(data: dict):
    return _split(data, "test") or data["train"]


def _report(cfg: ExperimentConfig, history, test: dict, fwd_ms: float, meta: dict | None = None) -> dict:
    return {
        "config_digest": cfg.digest(),
        "per_epoch": history.per_epoch() if history is not None else [],
        "best_epoch": history.best_epoch if history is not None else None,
        "test": test,
        "timing": {"fwd_ms_per_batch": fwd_ms},
        "meta": {"init": "uniform(+-1/sqrt(fan_in)), zero bias, coord_fn output layer scaled by 1e-3", "seed": cfg.seed, **(meta or {})},
    }


def _training_kwargs(cfg: ExperimentConfig) -> dict:
    return dict(
        num_layers=cfg.num_layers,
        hidden_dim=cfg.hidden_dim,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        lr_schedule=cfg.lr_schedule,
        weight_decay=cfg.weight_decay,
        early_stopping=cfg.early_stopping,
        clip_norm=cfg.clip_norm,
        random_state=cfg.seed,
    )


def build_estimator(cfg: ExperimentConfig):
    kw = _training_kwargs(cfg)
    if cfg.task == "nbody":
        return est.NBodyForecaster(kind=cfg.model, **kw)
    if cfg.task == "autoencoder":
        return est.GraphAutoencoder(kind=cfg.model, embed_dim=cfg.embed_dim, noise_sigma=cfg.noise_sigma, **kw)
    return est.InvariantRegressor(kind=cfg.model, **kw)


def run_nbody(cfg: ExperimentConfig, data: dict | None = None):
    data = data or load_data(cfg)
    train, val, test = data["train"], _split(data, "val"), _test_split(data)
    model = build_estimator(cfg).fit(train, X_val=val)
    linear = est.LinearDriftBaseline().fit(train)
    metrics = {"mse": model.mse(test), "linear_mse": linear.mse(test), "linear_t": linear.t_}
    fwd = model.forward_ms(test[: cfg.batch_size])
    return _report(cfg, model.history_, metrics, fwd), model


def evaluate_nbody(model, data: dict) -> dict:
    test = _test_split(data)
    linear = est.LinearDriftBaseline().fit(data["train"])
    return {"mse": model.mse(test), "linear_mse": linear.mse(test), "linear_t": linear.t_}


def evaluate_autoencoder(model, data: dict) -> dict:
    test = _test_split(data)
    metrics = model.evaluate(test)
    zeros = [np.zeros(g.adjacency.shape) for g in test]
    pct, f1 = edge_metrics(zeros, [g.adjacency for g in test])
    metrics.update({"baseline_pct_error": pct, "baseline_f1": f1})
    return metrics


def run_autoencoder(cfg: ExperimentConfig, data: dict | None = None):
    data = data or load_data(cfg)
    model = build_estimator(cfg).fit(data["train"], X_val=_split(data, "val"))
    test = _test_split(data)
    fwd = est._time_forward(lambda: model._encode([g.adjacency for g in test[: cfg.batch_size]], substream(0, "t")))
    meta = {"noise_sigma": cfg.noise_sigma, "embed_dim": cfg.embed_dim}
    return _report(cfg, model.history_, evaluate_autoencoder(model, data), fwd, meta), model


def evaluate_invariant(model, data: dict, seed: int) -> dict:
    clouds, y = _test_split(data)
    moved = transform_clouds(clouds, substream(seed, "transforms"))
    return {"mae": model.mae(clouds, y), "mae_transformed": model.mae(moved, y)}


def run_invariant_regression(cfg: ExperimentConfig, data: dict | None = None):
    data = data or load_data(cfg)
    clouds, y = data["train"]
    val = _split(data, "val")
    model = build_estimator(cfg)
    if val is not None:
        model.fit(clouds, y, X_val=val[0], y_val=val[1])
    else:
        model.fit(clouds, y)
    test_clouds = _test_split(data)[0]
    graphs = [est.point_cloud_graph(c) for c in test_clouds[: cfg.batch_size]]
    fwd = est._time_forward(lambda: model._raw(graphs))
    return _report(cfg, model.history_, evaluate_invariant(model, data, cfg.seed), fwd), model


RUNNERS = {"nbody": run_nbody, "autoencoder": run_autoencoder, "invariant": run_invariant_regression}


def run_experiment(cfg: ExperimentConfig, data: dict | None = None):
    return RUNNERS[cfg.task](cfg, data)


def evaluate(cfg: ExperimentConfig, model, data: dict | None = None) -> dict:
    data = data or load_data(cfg)
    if cfg.task == "nbody":
        return evaluate_nbody(model, data)
    if cfg.task == "autoencoder":
        return evaluate_autoencoder(model, data)
    return evaluate_invariant(model, data, cfg.seed)


def deterministic_view(report: dict) -> dict:
    """The report without wall-clock fields (used for reproducibility checks)."""
    return {k: v for k, v in report.items() if k != "timing"}


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
