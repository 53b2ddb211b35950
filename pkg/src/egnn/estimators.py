"""scikit-learn style estimators for the three experiment families.

All estimators follow the usual contract: hyper-parameters are stored
verbatim by ``__init__`` (so ``get_params``/``set_params``/``clone`` work),
learned state lives in attributes ending in ``_`` and is created by
``fit``.
"""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .autodiff import ContractError, Tensor, reduce_sum
from .graph import GeometricGraph, batch_graphs, build_layout, fully_connected_edges
from .graphs import PlainGraph
from .model import GraphModel, ModelConfig, decode_pairs
from .nbody import Trajectory
from .training import bce_terms, edge_metrics, fit, mse_loss, substream


def _check_trajectories(X) -> list[Trajectory]:
    X = list(X)
    if not X:
        raise ValueError("expected at least one trajectory")
    for i, t in enumerate(X):
        if not isinstance(t, Trajectory):
            raise TypeError(f"sample {i} is {type(t).__name__}, expected Trajectory")
    shape = X[0].p0.shape
    if any(t.p0.shape != shape for t in X):
        raise ValueError("all trajectories must have the same number of particles and dimension")
    return X


def _check_point_clouds(X) -> list[np.ndarray]:
    X = [check_array(x, dtype=np.float64, ensure_min_samples=2) for x in X]
    if not X:
        raise ValueError("expected at least one point cloud")
    dims = {x.shape[1] for x in X}
    if len(dims) != 1:
        raise ValueError(f"point clouds have mixed dimensions {sorted(dims)}")
    return X


def _check_graphs(graphs) -> list[PlainGraph]:
    graphs = [g if isinstance(g, PlainGraph) else PlainGraph(np.asarray(g)) for g in graphs]
    small = [i for i, g in enumerate(graphs) if g.M < 2]
    if small:
        raise ValueError(f"graphs {small[:5]} have fewer than 2 nodes")
    return graphs


def _time_forward(fn, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return 1000.0 * best


class _TrainingParamsMixin:
    def _fit_kwargs(self):
        return dict(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            schedule=self.lr_schedule,
            weight_decay=self.weight_decay,
            early_stopping=self.early_stopping,
            clip_norm=self.clip_norm,
        )


# -- N-body forecasting --------------------------------------------------------


def nbody_graph(t: Trajectory) -> GeometricGraph:
    """Fully connected particle graph: x = p0, v = v0, h = |v0|, a_ij = c_i c_j."""
    n = len(t.charges)
    edges = fully_connected_edges(n)
    attr = (t.charges[edges[:, 0]] * t.charges[edges[:, 1]]).reshape(-1, 1)
    speed = np.linalg.norm(t.v0, axis=1, keepdims=True)
    return GeometricGraph(Tensor(speed), Tensor(t.p0), edges, Tensor(attr), Tensor(t.v0))


NBODY_KINDS = ("egnn_velocity", "egnn", "gnn", "radial_field")


def nbody_model_config(kind: str, num_layers: int, hidden_dim: int, dim: int = 3) -> ModelConfig:
    common = dict(num_layers=num_layers, hidden_dim=hidden_dim, coord_dim=dim, in_node_dim=1, edge_attr_dim=1)
    if kind in ("egnn_velocity", "egnn"):
        return ModelConfig(kind=kind, **common)
    if kind == "gnn":
        return ModelConfig(kind="gnn", coords_in_h=True, out_dim=dim, **common)
    if kind == "radial_field":
        return ModelConfig(kind="radial_field", rf_velocity=True, **common)
    raise ValueError(f"unknown N-body model kind {kind!r}; expected one of {NBODY_KINDS}")


class NBodyForecaster(_TrainingParamsMixin, BaseEstimator):
    """Predict particle positions after the trajectory slice.

    ``X`` is a sequence of :class:`~egnn.nbody.Trajectory`; ``y`` defaults
    to their ``target`` arrays.
    """

    def __init__(
        self,
        kind="egnn_velocity",
        num_layers=4,
        hidden_dim=64,
        epochs=100,
        batch_size=100,
        lr=1e-3,
        lr_schedule="constant",
        weight_decay=0.0,
        early_stopping=False,
        clip_norm=None,
        random_state=0,
    ):
        self.kind = kind
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.weight_decay = weight_decay
        self.early_stopping = early_stopping
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _forward(self, graphs: list[GeometricGraph]) -> Tensor:
        return self.model_.forward(batch_graphs(graphs)).x

    def fit(self, X, y=None, X_val=None, y_val=None):
        X = _check_trajectories(X)
        y = np.stack([t.target for t in X]) if y is None else np.asarray(y, dtype=np.float64)
        dim = X[0].p0.shape[1]
        cfg = nbody_model_config(self.kind, self.num_layers, self.hidden_dim, dim)
        self.model_ = GraphModel.build(cfg, substream(self.random_state, "init"))
        graphs = [nbody_graph(t) for t in X]

        def batch_loss(idx, _rng):
            pred = self._forward([graphs[i] for i in idx])
            return mse_loss(pred, y[idx].reshape(-1, dim))

        val_fn = None
        if X_val is not None:
            X_val = _check_trajectories(X_val)
            y_val = np.stack([t.target for t in X_val]) if y_val is None else np.asarray(y_val)
            val_fn = lambda: self.mse(X_val, y_val)  # noqa: E731
        self.history_ = fit(
            self.model_.named_parameters(),
            len(graphs),
            batch_loss,
            rng=substream(self.random_state, "shuffle"),
            val_loss=val_fn,
            **self._fit_kwargs(),
        )
        return self

    def predict(self, X, batch_size: int = 500) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = _check_trajectories(X)
        n, dim = X[0].p0.shape
        out = []
        for start in range(0, len(X), batch_size):
            chunk = [nbody_graph(t) for t in X[start : start + batch_size]]
            out.append(self._forward(chunk).data.reshape(len(chunk), n, dim))
        return np.concatenate(out)

    def mse(self, X, y=None) -> float:
        X = _check_trajectories(X)
        y = np.stack([t.target for t in X]) if y is None else np.asarray(y)
        return float(np.mean((self.predict(X) - y) ** 2))

    def score(self, X, y=None) -> float:
        return -self.mse(X, y)

    def forward_ms(self, X) -> float:
        graphs = [nbody_graph(t) for t in _check_trajectories(X)]
        return _time_forward(lambda: self._forward(graphs))


class LinearDriftBaseline(BaseEstimator):
    """p(t) = p0 + v0 * t with a single time constant fit by least squares."""

    def __init__(self, time_constant=None):
        self.time_constant = time_constant

    def fit(self, X, y=None):
        X = _check_trajectories(X)
        if self.time_constant is not None:
            self.t_ = float(self.time_constant)
            return self
        p0 = np.stack([t.p0 for t in X])
        v0 = np.stack([t.v0 for t in X])
        y = np.stack([t.target for t in X]) if y is None else np.asarray(y)
        denom = float(np.sum(v0 * v0))
        self.t_ = float(np.sum((y - p0) * v0) / denom) if denom > 0 else 0.0
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "t_")
        X = _check_trajectories(X)
        return np.stack([t.p0 + self.t_ * t.v0 for t in X])

    def mse(self, X, y=None) -> float:
        y = np.stack([t.target for t in X]) if y is None else np.asarray(y)
        return float(np.mean((self.predict(X) - y) ** 2))

    def score(self, X, y=None) -> float:
        return -self.mse(X, y)


# -- graph autoencoding --------------------------------------------------------


AUTOENCODER_KINDS = ("egnn", "gnn", "noise_gnn", "radial_field")


class GraphAutoencoder(_TrainingParamsMixin, TransformerMixin, BaseEstimator):
    """Encoder + distance decoder  A_ij = 1 / (1 + exp(w |z_i - z_j|^2 + b)).

    Encoders: ``egnn`` and ``radial_field`` take Gaussian noise as input
    coordinates and use the output coordinates as embedding; ``gnn`` sees
    only constant node features; ``noise_gnn`` gets the noise appended to
    its node features.  Every model exchanges messages between all node
    pairs with ``a_ij = A_ij`` as the edge attribute.
    """

    def __init__(
        self,
        kind="egnn",
        embed_dim=8,
        num_layers=4,
        hidden_dim=64,
        noise_sigma=1.0,
        epochs=100,
        batch_size=1,
        lr=1e-4,
        lr_schedule="constant",
        weight_decay=1e-16,
        early_stopping=False,
        clip_norm=None,
        random_state=0,
    ):
        self.kind = kind
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.noise_sigma = noise_sigma
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.weight_decay = weight_decay
        self.early_stopping = early_stopping
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        n, common = self.embed_dim, dict(num_layers=self.num_layers, hidden_dim=self.hidden_dim, edge_attr_dim=1)
        if self.kind == "egnn":
            return ModelConfig(kind="egnn", coord_dim=n, in_node_dim=1, **common)
        if self.kind == "gnn":
            return ModelConfig(kind="gnn", coord_dim=n, in_node_dim=1, out_dim=n, **common)
        if self.kind == "noise_gnn":
            return ModelConfig(kind="gnn", coord_dim=n, in_node_dim=1 + n, out_dim=n, **common)
        if self.kind == "radial_field":
            return ModelConfig(kind="radial_field", coord_dim=n, rf_tanh=False, **common)
        raise ValueError(f"unknown autoencoder kind {self.kind!r}; expected one of {AUTOENCODER_KINDS}")

    def _graph(self, adj: np.ndarray, rng: np.random.Generator) -> GeometricGraph:
        m, n = adj.shape[0], self.embed_dim
        edges = fully_connected_edges(m)
        attr = adj[edges[:, 0], edges[:, 1]].astype(np.float64).reshape(-1, 1)
        noise = rng.normal(0.0, self.noise_sigma, size=(m, n)) if self.noise_sigma else np.zeros((m, n))
        ones = np.ones((m, 1))
        if self.kind == "noise_gnn":
            return GeometricGraph(Tensor(np.hstack([ones, noise])), Tensor(np.zeros((m, n))), edges, Tensor(attr))
        if self.kind == "gnn":
            return GeometricGraph(Tensor(ones), Tensor(np.zeros((m, n))), edges, Tensor(attr))
        return GeometricGraph(Tensor(ones), Tensor(noise), edges, Tensor(attr))

    def _encode(self, adjs: list[np.ndarray], rng: np.random.Generator):
        g = batch_graphs([self._graph(a, rng) for a in adjs])
        layout = build_layout(g)
        z = self.model_.forward(g, layout).x
        return z, layout

    def _decode(self, z: Tensor, layout) -> Tensor:
        return decode_pairs(z, layout.receivers, layout.senders, self.w_, self.b_)

    @staticmethod
    def _pair_labels(adjs, layout) -> np.ndarray:
        dense = np.zeros((layout.num_nodes, layout.num_nodes))
        start = 0
        for a in adjs:
            m = a.shape[0]
            dense[start : start + m, start : start + m] = a
            start += m
        return dense[layout.receivers, layout.senders]

    def _batch_bce(self, adjs, rng) -> Tensor:
        z, layout = self._encode(adjs, rng)
        probs = self._decode(z, layout)
        return reduce_sum(bce_terms(probs, self._pair_labels(adjs, layout))) * (1.0 / len(adjs))

    def fit(self, X, y=None, X_val=None):
        graphs = _check_graphs(X)
        adjs = [g.adjacency for g in graphs]
        self.model_ = GraphModel.build(self._model_config(), substream(self.random_state, "init"))
        # measure squared distances in units of their expected value for the input noise
        scale = 2.0 * self.embed_dim * self.noise_sigma**2
        self.w_ = Tensor(1.0 / scale if scale > 0 else 1.0, requires_grad=True)
        self.b_ = Tensor(-1.0 if scale > 0 else 0.0, requires_grad=True)
        noise_rng = substream(self.random_state, "noise")
        params = self.model_.named_parameters() + [("decoder.w", self.w_), ("decoder.b", self.b_)]

        val_fn = None
        if X_val is not None:
            val_graphs = _check_graphs(X_val)
            val_fn = lambda: self.evaluate(val_graphs)["bce"]  # noqa: E731
        self.history_ = fit(
            params,
            len(adjs),
            lambda idx, _rng: self._batch_bce([adjs[i] for i in idx], noise_rng),
            rng=substream(self.random_state, "shuffle"),
            val_loss=val_fn,
            **self._fit_kwargs(),
        )
        return self

    def transform(self, X) -> list[np.ndarray]:
        """Node embeddings z for each graph (evaluation noise is seeded)."""
        check_is_fitted(self, "model_")
        graphs = _check_graphs(X)
        rng = substream(self.random_state, "eval-noise")
        out = []
        for g in graphs:
            z, _ = self._encode([g.adjacency], rng)
            out.append(z.data)
        return out

    def predict_proba(self, X) -> list[np.ndarray]:
        """Dense reconstructed adjacency (diagonal set to 0)."""
        out = []
        for z in self.transform(X):
            d2 = np.sum((z[:, None, :] - z[None, :, :]) ** 2, axis=-1)
            t = self.w_.item() * d2 + self.b_.item()
            a = 0.5 * (1.0 - np.tanh(0.5 * t))
            np.fill_diagonal(a, 0.0)
            out.append(a)
        return out

    def predict(self, X, threshold: float = 0.5) -> list[np.ndarray]:
        return [(a >= threshold).astype(np.int64) for a in self.predict_proba(X)]

    def evaluate(self, X) -> dict:
        """Mean per-graph BCE, % wrong edges and F1 pooled over ``X``."""
        check_is_fitted(self, "model_")
        graphs = _check_graphs(X)
        rng = substream(self.random_state, "eval-noise")
        bce = 0.0
        probs = []
        for g in graphs:
            z, layout = self._encode([g.adjacency], rng)
            p = self._decode(z, layout)
            bce += float(np.sum(bce_terms(p, self._pair_labels([g.adjacency], layout)).data))
            dense = np.zeros((g.M, g.M))
            dense[layout.receivers, layout.senders] = p.data
            probs.append(dense)
        pct, f1 = edge_metrics(probs, [g.adjacency for g in graphs])
        return {"bce": bce / len(graphs), "pct_error": pct, "f1": f1}

    def score(self, X, y=None) -> float:
        return self.evaluate(X)["f1"]


# -- invariant regression ------------------------------------------------------


INVARIANT_KINDS = ("egnn", "gnn")


def point_cloud_graph(points: np.ndarray) -> GeometricGraph:
    m = len(points)
    return GeometricGraph(Tensor(np.ones((m, 1))), Tensor(points), fully_connected_edges(m))


class InvariantRegressor(_TrainingParamsMixin, RegressorMixin, BaseEstimator):
    """Graph-level scalar regression on point clouds.

    ``egnn`` runs the layers without coordinate updates and with learned soft
    edges (an E(n)-invariant model); ``gnn`` feeds raw coordinates into the
    node features.  Both end in a sum-pooling readout.  Targets are
    standardised internally.
    """

    def __init__(
        self,
        kind="egnn",
        num_layers=4,
        hidden_dim=32,
        epochs=100,
        batch_size=32,
        lr=1e-3,
        lr_schedule="cosine",
        weight_decay=1e-16,
        early_stopping=False,
        clip_norm=None,
        random_state=0,
    ):
        self.kind = kind
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.weight_decay = weight_decay
        self.early_stopping = early_stopping
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _model_config(self, dim: int) -> ModelConfig:
        common = dict(num_layers=self.num_layers, hidden_dim=self.hidden_dim, coord_dim=dim, in_node_dim=1, readout=True)
        if self.kind == "egnn":
            return ModelConfig(kind="egnn", update_coords=False, use_soft_edges=True, **common)
        if self.kind == "gnn":
            return ModelConfig(kind="gnn", coords_in_h=True, **common)
        raise ValueError(f"unknown invariant-regression kind {self.kind!r}; expected one of {INVARIANT_KINDS}")

    def _raw(self, graphs) -> Tensor:
        g = batch_graphs(graphs)
        return reduce_sum(self.model_.predict_scalar(g), axis=1)

    def fit(self, X, y, X_val=None, y_val=None):
        clouds = _check_point_clouds(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(clouds):
            raise ValueError(f"{len(clouds)} samples but {len(y)} targets")
        self.y_mean_ = float(y.mean())
        std = float(y.std())
        self.y_scale_ = std if std > 0 else 1.0
        self.model_ = GraphModel.build(self._model_config(clouds[0].shape[1]), substream(self.random_state, "init"))
        graphs = [point_cloud_graph(c) for c in clouds]
        yn = (y - self.y_mean_) / self.y_scale_

        val_fn = None
        if X_val is not None:
            val_fn = lambda: float(np.mean(np.abs(self.predict(X_val) - np.ravel(y_val))))  # noqa: E731
        self.history_ = fit(
            self.model_.named_parameters(),
            len(graphs),
            lambda idx, _rng: mse_loss(self._raw([graphs[i] for i in idx]), yn[idx]),
            rng=substream(self.random_state, "shuffle"),
            val_loss=val_fn,
            **self._fit_kwargs(),
        )
        return self

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "model_")
        clouds = _check_point_clouds(X)
        out = []
        for start in range(0, len(clouds), batch_size):
            graphs = [point_cloud_graph(c) for c in clouds[start : start + batch_size]]
            out.append(self._raw(graphs).data)
        return np.concatenate(out) * self.y_scale_ + self.y_mean_

    def mae(self, X, y) -> float:
        return float(np.mean(np.abs(self.predict(X) - np.ravel(y))))




# -- checkpoints ---------------------------------------------------------------

ESTIMATORS = {
    cls.__name__: cls for cls in (NBodyForecaster, LinearDriftBaseline, GraphAutoencoder, InvariantRegressor)
}

_EXTRA_STATE = {
    "LinearDriftBaseline": ("t_",),
    "GraphAutoencoder": (),
    "InvariantRegressor": ("y_mean_", "y_scale_"),
    "NBodyForecaster": (),
}


def to_checkpoint(est) -> dict:
    """JSON-serialisable snapshot of a fitted estimator."""
    name = type(est).__name__
    if name not in ESTIMATORS:
        raise ContractError(f"no checkpoint format for {name}")
    check_is_fitted(est)
    ckpt = {"estimator": name, "params": est.get_params()}
    if hasattr(est, "model_"):
        ckpt["model"] = est.model_.to_checkpoint()
    if isinstance(est, GraphAutoencoder):
        ckpt["decoder"] = {"w": est.w_.item(), "b": est.b_.item()}
    ckpt["state"] = {k: getattr(est, k) for k in _EXTRA_STATE[name]}
    return ckpt


def from_checkpoint(ckpt: dict):
    try:
        cls = ESTIMATORS[ckpt["estimator"]]
        est = cls(**ckpt["params"])
        if "model" in ckpt:
            est.model_ = GraphModel.from_checkpoint(ckpt["model"])
        if "decoder" in ckpt:
            est.w_ = Tensor(float(ckpt["decoder"]["w"]), requires_grad=True)
            est.b_ = Tensor(float(ckpt["decoder"]["b"]), requires_grad=True)
        for k, v in ckpt.get("state", {}).items():
            setattr(est, k, v)
    except (KeyError, TypeError) as exc:
        raise ContractError(f"malformed estimator checkpoint: {exc}") from exc
    return est
