"""E(n)-equivariant graph convolutional layers, baselines and full models.

Layer functions take a :class:`~egnn.graph.GeometricGraph`, the layer's
parameters, the :class:`ModelConfig` and optionally a precomputed
:class:`~egnn.graph.MessageLayout`, and return a new graph.

Input ordering of the edge function is ``[h_i, h_j, |x_i - x_j|^2, a_ij]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import blocks
from .autodiff import (
    ContractError,
    DimensionError,
    Tensor,
    concat,
    index_rows,
    matmul,
    reduce_sum,
    reshape,
    segment_sum,
    sigmoid,
    sqrt,
    square,
)
from .blocks import BlockSpec, Mlp, Readout
from .graph import GeometricGraph, MessageLayout, build_layout

MODEL_KINDS = ("egnn", "egnn_velocity", "gnn", "radial_field", "schnet_invariant")


@dataclass
class ModelConfig:
    """Architecture of a message-passing model.

    ``coords_in_h`` (GNN only) concatenates coordinates and velocities to
    the input node features, ``out_dim`` adds an MLP head mapping the final
    node features to ``out_dim`` outputs returned as the output ``x``, and
    ``sparse`` restricts both the coordinate and the feature sums to the
    listed edges.
    """

    kind: str = "egnn"
    num_layers: int = 4
    hidden_dim: int = 64
    coord_dim: int = 3
    in_node_dim: int = 1
    edge_attr_dim: int = 0
    use_soft_edges: bool = False
    update_coords: bool = True
    sparse: bool = False
    coords_in_h: bool = False
    out_dim: int = 0
    readout: bool = False
    rf_tanh: bool = True
    rf_velocity: bool = False

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ContractError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        for name in ("num_layers", "edge_attr_dim", "out_dim"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("hidden_dim", "coord_dim", "in_node_dim"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kind == "egnn_velocity" and not self.update_coords:
            raise ContractError("egnn_velocity requires update_coords=True")
        if self.coords_in_h and self.kind != "gnn":
            raise ContractError("coords_in_h is only meaningful for the non-equivariant gnn")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LayerParams:
    """Learnable functions of one layer; unused slots stay ``None``."""

    edge_fn: Mlp | None = None
    coord_fn: Mlp | None = None
    node_fn: Mlp | None = None
    vel_fn: Mlp | None = None
    inf_fn: Mlp | None = None
    rf_fn: Mlp | None = None
    cf_fn: Mlp | None = None
    s_fn: Mlp | None = None

    def blocks(self) -> list[tuple[str, Mlp]]:
        return [(f.name, getattr(self, f.name)) for f in dataclasses.fields(self) if getattr(self, f.name) is not None]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [item for name, mlp in self.blocks() for item in mlp.named_parameters(f"{prefix}{name}.")]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


EgclParams = LayerParams


def build_layer(cfg: ModelConfig, rng: np.random.Generator) -> LayerParams:
    nf, k = cfg.hidden_dim, cfg.edge_attr_dim
    p = LayerParams()
    if cfg.kind in ("egnn", "egnn_velocity"):
        p.edge_fn = blocks.build(BlockSpec("edge_fn", 2 * nf + 1 + k, nf, nf), rng)
        if cfg.update_coords:
            p.coord_fn = blocks.build(BlockSpec("coord_fn", nf, nf, 1), rng)
        p.node_fn = blocks.build(BlockSpec("node_fn", 2 * nf, nf, nf), rng)
        if cfg.kind == "egnn_velocity":
            p.vel_fn = blocks.build(BlockSpec("vel_fn", nf, nf, 1), rng)
    elif cfg.kind == "gnn":
        p.edge_fn = blocks.build(BlockSpec("edge_fn", 2 * nf + k, nf, nf), rng)
        p.node_fn = blocks.build(BlockSpec("node_fn", 2 * nf, nf, nf), rng)
    elif cfg.kind == "radial_field":
        kind = "rf_fn" if cfg.rf_tanh else "rf_fn_linear"
        p.rf_fn = blocks.build(BlockSpec(kind, 1 + k, nf, 1), rng)
        if cfg.rf_velocity:
            p.vel_fn = blocks.build(BlockSpec("vel_fn", 1, nf, 1), rng)
    elif cfg.kind == "schnet_invariant":
        p.cf_fn = blocks.build(BlockSpec("edge_fn", 1 + k, nf, nf), rng)
        p.s_fn = blocks.build(BlockSpec("edge_fn", nf, nf, nf), rng)
        p.node_fn = blocks.build(BlockSpec("node_fn", 2 * nf, nf, nf), rng)
    if cfg.use_soft_edges and cfg.kind != "radial_field":
        p.inf_fn = blocks.build(BlockSpec("inf_fn", nf, nf, 1), rng)
    return p


# -- shared pieces -------------------------------------------------------------


def _layout(g: GeometricGraph, cfg: ModelConfig, layout: MessageLayout | None) -> MessageLayout:
    return layout if layout is not None else build_layout(g, sparse=cfg.sparse)


def _attr(layout: MessageLayout, cfg: ModelConfig) -> list[Tensor]:
    if cfg.edge_attr_dim == 0:
        return []
    if layout.attr is None:
        raise ContractError(f"model expects {cfg.edge_attr_dim} edge attributes but graph has none")
    if layout.attr.ndim != 2 or layout.attr.shape[1] != cfg.edge_attr_dim:
        raise DimensionError(f"edge_attr shape {layout.attr.shape} does not match edge_attr_dim={cfg.edge_attr_dim}")
    return [layout.attr]


def _relative(x: Tensor, layout: MessageLayout) -> tuple[Tensor, Tensor]:
    """Pairwise differences x_i - x_j and squared norms, one row per pair."""
    diff = index_rows(x, layout.receivers) - index_rows(x, layout.senders)
    return diff, reduce_sum(square(diff), axis=1, keepdims=True)


def pair_messages(edge_fn: Mlp, h: Tensor, pair_inputs: list[Tensor], layout: MessageLayout) -> Tensor:
    """edge_fn applied to [h_i, h_j, *pair_inputs] for every listed pair.

    The first affine layer is split by input block so the node terms are
    multiplied once per node rather than once per pair.
    """
    first = edge_fn.layers[0]
    nf = h.shape[1]
    if first.in_dim != 2 * nf + sum(t.shape[1] for t in pair_inputs):
        raise DimensionError(f"edge_fn expects {first.in_dim} inputs per pair")
    rows = np.arange(first.in_dim)
    w = first.weight
    pre = index_rows(matmul(h, index_rows(w, rows[:nf])), layout.receivers)
    pre = pre + index_rows(matmul(h, index_rows(w, rows[nf : 2 * nf])), layout.senders)
    if pair_inputs:
        pre = pre + matmul(concat(pair_inputs, axis=1), index_rows(w, rows[2 * nf :]))
    out = pre + first.bias
    act = blocks.ACTIVATIONS[first.activation]
    if act is not None:
        out = act(out)
    return blocks.forward(blocks.Mlp(edge_fn.layers[1:]), out) if len(edge_fn.layers) > 1 else out


def _require_coord_scale(layout: MessageLayout) -> np.ndarray:
    if np.any(np.isnan(layout.coord_scale)):
        raise ContractError("coordinate update needs at least 2 nodes per graph (C = 1/(M-1))")
    return layout.coord_scale


def soft_edge_aggregate(messages: Tensor, layout: MessageLayout, inf_fn: Mlp) -> Tensor:
    """m_i = sum_{j != i} e_ij m_ij with e_ij = inf_fn(m_ij)."""
    if inf_fn is None:
        raise ContractError("soft edge aggregation needs an inf_fn")
    if not layout.complete:
        raise ContractError("soft edge aggregation needs messages for every ordered pair j != i")
    if messages.shape[0] != layout.num_pairs:
        raise ContractError(f"{messages.shape[0]} messages for {layout.num_pairs} pairs")
    gated = messages * inf_fn(messages)
    return segment_sum(gated, layout.receivers, layout.num_nodes)


def aggregate(messages: Tensor, layout: MessageLayout, p: LayerParams, cfg: ModelConfig) -> Tensor:
    if cfg.use_soft_edges:
        return soft_edge_aggregate(messages, layout, p.inf_fn)
    if layout.agg_mask is not None:
        messages = messages * layout.agg_mask
    return segment_sum(messages, layout.receivers, layout.num_nodes)


def _node_update(h: Tensor, m_i: Tensor, node_fn: Mlp) -> Tensor:
    return node_fn(concat([h, m_i], axis=1)) + h


def _coord_term(diff: Tensor, m: Tensor, coord_fn: Mlp, layout: MessageLayout) -> Tensor:
    scale = _require_coord_scale(layout)
    return segment_sum(diff * coord_fn(m), layout.receivers, layout.num_nodes) * scale


# -- layers --------------------------------------------------------------------


def egcl_forward(
    g: GeometricGraph, p: LayerParams, cfg: ModelConfig, layout: MessageLayout | None = None
) -> GeometricGraph:
    """One equivariant graph convolutional layer; velocities pass through."""
    layout = _layout(g, cfg, layout)
    diff, d2 = _relative(g.x, layout)
    m = pair_messages(p.edge_fn, g.h, [d2] + _attr(layout, cfg), layout)
    x = g.x
    if cfg.update_coords:
        x = g.x + _coord_term(diff, m, p.coord_fn, layout)
    h = _node_update(g.h, aggregate(m, layout, p, cfg), p.node_fn)
    return g.replace(h=h, x=x)


def egcl_velocity_forward(
    g: GeometricGraph, p: LayerParams, cfg: ModelConfig, layout: MessageLayout | None = None
) -> GeometricGraph:
    """Layer that carries velocities: v' = phi_v(h) v + C sum (x_i - x_j) phi_x(m_ij); x' = x + v'."""
    if g.v is None:
        raise ContractError("egcl_velocity_forward needs velocities on the graph")
    layout = _layout(g, cfg, layout)
    diff, d2 = _relative(g.x, layout)
    m = pair_messages(p.edge_fn, g.h, [d2] + _attr(layout, cfg), layout)
    v = p.vel_fn(g.h) * g.v + _coord_term(diff, m, p.coord_fn, layout)
    x = g.x + v
    h = _node_update(g.h, aggregate(m, layout, p, cfg), p.node_fn)
    return g.replace(h=h, x=x, v=v)


def gnn_forward(
    g: GeometricGraph, p: LayerParams, cfg: ModelConfig, layout: MessageLayout | None = None
) -> GeometricGraph:
    layout = _layout(g, cfg, layout)
    m = pair_messages(p.edge_fn, g.h, _attr(layout, cfg), layout)
    h = _node_update(g.h, aggregate(m, layout, p, cfg), p.node_fn)
    return g.replace(h=h)


def radial_field_forward(
    g: GeometricGraph, p: LayerParams, cfg: ModelConfig, layout: MessageLayout | None = None
) -> GeometricGraph:
    """x_i' = x_i + sum_{j != i} phi_rf(|x_i - x_j|, a_ij) (x_i - x_j).

    When ``cfg.rf_velocity`` is set and the graph has velocities, the sum
    instead updates v' = phi_v(|v_i|) v_i + sum(...) and x' = x + v'.
    """
    layout = _layout(g, cfg, layout)
    if np.any(layout.graph_sizes < 2):
        raise ContractError("radial field needs at least 2 nodes per graph")
    diff, d2 = _relative(g.x, layout)
    phi = p.rf_fn(concat([sqrt(d2)] + _attr(layout, cfg), axis=1))
    field_term = segment_sum(diff * phi, layout.receivers, layout.num_nodes)
    if cfg.rf_velocity:
        if g.v is None:
            raise ContractError("rf_velocity needs velocities on the graph")
        speed = sqrt(reduce_sum(square(g.v), axis=1, keepdims=True))
        v = p.vel_fn(speed) * g.v + field_term
        return g.replace(x=g.x + v, v=v)
    return g.replace(x=g.x + field_term)


def schnet_forward(
    g: GeometricGraph, p: LayerParams, cfg: ModelConfig, layout: MessageLayout | None = None
) -> GeometricGraph:
    """Continuous-filter convolution m_ij = phi_cf(|r_ij|, a_ij) * phi_s(h_j)."""
    layout = _layout(g, cfg, layout)
    _, d2 = _relative(g.x, layout)
    filt = p.cf_fn(concat([sqrt(d2)] + _attr(layout, cfg), axis=1))
    m = filt * p.s_fn(index_rows(g.h, layout.senders))
    h = _node_update(g.h, aggregate(m, layout, p, cfg), p.node_fn)
    return g.replace(h=h)


LAYER_FUNCTIONS = {
    "egnn": egcl_forward,
    "egnn_velocity": egcl_velocity_forward,
    "gnn": gnn_forward,
    "radial_field": radial_field_forward,
    "schnet_invariant": schnet_forward,
}


def model_forward(
    g: GeometricGraph, layers: list[LayerParams], cfg: ModelConfig, layout: MessageLayout | None = None
) -> GeometricGraph:
    """Apply the layer stack; zero layers is the identity."""
    if not layers:
        return g
    layout = _layout(g, cfg, layout)
    step = LAYER_FUNCTIONS[cfg.kind]
    for p in layers:
        g = step(g, p, cfg, layout)
    return g


# -- decoder and readout -------------------------------------------------------


def decode_pairs(z: Tensor, receivers: np.ndarray, senders: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """Edge probabilities 1 / (1 + exp(w |z_i - z_j|^2 + b)) for listed pairs."""
    diff = index_rows(z, receivers) - index_rows(z, senders)
    d2 = reduce_sum(square(diff), axis=1)
    return sigmoid(-(d2 * w + b))


def decode_adjacency(z: Tensor, w, b) -> Tensor:
    """Dense [M x M] reconstructed adjacency for one graph (diagonal included)."""
    m = z.shape[0]
    w = w if isinstance(w, Tensor) else Tensor(w)
    b = b if isinstance(b, Tensor) else Tensor(b)
    i, j = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    return reshape(decode_pairs(z, i.ravel(), j.ravel(), w, b), (m, m))


def readout(h: Tensor, head: Readout, node_graph: np.ndarray | None = None, num_graphs: int = 1) -> Tensor:
    """Node-wise MLP, per-graph sum pooling, graph MLP.  Returns [graphs x out]."""
    if node_graph is None:
        node_graph = np.zeros(h.shape[0], dtype=np.int64)
    pooled = segment_sum(head.node_mlp(h), node_graph, num_graphs)
    return head.graph_mlp(pooled)


# -- full model ----------------------------------------------------------------


@dataclass
class GraphModel:
    """Input embedding, layer stack, and optional output head / readout."""

    config: ModelConfig
    layers: list[LayerParams]
    embed: Mlp | None = None
    head: Mlp | None = None
    readout_head: Readout | None = None
    seed: int | None = field(default=None)

    @classmethod
    def build(cls, cfg: ModelConfig, rng: np.random.Generator | int | None = None) -> "GraphModel":
        seed = rng if isinstance(rng, (int, np.integer)) else None
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        embed = None
        if cfg.kind != "radial_field":
            in_dim = cfg.in_node_dim
            if cfg.coords_in_h:
                # x and v (zeros when the graph has none) are appended
                in_dim += 2 * cfg.coord_dim
            embed = blocks.Mlp([blocks.linear(in_dim, cfg.hidden_dim, rng)])
        layers = [build_layer(cfg, rng) for _ in range(cfg.num_layers)]
        head = None
        if cfg.out_dim:
            head = blocks.build(BlockSpec("node_fn", cfg.hidden_dim, cfg.hidden_dim, cfg.out_dim), rng)
        ro = None
        if cfg.readout:
            ro = blocks.build(BlockSpec("readout", cfg.hidden_dim, cfg.hidden_dim, 1), rng)
        return cls(cfg, layers, embed, head, ro, seed=None if seed is None else int(seed))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        if self.embed is not None:
            out += self.embed.named_parameters("embed.")
        for k, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layers.{k}.")
        if self.head is not None:
            out += self.head.named_parameters("head.")
        if self.readout_head is not None:
            out += self.readout_head.named_parameters("readout.")
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def embed_input(self, g: GeometricGraph) -> GeometricGraph:
        if self.embed is None:
            return g
        h = g.h
        if self.config.coords_in_h:
            parts = [h, g.x]
            parts.append(g.v if g.v is not None else Tensor(np.zeros(g.x.shape)))
            h = concat(parts, axis=1)
        return g.replace(h=self.embed(h))

    def forward(self, g: GeometricGraph, layout: MessageLayout | None = None) -> GeometricGraph:
        out = model_forward(self.embed_input(g), self.layers, self.config, layout)
        if self.head is not None:
            out = out.replace(x=self.head(out.h))
        return out

    __call__ = forward

    def predict_scalar(self, g: GeometricGraph, layout: MessageLayout | None = None) -> Tensor:
        if self.readout_head is None:
            raise ContractError("model was built without a readout head")
        out = model_forward(self.embed_input(g), self.layers, self.config, layout)
        return readout(out.h, self.readout_head, g.node_graph, g.num_graphs)

    def to_checkpoint(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "blocks": blocks.to_records(self.named_parameters()),
            "rng_seed": self.seed,
        }

    @classmethod
    def from_checkpoint(cls, ckpt: dict) -> "GraphModel":
        try:
            cfg = ModelConfig.from_dict(ckpt["config"])
            records = ckpt["blocks"]
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed checkpoint: {exc}") from exc
        model = cls.build(cfg, 0)
        blocks.load_records(model.named_parameters(), records)
        model.seed = ckpt.get("rng_seed")
        return model
