"""MLP building blocks for the message-passing layers.

Every learnable function in the models (edge, coordinate, node, velocity,
edge-inference, radial-field and readout functions) is a small MLP built
from :class:`BlockSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, matmul, sigmoid, swish, tanh

ACTIVATIONS = {"swish": swish, "sigmoid": sigmoid, "tanh": tanh, "none": None}

BLOCK_KINDS = ("edge_fn", "coord_fn", "node_fn", "vel_fn", "inf_fn", "rf_fn", "rf_fn_linear", "readout")
SCALAR_KINDS = ("coord_fn", "vel_fn", "inf_fn")
COORD_HEAD_GAIN = 1e-3


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor
    activation: str = "none"

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class Mlp:
    """A chain of affine layers, each followed by an optional activation."""

    layers: list[Linear]

    def __post_init__(self):
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}layer{i}.weight", layer.weight))
            out.append((f"{prefix}layer{i}.bias", layer.bias))
        return out


@dataclass
class Readout:
    """Node-wise MLP, sum pooling, then a graph-level MLP to a scalar."""

    node_mlp: Mlp
    graph_mlp: Mlp

    def parameters(self) -> list[Tensor]:
        return self.node_mlp.parameters() + self.graph_mlp.parameters()

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.node_mlp.named_parameters(prefix + "node.") + self.graph_mlp.named_parameters(
            prefix + "graph."
        )


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_dim: int
    hidden_dim: int
    out_dim: int = field(default=1)

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ContractError(f"unknown block kind {self.kind!r}")
        for name in ("in_dim", "hidden_dim", "out_dim"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{self.kind}: {name} must be positive, got {getattr(self, name)}")
        if self.kind in SCALAR_KINDS and self.out_dim != 1:
            raise ContractError(f"{self.kind} must have out_dim == 1, got {self.out_dim}")


def linear(in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "none") -> Linear:
    """Affine layer with fan-in uniform weights and zero bias."""
    bound = 1.0 / np.sqrt(in_dim)
    weight = Tensor(rng.uniform(-bound, bound, size=(in_dim, out_dim)), requires_grad=True)
    bias = Tensor(np.zeros(out_dim), requires_grad=True)
    return Linear(weight, bias, activation)


def build(block: BlockSpec, rng: np.random.Generator) -> Mlp | Readout:
    """Instantiate the MLP architecture for ``block.kind``.

    ``edge_fn`` ends in an activation, ``coord_fn``/``node_fn``/``vel_fn``
    do not; ``inf_fn`` is a single layer squashed by a sigmoid; ``rf_fn``
    ends in tanh and ``rf_fn_linear`` is the same MLP without it.
    """
    k, d_in, d_h, d_out = block.kind, block.in_dim, block.hidden_dim, block.out_dim
    if k == "edge_fn":
        return Mlp([linear(d_in, d_h, rng, "swish"), linear(d_h, d_out, rng, "swish")])
    if k == "coord_fn":
        # near-zero coordinate steps at init keep deep stacks from blowing up positions
        head = linear(d_h, d_out, rng)
        head.weight.data *= COORD_HEAD_GAIN
        return Mlp([linear(d_in, d_h, rng, "swish"), head])
    if k in ("node_fn", "vel_fn", "rf_fn_linear"):
        return Mlp([linear(d_in, d_h, rng, "swish"), linear(d_h, d_out, rng)])
    if k == "rf_fn":
        return Mlp([linear(d_in, d_h, rng, "swish"), linear(d_h, d_out, rng, "tanh")])
    if k == "inf_fn":
        return Mlp([linear(d_in, 1, rng, "sigmoid")])
    # readout: node-wise MLP into the hidden width, pooled, then down to out_dim
    node_mlp = Mlp([linear(d_in, d_h, rng, "swish"), linear(d_h, d_h, rng)])
    graph_mlp = Mlp([linear(d_h, d_h, rng, "swish"), linear(d_h, d_out, rng)])
    return Readout(node_mlp, graph_mlp)


def forward(mlp: Mlp, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise DimensionError(f"mlp expects [batch x {mlp.in_dim}] input, got {x.shape}")
    for layer in mlp.layers:
        x = matmul(x, layer.weight) + layer.bias
        act = ACTIVATIONS[layer.activation]
        if act is not None:
            x = act(x)
    return x


def to_records(named: list[tuple[str, Tensor]]) -> list[dict]:
    return [{"name": n, "shape": list(t.shape), "values": t.data.ravel().tolist()} for n, t in named]


def load_records(named: list[tuple[str, Tensor]], records: list[dict]) -> None:
    """Copy serialized values into the tensors of ``named`` in place."""
    by_name = {r["name"]: r for r in records}
    for name, t in named:
        try:
            rec = by_name[name]
        except KeyError:
            raise ContractError(f"checkpoint is missing parameter {name!r}") from None
        if tuple(rec["shape"]) != t.shape:
            raise DimensionError(f"{name}: checkpoint shape {rec['shape']} != model shape {list(t.shape)}")
        t.data = np.asarray(rec["values"], dtype=np.float64).reshape(t.shape)
