"""Geometric graphs: node features, coordinates, velocities and edges.

A single :class:`GeometricGraph` may hold a disjoint union of several
graphs (``node_graph`` maps node -> graph id); message passing never
crosses graph boundaries and the coordinate normaliser ``1/(M-1)`` uses the
size of each node's own graph.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, DimensionError, Tensor, concat


@dataclass
class GeometricGraph:
    h: Tensor
    x: Tensor
    edges: np.ndarray
    edge_attr: Tensor | None = None
    v: Tensor | None = None
    node_graph: np.ndarray | None = None

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        m = self.num_nodes
        if self.x.shape[0] != m:
            raise DimensionError(f"h has {m} rows but x has {self.x.shape[0]}")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= m:
                raise ContractError(f"edge index out of range for {m} nodes")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ContractError("self-loops are not allowed")
        if self.v is not None and self.v.shape != self.x.shape:
            raise DimensionError(f"v shape {self.v.shape} != x shape {self.x.shape}")
        if self.edge_attr is not None and self.edge_attr.shape[0] != len(self.edges):
            raise DimensionError(
                f"{len(self.edges)} edges but edge_attr has {self.edge_attr.shape[0]} rows"
            )
        if self.node_graph is not None:
            self.node_graph = np.asarray(self.node_graph, dtype=np.int64)
            if len(self.node_graph) != m:
                raise DimensionError("node_graph must label every node")
            if len(self.edges) and np.any(
                self.node_graph[self.edges[:, 0]] != self.node_graph[self.edges[:, 1]]
            ):
                raise ContractError("edges may not connect different graphs")

    @property
    def num_nodes(self) -> int:
        return self.h.shape[0]

    @property
    def coord_dim(self) -> int:
        return self.x.shape[1]

    @property
    def num_graphs(self) -> int:
        return 1 if self.node_graph is None else int(self.node_graph.max(initial=-1)) + 1

    def graph_ids(self) -> np.ndarray:
        if self.node_graph is None:
            return np.zeros(self.num_nodes, dtype=np.int64)
        return self.node_graph

    def replace(self, **changes) -> "GeometricGraph":
        return dataclasses.replace(self, **changes)


def fully_connected_edges(num_nodes: int) -> np.ndarray:
    """All ordered pairs (i, j), i != j, sorted by i then j."""
    i, j = np.meshgrid(np.arange(num_nodes), np.arange(num_nodes), indexing="ij")
    keep = i != j
    return np.stack([i[keep], j[keep]], axis=1)


def batch_graphs(graphs: list[GeometricGraph]) -> GeometricGraph:
    """Disjoint union of single graphs."""
    if not graphs:
        raise ContractError("cannot batch an empty list of graphs")

    offsets = np.cumsum([0] + [g.num_nodes for g in graphs])[:-1]
    edges = np.concatenate([g.edges + off for g, off in zip(graphs, offsets)])
    has_attr = [g.edge_attr is not None for g in graphs]
    if any(has_attr) and not all(has_attr):
        raise ContractError("either all or none of the batched graphs carry edge_attr")
    has_v = [g.v is not None for g in graphs]
    if any(has_v) and not all(has_v):
        raise ContractError("either all or none of the batched graphs carry velocities")
    return GeometricGraph(
        h=concat([g.h for g in graphs], axis=0),
        x=concat([g.x for g in graphs], axis=0),
        edges=edges,
        edge_attr=concat([g.edge_attr for g in graphs], axis=0) if all(has_attr) else None,
        v=concat([g.v for g in graphs], axis=0) if all(has_v) else None,
        node_graph=np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs]),
    )


@dataclass
class MessageLayout:
    """Pairs that exchange messages, plus what the layers need to aggregate.

    ``receivers[k]`` gets the message from ``senders[k]``.  ``agg_mask`` is
    ``None`` when every listed pair is a neighbour pair; otherwise it marks
    which pairs enter the feature aggregation (the coordinate update always
    uses every listed pair).
    """

    receivers: np.ndarray
    senders: np.ndarray
    attr: Tensor | None
    agg_mask: np.ndarray | None
    coord_scale: np.ndarray
    graph_sizes: np.ndarray
    num_nodes: int
    complete: bool

    @property
    def num_pairs(self) -> int:
        return len(self.receivers)


def all_pairs(node_graph: np.ndarray) -> np.ndarray:
    """Every ordered within-graph pair (i, j), i != j, sorted by i then j."""
    sizes = np.bincount(node_graph) if len(node_graph) else np.zeros(0, dtype=np.int64)
    starts = np.cumsum(np.concatenate([[0], sizes]))[:-1]
    blocks = [fully_connected_edges(int(s)) + int(o) for s, o in zip(sizes, starts)]
    if not blocks:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(blocks)


def build_layout(g: GeometricGraph, sparse: bool = False) -> MessageLayout:
    """Work out message pairs for ``g``.

    With ``sparse=False`` messages flow between every within-graph pair and
    ``g.edges`` only selects which of them are neighbours for the feature
    aggregation.  With ``sparse=True`` only ``g.edges`` carry messages.
    """
    node_graph = g.graph_ids()
    if g.node_graph is not None and np.any(np.diff(node_graph) < 0):
        raise ContractError("node_graph must be sorted (contiguous graphs)")
    sizes = np.bincount(node_graph, minlength=g.num_graphs) if g.num_nodes else np.zeros(1, dtype=np.int64)
    per_node = sizes[node_graph].astype(np.float64)
    with np.errstate(divide="ignore"):
        coord_scale = np.where(per_node > 1, 1.0 / (per_node - 1.0), np.nan).reshape(-1, 1)

    if sparse:
        return MessageLayout(
            g.edges[:, 0], g.edges[:, 1], g.edge_attr, None, coord_scale, sizes, g.num_nodes, False
        )

    pairs = all_pairs(node_graph)
    if len(pairs) == len(g.edges) and np.array_equal(pairs, g.edges):
        return MessageLayout(
            pairs[:, 0], pairs[:, 1], g.edge_attr, None, coord_scale, sizes, g.num_nodes, True
        )

    m = g.num_nodes
    pair_keys = pairs[:, 0] * m + pairs[:, 1]
    edge_keys = g.edges[:, 0] * m + g.edges[:, 1]
    if len(np.unique(edge_keys)) != len(edge_keys):
        raise ContractError("duplicate edges")
    idx = np.searchsorted(pair_keys, edge_keys)
    mask = np.zeros((len(pairs), 1))
    mask[idx] = 1.0
    attr = None
    if g.edge_attr is not None:
        # non-neighbour pairs get zero attributes
        filled = np.zeros((len(pairs),) + g.edge_attr.shape[1:])
        filled[idx] = g.edge_attr.data
        attr = Tensor(filled)
    return MessageLayout(pairs[:, 0], pairs[:, 1], attr, mask, coord_scale, sizes, m, True)
