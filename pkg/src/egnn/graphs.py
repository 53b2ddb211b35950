"""Random plain graphs for autoencoding experiments."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .nbody import DatasetFormatError


@dataclass
class PlainGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.int64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractError(f"adjacency must be square, got shape {a.shape}")
        if not np.array_equal(a, a.T) or np.any(np.diag(a)) or not np.all(np.isin(a, (0, 1))):
            raise ContractError("adjacency must be a symmetric 0/1 matrix with zero diagonal")
        self.adjacency = a

    @property
    def M(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum() // 2)


def _symmetric_sample(m: int, probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    iu = np.triu_indices(m, k=1)
    upper = (rng.random(len(iu[0])) < probs[iu]).astype(np.int64)
    a = np.zeros((m, m), dtype=np.int64)
    a[iu] = upper
    return a + a.T


def _drop_isolated(a: np.ndarray) -> np.ndarray:
    keep = a.sum(axis=1) > 0
    return a[np.ix_(keep, keep)]


def erdos_renyi(
    M_range=(7, 16), p_e: float = 0.25, count: int = 1, seed: int = 0, drop_isolated: bool = True
) -> list[PlainGraph]:
    """G(M, p_e) graphs with M uniform over the inclusive ``M_range``.

    Isolated nodes are removed, so graphs may end up smaller (or empty).
    """
    if not 0.0 <= p_e <= 1.0:
        raise ContractError(f"p_e must be in [0, 1], got {p_e}")
    lo, hi = M_range
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        m = int(rng.integers(lo, hi + 1))
        a = _symmetric_sample(m, np.full((m, m), p_e), rng)
        out.append(PlainGraph(_drop_isolated(a) if drop_isolated else a))
    return out


def cycle_graph(M: int) -> PlainGraph:
    if M < 3:
        raise ContractError(f"a cycle needs at least 3 nodes, got {M}")
    a = np.zeros((M, M), dtype=np.int64)
    idx = np.arange(M)
    a[idx, (idx + 1) % M] = 1
    a[(idx + 1) % M, idx] = 1
    return PlainGraph(a)


def two_block(M: int, p_in: float, p_out: float, seed: int = 0) -> PlainGraph:
    """Two communities of sizes ceil(M/2) and floor(M/2)."""
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ContractError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    rng = np.random.default_rng(seed)
    block = np.arange(M) >= (M + 1) // 2
    probs = np.where(block[:, None] == block[None, :], p_in, p_out)
    return PlainGraph(_symmetric_sample(M, probs, rng))


def community_small(count: int, seed: int = 0, M_range=(12, 20), p_in: float = 0.7, p_out: float = 0.05):
    rng = np.random.default_rng(seed)
    lo, hi = M_range
    return [two_block(int(rng.integers(lo, hi + 1)), p_in, p_out, int(rng.integers(2**63))) for _ in range(count)]


def write_graphs(graphs, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        fh.write(json.dumps({"format": "egnn-graphs", "version": 1, "count": len(graphs)}) + "\n")
        for g in graphs:
            fh.write(json.dumps({"adjacency": g.adjacency.tolist()}) + "\n")


def read_graphs(path) -> list[PlainGraph]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: bad header: {exc}") from exc
    if header.get("format") != "egnn-graphs":
        raise DatasetFormatError(f"{path}: line 1: not a graph dataset header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rows = json.loads(line)["adjacency"]
            out.append(PlainGraph(np.asarray(rows, dtype=np.int64).reshape(len(rows), -1) if rows else np.zeros((0, 0))))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, ContractError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno} (record {lineno - 2}): {exc}") from exc
    if len(out) != header.get("count", len(out)):
        raise DatasetFormatError(f"{path}: header announces {header['count']} records, found {len(out)}")
    return out
