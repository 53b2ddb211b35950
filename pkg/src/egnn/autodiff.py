"""Dense float64 tensors with reverse-mode automatic differentiation.

Each operation on a :class:`Tensor` that involves a gradient-tracking input
records its parents and a backward rule.  :meth:`Tensor.backward` linearises
the recorded graph into a :class:`Tape` (topologically ordered, parents
before children) and replays it in reverse.

Only the broadcast patterns the models need are accepted: equal shapes,
a row vector against a matrix (bias add), a column vector against a matrix
(per-row scaling) and scalars.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is used outside its contract."""


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


class Tensor:
    """A float64 array that can take part in gradient computation.

    Parameters
    ----------
    data : array_like
        Values; copied and converted to float64.
    requires_grad : bool
        Leaf tensors with ``requires_grad=True`` accumulate ``grad`` on
        :meth:`backward`.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.node_id: int | None = None

    @classmethod
    def _from_op(cls, data, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.node_id = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_rows(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    # -- differentiation -------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every gradient-tracking leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not tape-recorded")
        tape = Tape.record(self)
        tape.run(self)


@dataclass
class Tape:
    """Recorded operations in topological order (parents before children)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                node.node_id = len(order)
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    for big, small in ((a, b), (b, a)):
        if big.ndim == 2:
            rows, cols = big.shape
            if small.shape in ((cols,), (1, cols), (rows, 1)):
                return
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return Tensor._from_op(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-x) overflows to inf for very negative x, which still gives exactly 0
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return Tensor._from_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def swish(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return Tensor._from_op(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return Tensor._from_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return Tensor._from_op(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return Tensor._from_op(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.data)
    return Tensor._from_op(r, (a,), lambda g: (g * 0.5 / r,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return Tensor._from_op(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


ELEMENTWISE: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "swish": swish,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "square": square,
}


def elementwise(op: str, *inputs) -> Tensor:
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


# -- linear algebra and reductions ---------------------------------------------


SMALL_MATMUL = 8


def _product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Small products accumulate over the inner index in order, like a plain
    # triple loop, so results are reproducible bit for bit; BLAS may reorder
    # or fuse the multiply-adds.
    if max(a.shape + b.shape) > SMALL_MATMUL:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]))
    for t in range(a.shape[1]):
        out += a[:, t : t + 1] * b[t : t + 1, :]
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._from_op(_product(ad, bd), (a, b), lambda g: (g @ bd.T, ad.T @ g))


def _check_axis(t: Tensor, axis) -> None:
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


SMALL_REDUCE = 64


def _ordered_sum(x: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    # numpy switches to unrolled/pairwise summation; for small inputs add
    # strictly left to right so results equal a plain loop bit for bit
    if x.size > SMALL_REDUCE:
        return x.sum(axis=axis, keepdims=keepdims)
    moved = x.reshape(-1) if axis is None else np.moveaxis(x, axis, 0)
    out = np.zeros(moved.shape[1:])
    for row in moved:
        out = out + row
    if keepdims:
        out = np.expand_dims(out, tuple(range(x.ndim)) if axis is None else axis)
    return out


def _reduction(t: Tensor, axis, keepdims: bool, scale: float | None) -> Tensor:
    _check_axis(t, axis)
    shape = t.shape
    total = _ordered_sum(t.data, axis, keepdims)
    out = total if scale is None else total / scale

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, shape)
        return (g.copy() if scale is None else g / scale,)

    return Tensor._from_op(out, (t,), backward)


def reduce_sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    return _reduction(t, axis, keepdims, None)


def reduce_mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis(t, axis)
    count = t.data.size if axis is None else t.shape[axis]
    return _reduction(t, axis, keepdims, float(count))


def reduce(op: str, t: Tensor, axis: int | None = None) -> Tensor:
    if op == "sum":
        return reduce_sum(t, axis)
    if op == "mean":
        return reduce_mean(t, axis)
    raise ContractError(f"unknown reduction {op!r}")


# -- indexing and structure ----------------------------------------------------


def _scatter_rows(values: np.ndarray, ids: np.ndarray, num_rows: int) -> np.ndarray:
    """out[r] = sum of values[k] over k with ids[k] == r."""
    width = int(np.prod(values.shape[1:], dtype=np.int64))
    if width == 0 or len(ids) == 0:
        return np.zeros((num_rows,) + values.shape[1:])
    flat = (ids[:, None] * width + np.arange(width)).ravel()
    out = np.bincount(flat, weights=values.reshape(-1), minlength=num_rows * width)
    return out.reshape((num_rows,) + values.shape[1:])


def index_rows(t: Tensor, index) -> Tensor:
    """Gather rows (or any numpy basic/advanced index) from ``t``."""
    shape = t.shape
    if isinstance(index, np.ndarray) and index.dtype == bool:
        index = np.nonzero(index)
    out = t.data[index]

    def backward(g):
        if isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu":
            return (_scatter_rows(g, index, shape[0]),)
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (t,), backward)


def segment_sum(t: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``t`` into ``num_segments`` buckets given by ``segment_ids``."""
    if t.shape[0] != len(segment_ids):
        raise DimensionError(
            f"segment_sum: {t.shape[0]} rows but {len(segment_ids)} segment ids"
        )
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = _scatter_rows(t.data, segment_ids, num_segments)
    return Tensor._from_op(out, (t,), lambda g: (g[segment_ids],))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(x) for x in tensors]
    try:
        out = np.concatenate([x.data for x in tensors], axis=axis)
    except ValueError as exc:
        shapes = [x.shape for x in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes}") from exc
    sizes = np.cumsum([x.shape[axis] for x in tensors])[:-1]
    return Tensor._from_op(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    return Tensor._from_op(t.data.reshape(shape), (t,), lambda g: (g.reshape(old),))


def transpose(t: Tensor) -> Tensor:
    return Tensor._from_op(t.data.T, (t,), lambda g: (g.T,))
