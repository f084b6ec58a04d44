"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy buffers. When a :class:`Graph` is active
(``with Graph() as g:``) and an input requires grad, the operation is
appended to that graph's tape together with its vector-Jacobian product.
Outside a graph nothing is recorded, which keeps inference cheap.

    >>> with Graph() as g:
    ...     x = Tensor([[-1.0, 2.0]], requires_grad=True)
    ...     y = sum_all(relu(x))
    >>> g.backward(y)[x.id].data
    array([[0., 1.]])
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_ids = itertools.count()
_active_graph: contextvars.ContextVar[Graph | None] = contextvars.ContextVar(
    "pointfbi_active_graph", default=None
)


class Tensor:
    """Immutable float64 array plus a ``requires_grad`` flag.

    ``shape`` and ``data`` are fixed at construction; the buffer is copied
    and marked read-only so downstream ops cannot mutate it in place.
    """

    __slots__ = ("_data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        # internal fast path: arr is freshly allocated and owned by the new tensor
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = requires_grad
        t.id = next(_ids)
        return t

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        return float(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Graph:
    """Single-use recording tape.

    Nodes are stored in recording order, which is a topological order of
    the computation. ``backward`` may be called once.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, Tensor] = {}
        self._token = None
        self._consumed = False

    def __enter__(self) -> Graph:
        if self._consumed:
            raise ContractError("graph already consumed by backward()")
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_graph.reset(self._token)
        self._token = None

    def record(self, op, inputs, output, vjp) -> None:
        self.nodes.append(Node(op, tuple(inputs), output, vjp))

    def backward(self, root: Tensor) -> dict[int, Tensor]:
        """Accumulate d(root)/d(t) for every requires-grad tensor ``t`` that root depends on.

        Returns a map from tensor id to gradient tensor (same shape as ``t``).
        """
        if root.shape != ():
            raise ContractError(f"backward() needs a scalar root, got shape {root.shape}")
        if self._consumed:
            raise ContractError("graph already consumed by backward()")
        self._consumed = True

        producers = {node.output.id: i for i, node in enumerate(self.nodes)}
        if root.id not in producers and not root.requires_grad:
            raise ContractError("root is not recorded in this graph")

        # walk ancestors of root so unreachable nodes are skipped
        needed = {root.id}
        for node in reversed(self.nodes):
            if node.output.id in needed:
                needed.update(t.id for t in node.inputs if t.requires_grad)

        grads: dict[int, np.ndarray] = {root.id: np.ones((), dtype=np.float64)}
        tensors: dict[int, Tensor] = {root.id: root}
        for node in reversed(self.nodes):
            out_id = node.output.id
            if out_id not in needed:
                continue
            g_out = grads.get(out_id)
            if g_out is None:
                g_out = np.zeros(node.output.shape)
                grads[out_id] = g_out
            for t, g in zip(node.inputs, node.vjp(g_out)):
                if not t.requires_grad:
                    continue
                tensors[t.id] = t
                if g is None:
                    g = np.zeros(t.shape)
                if t.id in grads:
                    grads[t.id] = grads[t.id] + g
                else:
                    grads[t.id] = np.asarray(g, dtype=np.float64)

        self.gradients = {
            tid: Tensor._wrap(np.array(g, dtype=np.float64), False)
            for tid, g in grads.items()
            if tensors[tid].requires_grad
        }
        return self.gradients

    def grad(self, t: Tensor) -> Tensor:
        try:
            return self.gradients[t.id]
        except KeyError:
            raise KeyError(f"no gradient recorded for {t!r}") from None


def backward(g: Graph, root: Tensor) -> dict[int, Tensor]:
    return g.backward(root)


def _result(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, requires_grad)
    if requires_grad:
        g = _active_graph.get()
        if g is not None:
            g.record(op, inputs, t, vjp)
    return t


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- ops ---------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``b`` is a 2-D matrix; ``a`` is ``[M, K]`` or carries leading batch
    dimensions ``[..., M, K]``, in which case the same ``b`` multiplies
    every batch slice.
    """
    if b.ndim != 2 or a.ndim < 2:
        raise DimensionError(f"matmul expects a[..., M, K] and b[K, P], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        ga = g @ B.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result("matmul", (a, b), A @ B, vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. ``b`` may match ``a`` or only its trailing dimensions (a bias)."""
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}")
    lead = tuple(range(a.ndim - b.ndim))

    def vjp(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _result("add", (a, b), a.data + b.data, vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may match ``a`` or only its trailing dimensions."""
    if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    lead = tuple(range(a.ndim - b.ndim))
    A, B = a.data, b.data

    def vjp(g):
        gb = g * A
        return g * B, (gb.sum(axis=lead) if lead else gb)

    return _result("mul", (a, b), A * B, vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result("scale", (a,), a.data * factor, lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    # strict inequality: the sub-gradient at exactly 0 is 0
    mask = a.data > 0
    return _result("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _result("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def take(a: Tensor, index: int | Sequence[int]) -> Tensor:
    """Select entries along the last axis.

    An integer picks the same column everywhere; a sequence picks one column
    per leading row (its length must equal ``a.shape[0]`` for 2-D ``a``).
    """
    data = a.data
    if np.isscalar(index):
        k = int(index)
        if not 0 <= k < data.shape[-1]:
            raise IndexError(f"index {k} out of range for last axis of size {data.shape[-1]}")
        out = data[..., k]

        def vjp(g):
            full = np.zeros(data.shape)
            full[..., k] = g
            return (full,)

        return _result("take", (a,), out, vjp)

    idx = np.asarray(index, dtype=np.intp)
    if data.ndim != 2 or idx.shape != (data.shape[0],):
        raise DimensionError(f"per-row take needs a[B, C] and B indices, got {data.shape} and {idx.shape}")
    rows = np.arange(data.shape[0])
    out = data[rows, idx]

    def vjp(g):
        full = np.zeros(data.shape)
        full[rows, idx] = g
        return (full,)

    return _result("take", (a,), out, vjp)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise DimensionError("concat needs matching leading dimensions")
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _result("concat", tensors, out, lambda g: tuple(np.split(g, splits, axis=-1)))


def max_pool_points(f: Tensor) -> tuple[Tensor, np.ndarray]:
    """Column-wise maximum over the point axis (``-2``).

    Returns the pooled values and ``argmax``, the winning point index per
    feature. Ties resolve to the lowest point index. In the backward pass
    each output gradient goes entirely to its winning row.
    """
    if f.ndim < 2 or f.shape[-2] == 0:
        raise DimensionError(f"max_pool_points needs at least one point, got shape {f.shape}")
    data = f.data
    argmax = np.argmax(data, axis=-2)  # first occurrence on ties
    values = np.take_along_axis(data, argmax[..., None, :], axis=-2)[..., 0, :]

    def vjp(g):
        full = np.zeros(data.shape)
        np.put_along_axis(full, argmax[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return _result("max_pool", (f,), values, vjp), argmax


def mean_pool_points(f: Tensor) -> Tensor:
    if f.ndim < 2 or f.shape[-2] == 0:
        raise DimensionError(f"mean_pool_points needs at least one point, got shape {f.shape}")
    shape = f.shape
    n = shape[-2]

    def vjp(g):
        return (np.broadcast_to(g[..., None, :] / n, shape).copy(),)

    return _result("mean_pool", (f,), f.data.mean(axis=-2), vjp)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax of the true class over a ``[B, C]`` batch."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(log_z - z[rows, labels])

    def vjp(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _result("softmax_xent", (logits,), np.asarray(loss), vjp)
