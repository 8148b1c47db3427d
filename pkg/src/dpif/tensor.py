"""Dense tensors with a reverse-mode differentiation graph.

Tensors wrap a numpy array in row-major N,H,W,C layout. Every differentiable
operation in :mod:`dpif.ops` returns a new tensor carrying a :class:`Node`
that records its parents and a closure computing parent gradients.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Node:
    """Graph record for one operation output."""

    __slots__ = ("op_tag", "parents", "backward_fn")

    def __init__(self, op_tag: str, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op_tag = op_tag
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float array participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f", op={self.node.op_tag}" if self.node else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic helpers; real implementations live in dpif.ops
    def __add__(self, other):
        from dpif import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from dpif import ops
        return ops.sub(self, other)

    def __mul__(self, scalar):
        from dpif import ops
        return ops.scale(self, scalar)

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        from dpif import ops
        return ops.total(self)

    def reshape(self, *shape) -> "Tensor":
        from dpif import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


class Parameter(Tensor):
    """Named model weight.

    Frozen parameters (``trainable=False``) never enter the graph and keep
    ``grad`` at ``None``.
    """

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = bool(trainable)

    def set_trainable(self, flag: bool) -> None:
        self.trainable = bool(flag)
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def make_result(data: np.ndarray, op_tag: str, parents: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, attaching a graph node when any parent needs grads."""
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op_tag, parents, backward_fn)
    return out


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar loss.

    Gradients are accumulated into ``Parameter.grad`` of every trainable
    parameter reachable from ``loss``. Returns ``{parameter name: grad}`` for
    those parameters.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: dict[str, Parameter] = {}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if isinstance(t, Parameter):
            if t.name in params and params[t.name] is not t:
                raise ValueError(f"duplicate parameter name {t.name!r} in graph")
            params[t.name] = t
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t.node is None:
            # plain leaf (e.g. an input checked by a gradient test)
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise ShapeError(f"{t.node.op_tag}: gradient shape {pg.shape} != {p.shape}")
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
    return {name: p.grad for name, p in params.items()}


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None
