"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op appends a :class:`Node` carrying a monotonically
increasing sequence number. ``backward`` collects the nodes reachable from the
loss and replays them in strict reverse creation order, so each node is
visited exactly once and always after every node that consumes it.
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_SUPPORTED = (np.dtype(np.float32), np.dtype(np.float64))

_seq = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One tape entry: the op, its inputs and the rule mapping output grad to input grads."""

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op}, seq={self.seq})"


class Tensor:
    """Row-major n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _SUPPORTED:
            arr = arr.astype(DEFAULT_DTYPE)
        if requires_grad and arr.dtype not in _SUPPORTED:
            raise TypeError(f"requires_grad needs a float dtype, got {arr.dtype}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None

    # -- metadata --------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators (implemented in ops) ----------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def permute(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.permute(self, axes)

    def flip(self, axis: int):
        from . import ops
        return ops.flip(self, axis)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap arrays and scalars as constant tensors; tensors pass through."""
    if isinstance(x, Tensor):
        return x
    if dtype is None and np.isscalar(x):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def make_result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as an op output, recording a node when any input needs grad.

    ``backward_fn(grad)`` must return one gradient (or None) per input.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _collect(root: Tensor) -> list[Tensor]:
    seen: set[int] = set()
    found: list[Tensor] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack.extend(i for i in t.node.inputs if i.requires_grad)
    found.sort(key=lambda t: t.node.seq, reverse=True)
    return found


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for t in _collect(loss):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{t.node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            gi = gi.astype(inp.dtype, copy=False)
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi
