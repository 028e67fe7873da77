"""Dense tensors with define-by-run reverse-mode differentiation.

Every primitive op produces a new :class:`Tensor`; when any input requires
grad, the output keeps a :class:`Node` pointing back at its inputs together
with a closure computing the vector-Jacobian product.  :func:`backward`
linearizes the graph into a :class:`Tape` (topological order), replays it
in reverse and then drops the graph.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericsError, ShapeError

_state = threading.local()


def _flag(name: str, default: bool) -> bool:
    return getattr(_state, name, default)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in this thread."""
    prev = _flag("grad_enabled", True)
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def strict(enabled: bool = True):
    """Raise NumericsError when a primitive receives a non-finite input."""
    prev = _flag("strict", False)
    _state.strict = enabled
    try:
        yield
    finally:
        _state.strict = prev


def is_grad_enabled() -> bool:
    return _flag("grad_enabled", True)


def is_strict() -> bool:
    return _flag("strict", False)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A real-valued array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    # make numpy defer to our reflected operators
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; implementations live in ops.py
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _ops().reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return _ops().permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return _ops().reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return _ops().mean(self, axis, keepdims)

    def exp(self):
        return _ops().exp(self)


def _not_scalar(shape):
    raise ShapeError(f"expected a single-element tensor, got shape {shape}")


def _ops():
    from . import ops

    return ops


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward: BackwardFn


def record(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of primitive ``op`` applied to ``inputs``.

    ``backward`` maps the output cotangent to one cotangent per input
    (``None`` for inputs that need none).
    """
    if is_strict():
        for t in inputs:
            if not np.all(np.isfinite(t.data)):
                raise NumericsError(f"non-finite input to {op}")
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward)
    return out


class Tape:
    """Ordered record of the primitive applications that produced a tensor.

    ``entries`` is a topological order (inputs before outputs); replaying it
    reversed gives a valid order for accumulating cotangents.
    """

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ops(self) -> list[str]:
        return [t._node.op for t in self.entries]

    @classmethod
    def build(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would blow up on long scans
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        cot: dict[int, np.ndarray] = {id(root): seed}
        leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
        for t in reversed(self.entries):
            g = cot.pop(id(t), None)
            if g is None:
                continue
            grads = t._node.backward(g)
            for inp, gi in zip(t._node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise ShapeError(
                        f"{t._node.op}: cotangent shape {gi.shape} != input shape {inp.shape}"
                    )
                if inp._node is None:
                    prev = leaves.get(id(inp))
                    leaves[id(inp)] = (inp, gi if prev is None else prev[1] + gi)
                else:
                    prev = cot.get(id(inp))
                    cot[id(inp)] = gi if prev is None else prev + gi
        for leaf, g in leaves.values():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g

    def release(self) -> None:
        for t in self.entries:
            t._node = None
        self.entries = []


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    tape = Tape.build(loss)
    tape.replay(loss, np.ones_like(loss.data))
    tape.release()
