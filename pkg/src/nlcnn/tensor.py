"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Every differentiable
operation in :mod:`nlcnn.functional` produces a tensor that remembers the
operation (a :class:`Node`) that created it. Calling :func:`backward` on a
scalar loss linearises the recorded graph into a :class:`Tape` and replays it
in reverse.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class ContractError(RuntimeError):
    """An autodiff entry point was called outside its contract."""


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients (``None`` for inputs that need none)."""

    __slots__ = ("name", "inputs", "backward_fn")

    def __init__(self, name: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.name = name
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d to 1-d
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the real work lives in nlcnn.functional.
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __mul__(self, other):
        from . import functional as F
        if isinstance(other, Tensor):
            return F.mul(self, other)
        return F.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __sub__(self, other):
        from . import functional as F
        return F.add(self, F.scale(other, -1.0))

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def permute(self, *axes):
        from . import functional as F
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return F.permute(self, axes)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def mean(self, axis=None):
        from . import functional as F
        return F.mean(self, axis)


def make_result(name: str, data: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap an op's forward result, enforcing finiteness and recording the node."""
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{name}: forward result contains NaN or Inf")
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(name, inputs, backward_fn)
    return out


class Tape:
    """Recorded operations in topological order (inputs before consumers)."""

    def __init__(self, nodes: list, outputs: list):
        self.nodes = nodes
        self.outputs = outputs

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list = []
        seen: set = set()
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls([t.node for t in order], order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss was not produced by a recorded operation")
    tape = Tape.from_loss(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.outputs):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out.node
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise DimensionError(f"{node.name}: gradient shape {gi.shape} != input shape {t.shape}")
            if t.node is None:
                t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
            elif id(t) in grads:
                grads[id(t)] = grads[id(t)] + gi
            else:
                grads[id(t)] = gi
    return tape
