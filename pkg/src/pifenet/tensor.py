"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array. Every differentiable
operation (see :mod:`pifenet.ops`) builds its output through
:meth:`Tensor.from_op`, which records the parent tensors and a closure
mapping the output gradient to per-parent gradients. Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_state = {"dtype": np.float32, "grad": True}
_ids = itertools.count()


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors and parameters.

    ``with precision(np.float64): ...`` is the mode used by gradient checks.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "backward_fn", "name", "uid")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.array(data, dtype=dtype or _state["dtype"])
        if any(s < 1 for s in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = check_finite(arr, "tensor construction")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[BackwardFn] = None
        self.name = name
        self.uid = next(_ids)

    @classmethod
    def from_op(cls, data: np.ndarray, op: str, parents: Sequence["Tensor"],
                backward_fn: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = check_finite(data, op)
        out.grad = None
        out.op = op
        out.name = ""
        out.uid = next(_ids)
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.parents = tuple(parents) if track else ()
        out.backward_fn = backward_fn if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def backward(self) -> "GradTape":
        """Populate ``.grad`` on every node of the graph that requires it.

        Leaf gradients accumulate into existing ``.grad`` arrays, so callers
        zero parameters between steps. Returns the tape that was replayed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward root must be a scalar, got shape {self.shape}")
        tape = GradTape.record(self)
        grads: dict[int, np.ndarray] = {self.uid: np.ones_like(self.data)}
        for node in reversed(tape.nodes):
            g = grads.pop(node.uid, None)
            if g is None:
                continue
            if node.requires_grad:
                if node.backward_fn is None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                else:
                    node.grad = g
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise RuntimeError(f"{node.op}: gradient shape {pg.shape} != {parent.shape}")
                prev = grads.get(parent.uid)
                grads[parent.uid] = pg if prev is None else prev + pg
        return tape


class Parameter(Tensor):
    """Trainable tensor carrying its gradient and AdamW moment buffers."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int


@dataclass
class GradTape:
    """Topologically ordered record of the graph reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def entries(self) -> list[TapeEntry]:
        return [TapeEntry(n.op, tuple(p.uid for p in n.parents), n.uid) for n in self.nodes]

    @classmethod
    def record(cls, root: Tensor) -> "GradTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.uid in seen:
                continue
            seen.add(node.uid)
            stack.append((node, True))
            for p in node.parents:
                if p.uid not in seen:
                    stack.append((p, False))
        return cls(order)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params) -> None:
    for p in params:
        p.zero_grad()
