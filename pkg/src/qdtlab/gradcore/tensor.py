"""Tensor type and the reverse-mode tape.

Every differentiable op builds a ``Node`` that records its inputs and a
closure mapping the output gradient to input gradients.  ``backward`` sorts
the nodes reachable from a scalar loss into a ``Tape`` and runs the closures
in reverse order.
"""

from __future__ import annotations

import contextlib
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class GradError(Exception):
    pass


class DimensionError(GradError, ValueError):
    """Raised when the operand shapes of a primitive do not conform."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class NumericError(GradError, FloatingPointError):
    pass


class ContractError(GradError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording backward closures."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "_out", "frozen")

    def __init__(self, op, inputs, backward_fn, out):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        # weak: out -> node is the owning direction, avoiding a reference cycle
        self._out = weakref.ref(out)
        self.frozen = False

    @property
    def out(self):
        return self._out()

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "_retain", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._node: Node | None = None
        self.name = name
        self._retain = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        t._retain = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def retain_grad(self) -> "Tensor":
        """Keep this non-leaf tensor's gradient after backward."""
        self._retain = True
        return self

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; the primitives live in ops.py
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops
        return ops.scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def check_finite(op: str, arr: np.ndarray):
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite values in output")


def make_result(op: str, arr: np.ndarray, inputs: Sequence[Tensor],
                backward_fn: Callable[[np.ndarray], Sequence]) -> Tensor:
    """Wrap an op's output and register its backward rule when needed."""
    check_finite(op, arr)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        out._node = Node(op, tuple(inputs), backward_fn, out)
    return out


@dataclass
class Tape:
    """Executed ops in topological order (inputs before consumers)."""

    nodes: list = field(default_factory=list)
    frozen: bool = False

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Node] = []
        if out._node is None:
            return cls(order)
        # a node is marked when expanded, not when pushed, so a shared input
        # reached late is still emitted before every one of its consumers
        seen: set[int] = set()
        stack = [(out._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for inp in node.inputs:
                n = inp._node
                if n is not None and id(n) not in seen:
                    stack.append((n, False))
        return cls(order)

    def run_backward(self, loss: Tensor):
        if self.frozen or any(n.frozen for n in self.nodes):
            raise ContractError("backward: tape already consumed by a previous backward pass")
        leaves = []
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        for node in reversed(self.nodes):
            node.frozen = True
            out = node.out
            g = None if out is None else out.grad
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(f"{node.op} backward", gi.shape, inp.shape)
                if inp.grad is None:
                    # views of g may be handed to several inputs
                    inp.grad = gi.copy() if np.may_share_memory(gi, g) else gi
                else:
                    inp.grad += gi
                if inp._node is None:
                    leaves.append(inp)
            # saved activations and consumed gradients are no longer needed
            node.backward_fn = None
            if not out._retain and out is not loss:
                out.grad = None
        for leaf in leaves:
            check_finite("backward", leaf.grad)
        self.frozen = True
        return self


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` of every requires_grad tensor upstream of ``loss``."""
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape(frozen=True)
    tape = Tape.from_output(loss)
    return tape.run_backward(loss)
