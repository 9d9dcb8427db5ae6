"""Float32 tensors with tape-based reverse-mode differentiation.

A Tensor wraps a dense float32 ndarray. Operations build the computation
graph implicitly: each result remembers its parent tensors and a closure
that routes the upstream gradient to them. ``backward`` walks that graph
once in reverse topological order, accumulating gradients across fan-out.

Gradients accumulate in float32; scalar reductions (mean/sum) run their
accumulation in float64 before narrowing, which keeps finite-difference
checks and loss values stable at network scale.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ShapeMismatchError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense float32 value, optionally carrying a gradient buffer.

    Layer inputs/outputs are N×C×H×W; reductions produce 0-d scalars.
    ``data`` is treated as immutable once the tensor has been consumed by
    an op (closures keep references to it).
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf", parents=()):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self.parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- elementwise arithmetic ------------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out = make_result(self.data + np.float32(other), (self,), "add")
            if out.requires_grad:
                out._backward = lambda g: accumulate(self, g)
            return out
        _check_same_shape(self, other, "add")
        out = make_result(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                accumulate(a, g)
                accumulate(b, g)
            out._backward = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-float(other))
        _check_same_shape(self, other, "sub")
        out = make_result(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                accumulate(a, g)
                accumulate(b, -g)
            out._backward = bwd
        return out

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = np.float32(other)
            out = make_result(self.data * c, (self,), "mul")
            if out.requires_grad:
                out._backward = lambda g, a=self, c=c: accumulate(a, g * c)
            return out
        _check_same_shape(self, other, "mul")
        out = make_result(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def bwd(g, a=self, b=other):
                accumulate(a, g * b.data)
                accumulate(b, g * a.data)
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self * (1.0 / float(other))
        _check_same_shape(self, other, "div")
        out = make_result(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def bwd(g, a=self, b=other, y=out.data):
                accumulate(a, g / b.data)
                accumulate(b, -g * y / b.data)
            out._backward = bwd
        return out

    def __neg__(self):
        return self * -1.0

    def sqrt(self) -> "Tensor":
        y = np.sqrt(self.data)
        out = make_result(y, (self,), "sqrt")
        if out.requires_grad:
            out._backward = lambda g, a=self, y=y: accumulate(a, g * (0.5 / y))
        return out

    def clip01(self) -> "Tensor":
        """Clamp to [0,1]; subgradient 1 strictly inside, 0 at and outside the bounds."""
        x = self.data
        out = make_result(np.clip(x, 0.0, 1.0), (self,), "clip01")
        if out.requires_grad:
            mask = ((x > 0.0) & (x < 1.0)).astype(np.float32)
            out._backward = lambda g, a=self, m=mask: accumulate(a, g * m)
        return out

    # -- reductions (float64 accumulation) -------------------------------------

    def sum(self) -> "Tensor":
        val = np.float32(self.data.sum(dtype=np.float64))
        out = make_result(val, (self,), "sum")
        if out.requires_grad:
            out._backward = lambda g, a=self: accumulate(
                a, np.broadcast_to(g, a.data.shape)
            )
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        val = np.float32(self.data.mean(dtype=np.float64))
        out = make_result(val, (self,), "mean")
        if out.requires_grad:
            out._backward = lambda g, a=self, n=n: accumulate(
                a, np.broadcast_to(g / np.float32(n), a.data.shape)
            )
        return out

    def sum_squares(self) -> "Tensor":
        """Σ x² as a scalar (float64 accumulation); gradient 2x."""
        val = np.float32(np.sum(np.square(self.data, dtype=np.float64)))
        out = make_result(val, (self,), "sum_squares")
        if out.requires_grad:
            out._backward = lambda g, a=self: accumulate(a, (2.0 * g) * a.data)
        return out

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ"
        )


def make_result(data, parents, op: str) -> Tensor:
    """Wrap op output; drops graph edges when grads are globally disabled or unneeded."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=parents)
    return Tensor(data, op=op)


def accumulate(t: Tensor, g):
    """Add an incoming gradient to ``t`` (float32, copies on first write)."""
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=np.float32)
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float32)
    else:
        t.grad += g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss.

    Visits each reachable node exactly once in reverse topological order;
    every tensor with requires_grad ends up with ∂loss/∂tensor in .grad
    (accumulated across fan-out).
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(
            f"backward requires a scalar loss, got shape {loss.data.shape}"
        )
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
