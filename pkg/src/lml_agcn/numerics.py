"""Dense float64 matrices with define-by-run reverse-mode differentiation.

Every value is a 2-D ``numpy.ndarray`` of dtype float64. A :class:`Node`
wraps one such matrix together with its gradient buffer and a closure that
pushes the upstream gradient into its parents. The graph is rebuilt on every
forward pass; call :func:`backward` on a 1x1 node to fill the ``grad`` buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

Matrix = np.ndarray


class NumericsError(Exception):
    """Base class for errors raised by the numerics substrate."""


class DimensionError(NumericsError, ValueError):
    pass


class DomainError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


def as_matrix(x) -> Matrix:
    """Coerce scalars, vectors and nested lists into a 2-D float64 array.

    Vectors become a single row.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        backward: Callable[[Matrix], None] | None = None,
        requires_grad: bool | None = None,
        op: str = "leaf",
    ) -> None:
        value = as_matrix(value)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"non-finite entries produced by {op!r}")
        self.value = value
        self.grad = np.zeros_like(value)
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 node, got {self.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.shape})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def param(value) -> Node:
    """Leaf node whose gradient is wanted."""
    return Node(np.array(as_matrix(value), dtype=np.float64), requires_grad=True)


def constant(value) -> Node:
    """Leaf node excluded from differentiation."""
    return Node(value, requires_grad=False)


def _check_same(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def _backward(g: Matrix) -> None:
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return Node(a.value @ b.value, (a, b), _backward, op="matmul")


def add(a: Node, b: Node) -> Node:
    _check_same("add", a, b)

    def _backward(g: Matrix) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad += g

    return Node(a.value + b.value, (a, b), _backward, op="add")


def sub(a: Node, b: Node) -> Node:
    _check_same("sub", a, b)

    def _backward(g: Matrix) -> None:
        if a.requires_grad:
            a.grad += g
        if b.requires_grad:
            b.grad -= g

    return Node(a.value - b.value, (a, b), _backward, op="sub")


def mul(a: Node, b: Node) -> Node:
    _check_same("mul", a, b)

    def _backward(g: Matrix) -> None:
        if a.requires_grad:
            a.grad += g * b.value
        if b.requires_grad:
            b.grad += g * a.value

    return Node(a.value * b.value, (a, b), _backward, op="mul")


def sigmoid(a: Node) -> Node:
    # split by sign so exp never overflows
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def _backward(g: Matrix) -> None:
        a.grad += g * out * (1.0 - out)

    return Node(out, (a,), _backward, op="sigmoid")


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    scale = np.where(a.value > 0, 1.0, slope)

    def _backward(g: Matrix) -> None:
        a.grad += g * scale

    return Node(a.value * scale, (a,), _backward, op="leaky-relu")


def log(a: Node) -> Node:
    if np.any(a.value <= 0):
        bad = float(a.value.min())
        raise DomainError(f"log of non-positive input (min {bad!r}); clamp first")

    def _backward(g: Matrix) -> None:
        a.grad += g / a.value

    return Node(np.log(a.value), (a,), _backward, op="log")


def square(a: Node) -> Node:
    def _backward(g: Matrix) -> None:
        a.grad += 2.0 * g * a.value

    return Node(a.value * a.value, (a,), _backward, op="square")


def scalar_mul(a: Node, c: float) -> Node:
    c = float(c)

    def _backward(g: Matrix) -> None:
        a.grad += c * g

    return Node(c * a.value, (a,), _backward, op="scalar-mul")


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)

    def _backward(g: Matrix) -> None:
        a.grad += g

    return Node(a.value + c, (a,), _backward, op="add-scalar")


def clip(a: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    inside = (a.value >= lo) & (a.value <= hi)

    def _backward(g: Matrix) -> None:
        a.grad += g * inside

    return Node(np.clip(a.value, lo, hi), (a,), _backward, op="clip")


def transpose(a: Node) -> Node:
    def _backward(g: Matrix) -> None:
        a.grad += g.T

    return Node(a.value.T.copy(), (a,), _backward, op="transpose")


def total(a: Node) -> Node:
    """Sum of all entries as a 1x1 node."""

    def _backward(g: Matrix) -> None:
        a.grad += g[0, 0]

    return Node(a.value.sum(), (a,), _backward, op="sum")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start <= stop <= a.shape[1]:
        raise DimensionError(f"slice_cols: [{start}:{stop}] out of range for {a.shape}")

    def _backward(g: Matrix) -> None:
        a.grad[:, start:stop] += g

    return Node(a.value[:, start:stop].copy(), (a,), _backward, op="slice-cols")


def slice_rows(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start <= stop <= a.shape[0]:
        raise DimensionError(f"slice_rows: [{start}:{stop}] out of range for {a.shape}")

    def _backward(g: Matrix) -> None:
        a.grad[start:stop, :] += g

    return Node(a.value[start:stop, :].copy(), (a,), _backward, op="slice-rows")


_UNARY = {
    "sigmoid": sigmoid,
    "log": log,
    "square": square,
}
_BINARY = {
    "add": add,
    "sub": sub,
    "mul": mul,
}


def elementwise(kind: str, a: Node, b: Node | None = None, *, slope: float = 0.2, scalar: float = 1.0) -> Node:
    """Dispatch an elementwise op by name.

    ``kind`` is one of add, sub, mul, sigmoid, leaky-relu, log, square,
    scalar-mul.
    """
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if b is not None:
        raise TypeError(f"{kind} takes one operand")
    if kind in _UNARY:
        return _UNARY[kind](a)
    if kind == "leaky-relu":
        return leaky_relu(a, slope)
    if kind == "scalar-mul":
        return scalar_mul(a, scalar)
    raise ValueError(f"unknown elementwise op {kind!r}")


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Node, seed: Matrix | None = None) -> None:
    """Propagate gradients from ``root`` into every upstream node.

    Each node's closure runs once, after all of its consumers have
    contributed, so shared subexpressions accumulate correctly.
    """
    if seed is None:
        if root.value.size != 1:
            raise DimensionError(f"backward from non-scalar {root.shape} needs a seed")
        seed = np.ones_like(root.value)
    root.grad += as_matrix(seed)
    for node in reversed(_topological(root)):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)


@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float
    eps: float
    analytic: list[Matrix] = field(repr=False, default_factory=list)
    numeric: list[Matrix] = field(repr=False, default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    @property
    def failures(self) -> list[int]:
        return [i for i, e in enumerate(self.errors) if e > self.tol]


def relative_error(analytic: Matrix, numeric: Matrix, floor: float = 1e-6) -> float:
    """Max entrywise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    f: Callable[[list[Node]], Node],
    params: Iterable,
    eps: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` receives one fresh parameter node per matrix in ``params`` and must
    return a 1x1 node. Gradients with magnitude below ``floor`` are compared
    in absolute terms.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    values = [np.array(as_matrix(p), dtype=np.float64) for p in params]

    def evaluate(vals: list[Matrix]) -> float:
        out = f([constant(v) for v in vals]).item()
        if not np.isfinite(out):
            raise NonFiniteError("objective evaluated to a non-finite value")
        return out

    nodes = [param(v) for v in values]
    out = f(nodes)
    if not np.isfinite(out.item()):
        raise NonFiniteError("objective evaluated to a non-finite value")
    backward(out)
    analytic = [n.grad.copy() for n in nodes]

    numeric = []
    for k, v in enumerate(values):
        est = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + eps
            hi = evaluate(values)
            v[idx] = orig - eps
            lo = evaluate(values)
            v[idx] = orig
            est[idx] = (hi - lo) / (2.0 * eps)
        numeric.append(est)

    errors = [relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
    return GradCheckReport(errors=errors, tol=tol, eps=eps, analytic=analytic, numeric=numeric)
