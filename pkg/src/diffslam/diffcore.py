"""Reverse-mode automatic differentiation over small dense arrays.

Values are float64 numpy arrays of rank 0, 1 or 2. Each operation records
its parents together with a vector-Jacobian product closure; ``backward``
walks the graph in reverse topological order and accumulates gradients.

Shapes must match exactly. The only implicit broadcast allowed is between
a scalar (shape ``()``) and an array; anything else goes through the
explicit ``broadcast_rows`` / ``scale_rows`` helpers.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "lift",
    "const",
    "backward",
    "grad_check",
    "no_grad",
    "GraphError",
]


class GraphError(ValueError):
    """Raised for malformed graphs or invalid inputs to the engine."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording the graph (values only)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


VJP = Callable[[np.ndarray], np.ndarray]


class Node:
    """A value in the computation graph.

    ``parents`` holds ``(node, vjp)`` pairs; ``vjp`` maps the upstream
    gradient of this node to the contribution for that parent.
    """

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), op: str = "leaf", requires_grad: bool = False):
        self.value = value
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self.grad = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    # -- operators -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise GraphError("non-finite value cannot be lifted into the graph")
    if arr.ndim > 2:
        raise GraphError(f"rank {arr.ndim} arrays are not supported (max 2)")
    return arr


def lift(value, differentiable: bool = True) -> Node:
    """Create a graph leaf. ``differentiable=False`` yields a constant."""
    if isinstance(value, Node):
        value = value.value
    arr = _as_array(value).copy()
    node = Node(arr, (), "leaf" if differentiable else "const", requires_grad=differentiable)
    node.grad = np.zeros_like(arr)
    return node


def const(value) -> Node:
    return lift(value, differentiable=False)


def _wrap(x) -> Node:
    if isinstance(x, Node):
        return x
    arr = np.asarray(x, dtype=np.float64)
    node = Node(arr, (), "const", requires_grad=False)
    node.grad = np.zeros_like(arr)
    return node


def _make(value: np.ndarray, op: str, parents: Iterable[tuple[Node, VJP]]) -> Node:
    if not _grad_enabled():
        return Node(value, (), op, requires_grad=False)
    kept = tuple((p, f) for p, f in parents if p.requires_grad)
    return Node(value, kept, op, requires_grad=bool(kept))


# -- shape helpers -------------------------------------------------------

def _check_binary(a: Node, b: Node, op: str) -> None:
    sa, sb = a.value.shape, b.value.shape
    if sa != sb and sa != () and sb != ():
        raise GraphError(f"{op}: shape mismatch {sa} vs {sb} (no broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    # scalar operand of a scalar-array op
    return np.asarray(g.sum())


# -- elementwise arithmetic ----------------------------------------------

def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "add")
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, "add", (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: _unbroadcast(g, sb)),
    ))


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "sub")
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, "sub", (
        (a, lambda g: _unbroadcast(g, sa)),
        (b, lambda g: -_unbroadcast(g, sb)),
    ))


def neg(a) -> Node:
    a = _wrap(a)
    return _make(-a.value, "neg", ((a, lambda g: -g),))


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ))


def div(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, "div", (
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
    ))


def square(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make(av * av, "square", ((a, lambda g: 2.0 * av * g),))


def sqrt(a) -> Node:
    """Square root; the derivative at exactly 0 is taken as 0."""
    a = _wrap(a)
    out = np.sqrt(a.value)

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return np.where(out > 0.0, 0.5 * g / safe, 0.0)

    return _make(out, "sqrt", ((a, vjp),))


def exp(a) -> Node:
    a = _wrap(a)
    out = np.exp(a.value)
    return _make(out, "exp", ((a, lambda g: g * out),))


def log(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make(np.log(av), "log", ((a, lambda g: g / av),))


def sigmoid(a) -> Node:
    a = _wrap(a)
    x = a.value
    # numerically stable in both tails
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, "sigmoid", ((a, lambda g: g * out * (1.0 - out)),))


def tanh(a) -> Node:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _make(out, "tanh", ((a, lambda g: g * (1.0 - out * out)),))


def sin(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make(np.sin(av), "sin", ((a, lambda g: g * np.cos(av)),))


def cos(a) -> Node:
    a = _wrap(a)
    av = a.value
    return _make(np.cos(av), "cos", ((a, lambda g: -g * np.sin(av)),))


def clamp(a, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; gradient passes only where the input is inside."""
    a = _wrap(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), "clamp", ((a, lambda g: np.where(inside, g, 0.0)),))


# -- reductions ----------------------------------------------------------

def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(shape, float(g))
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _make(np.asarray(out), "sum", ((a, vjp),))


def mean(a, axis: int | None = None) -> Node:
    a = _wrap(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum(a, axis) / float(n)


def dot(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 1 or a.value.shape != b.value.shape:
        raise GraphError(f"dot: expected equal 1-d shapes, got {a.value.shape}, {b.value.shape}")
    av, bv = a.value, b.value
    return _make(np.asarray(av @ bv), "dot", (
        (a, lambda g: g * bv),
        (b, lambda g: g * av),
    ))


def norm(a, axis: int | None = None) -> Node:
    """Euclidean norm (whole array, or per row with ``axis=1``).

    At a zero vector the gradient is taken as 0.
    """
    a = _wrap(a)
    av = a.value
    out = np.sqrt((av * av).sum(axis=axis))

    def vjp(g):
        if axis is None:
            return g * av / out if out > 0.0 else np.zeros_like(av)
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return np.expand_dims(scale, axis) * av

    return _make(np.asarray(out), "norm", ((a, vjp),))


# -- linear algebra ------------------------------------------------------

def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise GraphError("matmul: scalar operand, use mul")
    if av.shape[-1] != bv.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = av @ bv

    def vjp_a(g):
        if av.ndim == 2 and bv.ndim == 2:
            return g @ bv.T
        if av.ndim == 2:  # matrix-vector
            return np.outer(g, bv)
        return bv @ g  # vector-matrix

    def vjp_b(g):
        if av.ndim == 2 and bv.ndim == 2:
            return av.T @ g
        if av.ndim == 2:
            return av.T @ g
        return np.outer(av, g)

    return _make(out, "matmul", ((a, vjp_a), (b, vjp_b)))


def transpose(a) -> Node:
    a = _wrap(a)
    return _make(a.value.T.copy(), "transpose", ((a, lambda g: g.T),))


def solve(a, b) -> Node:
    """Solve ``a @ x = b`` for square ``a``."""
    a, b = _wrap(a), _wrap(b)
    av = a.value
    x = np.linalg.solve(av, b.value)
    cache = {}

    def gb(g):
        if "gb" not in cache:
            cache["gb"] = np.linalg.solve(av.T, g)
        return cache["gb"]

    def vjp_a(g):
        v = gb(g)
        return -np.outer(v, x) if x.ndim == 1 else -v @ x.T

    return _make(x, "solve", ((a, vjp_a), (b, gb)))


# -- indexing and assembly -----------------------------------------------

def getitem(a, index) -> Node:
    a = _wrap(a)
    av = a.value
    out = np.asarray(av[index])

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, index, g)
        return full

    return _make(out.copy(), "getitem", ((a, vjp),))


def gather(a, idx) -> Node:
    """Select rows (or elements) by a fixed integer index array.

    The indices are constants: no gradient flows through the selection.
    """
    idx = np.asarray(idx, dtype=np.intp)
    a = _wrap(a)
    av = a.value
    out = av[idx]

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return _make(out, "gather", ((a, vjp),))


def reshape(a, shape) -> Node:
    a = _wrap(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), "reshape", ((a, lambda g: g.reshape(old)),))


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_wrap(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)
    parents = []
    for i, n in enumerate(nodes):
        parents.append((n, (lambda i: lambda g: np.take(g, i, axis=axis))(i)))
    return _make(out, "stack", parents)


def concat(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [_wrap(n) for n in nodes]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    bounds = np.cumsum([0] + [n.value.shape[axis] for n in nodes])
    parents = []
    for i, n in enumerate(nodes):
        lo, hi = bounds[i], bounds[i + 1]
        parents.append((n, (lambda lo, hi: lambda g: np.take(g, np.arange(lo, hi), axis=axis))(lo, hi)))
    return _make(out, "concat", parents)


def broadcast_rows(v, n: int) -> Node:
    """Tile a 1-d vector into ``n`` identical rows (explicit broadcast)."""
    v = _wrap(v)
    if v.value.ndim != 1:
        raise GraphError("broadcast_rows expects a 1-d vector")
    out = np.broadcast_to(v.value, (n, v.value.shape[0])).copy()
    return _make(out, "broadcast_rows", ((v, lambda g: g.sum(axis=0)),))


def scale_rows(m, w) -> Node:
    """Multiply each row of an (N, k) matrix by the matching entry of w (N,)."""
    m, w = _wrap(m), _wrap(w)
    mv, wv = m.value, w.value
    if mv.ndim != 2 or wv.shape != (mv.shape[0],):
        raise GraphError(f"scale_rows: shapes {mv.shape} and {wv.shape} do not pair")
    return _make(mv * wv[:, None], "scale_rows", (
        (m, lambda g: g * wv[:, None]),
        (w, lambda g: (g * mv).sum(axis=1)),
    ))


def cross_rows(a, b) -> Node:
    """Row-wise cross product of two (N, 3) arrays (or two 3-vectors)."""
    a, b = _wrap(a), _wrap(b)
    if a.value.shape != b.value.shape or a.value.shape[-1] != 3:
        raise GraphError("cross_rows: expected matching (..., 3) shapes")
    av, bv = a.value, b.value
    return _make(np.cross(av, bv), "cross", (
        (a, lambda g: np.cross(bv, g)),
        (b, lambda g: np.cross(g, av)),
    ))


def hat(w) -> Node:
    """Skew-symmetric matrix of a 3-vector, so that hat(w) @ x = w x x."""
    w = _wrap(w)
    x, y, z = w.value
    out = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])

    def vjp(g):
        return np.array([g[2, 1] - g[1, 2], g[0, 2] - g[2, 0], g[1, 0] - g[0, 1]])

    return _make(out, "hat", ((w, vjp),))


def block(rows: Sequence[Sequence]) -> Node:
    """Assemble a 2-d matrix from a grid of 2-d blocks."""
    return concat([concat(list(r), axis=1) for r in rows], axis=0)


def where_const(mask: np.ndarray, a, b) -> Node:
    """Select elementwise from a or b by a fixed boolean mask."""
    a, b = _wrap(a), _wrap(b)
    _check_binary(a, b, "where")
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, a.value, b.value), "where", (
        (a, lambda g: _unbroadcast(np.where(mask, g, 0.0), a.value.shape)),
        (b, lambda g: _unbroadcast(np.where(mask, 0.0, g), b.value.shape)),
    ))


def custom(value: np.ndarray, op: str, parents: Iterable[tuple[Node, VJP]]) -> Node:
    """Register a primitive implemented elsewhere with its own VJPs."""
    return _make(np.asarray(value, dtype=np.float64), op, [(_wrap(p), f) for p, f in parents])


# -- backward pass -------------------------------------------------------

def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in computation graph")
        state[key] = 1
        stack.append((node, True))
        for parent, _ in node.parents:
            ps = state.get(id(parent))
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None:
                stack.append((parent, False))
    return order


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Populate ``grad`` on every node reachable from a scalar root.

    Gradients are zeroed at the start of each call, so calling twice gives
    the same result. Returns the gradients of the differentiable leaves.
    """
    if not isinstance(root, Node):
        raise GraphError("backward expects a Node")
    if root.value.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            prev = grads.get(key)
            grads[key] = contrib if prev is None else prev + contrib
    leaves = {}
    for node in order:
        if node.requires_grad:
            g = grads.get(id(node))
            node.grad = np.zeros_like(node.value) if g is None else np.asarray(g, dtype=np.float64).reshape(node.value.shape)
            if not node.parents:
                leaves[node] = node.grad
        else:
            node.grad = np.zeros_like(node.value)
    return leaves


def grad_check(f: Callable[[Node], Node], x, h: float = 1e-5, eps: float = 1e-12) -> float:
    """Max relative error between the analytic gradient and central differences."""
    if h <= 0:
        raise GraphError("step size must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = lift(x)
    y = f(leaf)
    if not np.all(np.isfinite(y.value)):
        raise GraphError("function value is not finite")
    backward(y)
    analytic = leaf.grad.copy()
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    for k in range(flat.size):
        vals = []
        for step in (h, -h):
            probe = flat.copy()
            probe[k] += step
            with no_grad():
                v = float(f(const(probe.reshape(x.shape))).value)
            if not np.isfinite(v):
                raise GraphError(f"function not finite near coordinate {k}")
            vals.append(v)
        numeric.reshape(-1)[k] = (vals[0] - vals[1]) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), eps)
    return float(np.max(np.abs(analytic - numeric) / denom))
