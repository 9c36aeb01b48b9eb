"""Reverse-mode automatic differentiation over dense float64 arrays.

Nodes hold numpy arrays of rank <= 2; every primitive op records a
vector-Jacobian closure on the active tape.  No broadcasting beyond the
explicit row/column ops, no second-order derivatives.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.special import expit

__all__ = [
    "GraphError",
    "Node",
    "NumericError",
    "ParameterStore",
    "Tape",
    "grad_check",
]


class NumericError(RuntimeError):
    """A non-finite value appeared during evaluation."""


class GraphError(ValueError):
    """Graph misuse: bad shapes, non-scalar backward root, etc."""


_TAPES: list["Tape"] = []


class Node:
    __slots__ = ("value", "parents", "vjps", "tag", "param_name", "_idx")

    def __init__(self, value, parents, vjps, tag, param_name=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.tag = tag
        self.param_name = param_name
        self._idx = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.tag}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records nodes in creation order; creation order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}
        self._recording = True

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def _record(self, node: Node):
        node._idx = len(self.nodes)
        self.nodes.append(node)

    def backward(self, root: Node, store: "ParameterStore | None" = None):
        """Gradient of a scalar root w.r.t. every parameter leaf on the tape.

        Returns a map from parameter name to a flat float64 vector.  When a
        store is given, parameters the root does not depend on get zeros.
        """
        if root._idx is None:
            raise GraphError("backward root is not on this tape")
        if root.value.size != 1:
            raise GraphError(
                f"backward requires a scalar root, got shape {root.value.shape}"
            )
        adjoints: list[np.ndarray | None] = [None] * (root._idx + 1)
        adjoints[root._idx] = np.ones_like(root.value)
        for node in reversed(self.nodes[: root._idx + 1]):
            a = adjoints[node._idx]
            if a is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                if parent._idx is None or parent._idx > root._idx:
                    continue
                g = vjp(a)
                if adjoints[parent._idx] is None:
                    adjoints[parent._idx] = g
                else:
                    adjoints[parent._idx] = adjoints[parent._idx] + g
        grads: dict[str, np.ndarray] = {}
        if store is not None:
            for name in store.names():
                grads[name] = np.zeros(store[name].size)
        for name, node in self._param_nodes.items():
            a = adjoints[node._idx] if node._idx <= root._idx else None
            if a is not None:
                grads[name] = np.asarray(a, dtype=np.float64).ravel().copy()
        return grads


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextmanager
def pause():
    """Evaluate without recording: ops inside compute values only."""
    tape = _active_tape()
    if tape is None:
        yield
        return
    prev = tape._recording
    tape._recording = False
    try:
        yield
    finally:
        tape._recording = prev


def _node(value, tag, parents=(), vjps=(), param_name=None) -> Node:
    value = np.asarray(value, dtype=np.float64)
    if value.ndim > 2:
        raise GraphError(f"{tag}: rank {value.ndim} > 2 not supported")
    if not np.all(np.isfinite(value)):
        raise NumericError(f"numeric overflow in op '{tag}'")
    tape = _active_tape()
    recording = tape is not None and tape._recording
    if not recording:
        parents, vjps = (), ()
    node = Node(value, parents, vjps, tag, param_name)
    if recording:
        tape._record(node)
    return node


def constant(value, tag="const") -> Node:
    return _node(value, tag)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _same_shape(a: Node, b: Node, tag: str):
    if a.value.shape != b.value.shape:
        raise GraphError(f"{tag}: shape mismatch {a.value.shape} vs {b.value.shape}")


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "add")
    return _node(a.value + b.value, "add", (a, b), (lambda g: g, lambda g: g))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "sub")
    return _node(a.value - b.value, "sub", (a, b), (lambda g: g, lambda g: -g))


def mul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _node(av * bv, "mul", (a, b), (lambda g: g * bv, lambda g: g * av))


def neg(a: Node) -> Node:
    a = _lift(a)
    return _node(-a.value, "neg", (a,), (lambda g: -g,))


def scale(a: Node, c: float) -> Node:
    a = _lift(a)
    c = float(c)
    return _node(a.value * c, "scale", (a,), (lambda g: g * c,))


def add_scalar(a: Node, c: float) -> Node:
    a = _lift(a)
    return _node(a.value + float(c), "add_scalar", (a,), (lambda g: g,))


def exp(a: Node) -> Node:
    a = _lift(a)
    with np.errstate(over="ignore"):  # overflow surfaces as NumericError
        out = np.exp(a.value)
    return _node(out, "exp", (a,), (lambda g: g * out,))


def sqrt(a: Node) -> Node:
    a = _lift(a)
    out = np.sqrt(a.value)
    return _node(out, "sqrt", (a,), (lambda g: g * (0.5 / out),))


def sigmoid(a: Node) -> Node:
    a = _lift(a)
    out = expit(a.value)
    return _node(out, "sigmoid", (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a: Node) -> Node:
    a = _lift(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _node(out, "softplus", (a,), (lambda g: g * expit(av),))


def relu(a: Node) -> Node:
    a = _lift(a)
    mask = a.value > 0.0
    return _node(np.where(mask, a.value, 0.0), "relu", (a,), (lambda g: g * mask,))


def hardtanh(a: Node, lo: float = -10.0, hi: float = 10.0) -> Node:
    # subgradient 1 strictly inside (lo, hi), 0 at and beyond the clamps
    a = _lift(a)
    mask = (a.value > lo) & (a.value < hi)
    return _node(np.clip(a.value, lo, hi), "hardtanh", (a,), (lambda g: g * mask,))


def clamp_min(a: Node, c: float) -> Node:
    a = _lift(a)
    mask = a.value > c
    return _node(np.maximum(a.value, c), "clamp_min", (a,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a: Node, b: Node) -> Node:
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise GraphError("matmul expects rank-2 operands")
    av, bv = a.value, b.value
    return _node(
        av @ bv,
        "matmul",
        (a, b),
        (lambda g: g @ bv.T, lambda g: av.T @ g),
    )


def add_rowvec(m: Node, v: Node) -> Node:
    """Add a length-K row vector to every row of an N x K matrix."""
    m, v = _lift(m), _lift(v)
    if m.value.ndim != 2 or v.value.shape != (m.value.shape[1],):
        raise GraphError("add_rowvec: expected (N,K) matrix and (K,) vector")
    return _node(
        m.value + v.value[None, :],
        "add_rowvec",
        (m, v),
        (lambda g: g, lambda g: g.sum(axis=0)),
    )


def add_colvec(m: Node, v: Node) -> Node:
    """Add an (N,) vector to every column of an N x K matrix."""
    m, v = _lift(m), _lift(v)
    if m.value.ndim != 2 or v.value.shape != (m.value.shape[0],):
        raise GraphError("add_colvec: expected (N,K) matrix and (N,) vector")
    return _node(
        m.value + v.value[:, None],
        "add_colvec",
        (m, v),
        (lambda g: g, lambda g: g.sum(axis=1)),
    )


def div_colvec(m: Node, d: Node) -> Node:
    """Divide every row of an N x K matrix by the matching entry of an (N,) vector."""
    m, d = _lift(m), _lift(d)
    if m.value.ndim != 2 or d.value.shape != (m.value.shape[0],):
        raise GraphError("div_colvec: expected (N,K) matrix and (N,) vector")
    mv, dv = m.value, d.value
    return _node(
        mv / dv[:, None],
        "div_colvec",
        (m, d),
        (
            lambda g: g / dv[:, None],
            lambda g: -(g * mv).sum(axis=1) / (dv * dv),
        ),
    )


def transpose(m: Node) -> Node:
    m = _lift(m)
    return _node(m.value.T, "transpose", (m,), (lambda g: g.T,))


def as_col(v: Node) -> Node:
    v = _lift(v)
    if v.value.ndim != 1:
        raise GraphError("as_col expects a rank-1 vector")
    n = v.value.shape[0]
    return _node(v.value.reshape(n, 1), "as_col", (v,), (lambda g: g.reshape(n),))


def as_vec(m: Node) -> Node:
    m = _lift(m)
    if m.value.ndim != 2 or m.value.shape[1] != 1:
        raise GraphError("as_vec expects an (N,1) matrix")
    n = m.value.shape[0]
    return _node(m.value.reshape(n), "as_vec", (m,), (lambda g: g.reshape(n, 1),))


def concat_cols(parts: list[Node]) -> Node:
    parts = [_lift(p) for p in parts]
    widths = [p.value.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def make_vjp(i):
        return lambda g: g[:, bounds[i] : bounds[i + 1]]

    return _node(
        np.concatenate([p.value for p in parts], axis=1),
        "concat_cols",
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def concat_rows(parts: list[Node]) -> Node:
    parts = [_lift(p) for p in parts]
    heights = [p.value.shape[0] for p in parts]
    bounds = np.cumsum([0] + heights)

    def make_vjp(i):
        return lambda g: g[bounds[i] : bounds[i + 1], :]

    return _node(
        np.concatenate([p.value for p in parts], axis=0),
        "concat_rows",
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def slice_cols(m: Node, lo: int, hi: int) -> Node:
    m = _lift(m)
    shape = m.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, lo:hi] = g
        return out

    return _node(m.value[:, lo:hi], "slice_cols", (m,), (vjp,))


def slice_rows(m: Node, lo: int, hi: int) -> Node:
    m = _lift(m)
    shape = m.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[lo:hi] = g
        return out

    return _node(m.value[lo:hi], "slice_rows", (m,), (vjp,))


def gather_rows(m: Node, idx) -> Node:
    m = _lift(m)
    idx = np.asarray(idx, dtype=np.intp)
    shape = m.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return out

    return _node(m.value[idx], "gather_rows", (m,), (vjp,))


def tile_rows(v: Node, n: int) -> Node:
    """Repeat a length-K vector as the rows of an (n, K) matrix."""
    v = _lift(v)
    if v.value.ndim != 1:
        raise GraphError("tile_rows expects a rank-1 vector")
    return _node(
        np.broadcast_to(v.value, (n, v.value.shape[0])).copy(),
        "tile_rows",
        (v,),
        (lambda g: g.sum(axis=0),),
    )


# ---------------------------------------------------------------------------
# reductions

def total_sum(a: Node) -> Node:
    a = _lift(a)
    shape = a.value.shape
    return _node(a.value.sum(), "sum", (a,), (lambda g: np.broadcast_to(g, shape).copy(),))


def mean(a: Node) -> Node:
    a = _lift(a)
    shape = a.value.shape
    n = a.value.size
    return _node(
        a.value.mean(),
        "mean",
        (a,),
        (lambda g: np.broadcast_to(g / n, shape).copy(),),
    )


def rowsum(m: Node) -> Node:
    """Sum an (N,K) matrix over its columns, producing an (N,) vector."""
    m = _lift(m)
    if m.value.ndim != 2:
        raise GraphError("rowsum expects a rank-2 matrix")
    shape = m.value.shape
    return _node(
        m.value.sum(axis=1),
        "rowsum",
        (m,),
        (lambda g: np.broadcast_to(g[:, None], shape).copy(),),
    )


def min_cols(m: Node) -> tuple[Node, np.ndarray]:
    """Row-wise minimum of an (N,M) matrix.

    Ties route the gradient to the lowest column index.  Returns the
    (N,) minima node and the argmin column indices as a plain array.
    """
    m = _lift(m)
    if m.value.ndim != 2:
        raise GraphError("min_cols expects a rank-2 matrix")
    arg = m.value.argmin(axis=1)
    rows = np.arange(m.value.shape[0])
    shape = m.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[rows, arg] = g
        return out

    return _node(m.value[rows, arg], "min_cols", (m,), (vjp,)), arg


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named flat float64 tensors with deterministic iteration order.

    Names are unique and shapes immutable after creation; insertion order
    is the canonical serialization order.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def create(self, name: str, value) -> np.ndarray:
        if name in self._arrays:
            raise GraphError(f"parameter '{name}' already exists")
        arr = np.asarray(value, dtype=np.float64).copy()
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite initial value for parameter '{name}'")
        self._arrays[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def set_value(self, name: str, value: np.ndarray):
        cur = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise GraphError(
                f"parameter '{name}' shape is immutable: {cur.shape} != {value.shape}"
            )
        self._arrays[name] = value.copy()

    def node(self, name: str) -> Node:
        """Leaf node for a parameter, cached per recording tape."""
        tape = _active_tape()
        recording = tape is not None and tape._recording
        if recording and name in tape._param_nodes:
            return tape._param_nodes[name]
        n = _node(self._arrays[name], f"param:{name}", param_name=name)
        if recording:
            tape._param_nodes[name] = n
        return n

    def flat(self) -> np.ndarray:
        if not self._arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._arrays.values()])

    def load_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for name, arr in self._arrays.items():
            n = arr.size
            self._arrays[name] = vec[offset : offset + n].reshape(arr.shape).copy()
            offset += n
        if offset != vec.size:
            raise GraphError(f"flat vector length {vec.size} != expected {offset}")


# ---------------------------------------------------------------------------
# verification

def grad_check(f, x, h: float = 1e-6) -> float:
    """Max relative error between an analytic gradient and central differences.

    ``f(x)`` must return ``(value, gradient)`` for a flat float64 point x;
    only the value is used for the shifted evaluations.
    """
    x = np.asarray(x, dtype=np.float64)
    _, grad = f(x)
    grad = np.asarray(grad, dtype=np.float64)
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += h
        xm = x.copy()
        xm[i] -= h
        cd = (f(xp)[0] - f(xm)[0]) / (2.0 * h)
        err = abs(grad[i] - cd) / max(1.0, abs(cd))
        worst = max(worst, err)
    return worst
