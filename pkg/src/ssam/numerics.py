"""Dense float64 matrix primitives with reverse-mode differentiation.

Plain numpy arrays are the matrix representation (row-major float64).
Every operation here also accepts :class:`Var` nodes; when any operand is
a ``Var`` the result is a ``Var`` carrying the backward rule, so a scalar
objective composed from these primitives can be differentiated exactly
with :func:`value_and_gradient`. :func:`finite_difference_gradient` is the
independent central-difference oracle used to cross-check the analytic
path; the two never share derivative code.

Operations validate their own output: any non-finite result raises
:class:`~ssam.errors.NumericError` naming the offending primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, NumericError

ZERO_NORM_EPS = 1e-12


class Var:
    """A node in the reverse-mode graph: a float64 value plus backward edges.

    Leaves are created with :func:`leaf`; interior nodes are created by the
    operations in this module (or by :func:`custom_node` for operations
    defined elsewhere). Values are never mutated after construction.
    """

    __slots__ = ("value", "_edges")

    def __init__(self, value: np.ndarray, edges: tuple = ()) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self._edges = edges

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

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


@dataclass
class GradientResult:
    """Value of a scalar objective together with its gradient, shaped like
    the differentiated parameter."""

    value: float
    gradient: np.ndarray


def leaf(value) -> Var:
    """Wrap ``value`` as an independent graph leaf (copies the data)."""
    return Var(np.array(value, dtype=np.float64))


def value_of(x) -> np.ndarray:
    """The plain float64 array behind ``x`` (Var or array-like)."""
    if isinstance(x, Var):
        return x.value
    if type(x) is np.ndarray and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


def detach(x):
    """Drop ``x`` from the graph, returning its plain value."""
    return value_of(x)


def custom_node(op: str, out: np.ndarray, edges: Sequence[tuple]):
    """Build a graph node for an externally defined operation.

    ``edges`` pairs each operand with a vjp callable mapping the output
    gradient to that operand's gradient (exact operand shape). Operands
    that are not ``Var`` are dropped. Returns a plain array when no
    operand is differentiable. Raises ``NumericError`` (naming ``op``) on
    a non-finite result.
    """
    if not (type(out) is np.ndarray and out.dtype == np.float64):
        out = np.asarray(out, dtype=np.float64)
    # min/max both propagate NaN and bracket any infinity; two bare
    # reductions beat isfinite + all on every node of a hot graph
    if out.size and not (math.isfinite(float(out.min())) and math.isfinite(float(out.max()))):
        raise NumericError(f"{op} produced a non-finite value")
    live = tuple((p, vjp) for p, vjp in edges if isinstance(p, Var))
    if not live:
        return out
    return Var(out, live)


def _toposort(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order  # every node appears after all of its parents


def gradient(out: Var, wrt: Var) -> np.ndarray:
    """Reverse-accumulate d(out)/d(wrt); ``out`` is typically scalar."""
    order = _toposort(out)
    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._edges:
            pg = vjp(g)
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    result = grads.get(id(wrt))
    if result is None:
        return np.zeros_like(wrt.value)
    if not np.all(np.isfinite(result)):
        raise NumericError("backward pass produced a non-finite gradient")
    return result


def value_and_gradient(objective: Callable, params) -> GradientResult:
    """Evaluate a scalar objective and its exact reverse-mode gradient.

    ``objective`` receives a ``Var`` shaped like ``params`` and must
    return a scalar built from the primitives in this package. An
    objective that ignores its argument yields an all-zero gradient.
    """
    p = leaf(params)
    out = objective(p)
    if isinstance(out, Var):
        if out.value.size != 1:
            raise DimensionError(
                f"objective must be scalar, got shape {out.value.shape}"
            )
        value = float(out.value)
        grad = gradient(out, p)
    else:
        arr = np.asarray(out, dtype=np.float64)
        if arr.size != 1:
            raise DimensionError(f"objective must be scalar, got shape {arr.shape}")
        value = float(arr)
        grad = np.zeros_like(p.value)
    if not np.isfinite(value):
        raise NumericError("objective produced a non-finite value")
    return GradientResult(value, grad)


def finite_difference_gradient(objective: Callable, params, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate, (f(x+he_i) - f(x-he_i)) / 2h.

    Evaluates ``objective`` on plain arrays only; shares no derivative
    code with the analytic path.
    """
    if h <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {h}")
    x = np.array(value_of(params))
    grad = np.zeros_like(x)
    flat, gflat = x.ravel(), grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar_eval(objective, x)
        flat[i] = orig - h
        fm = _scalar_eval(objective, x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar_eval(objective: Callable, x: np.ndarray) -> float:
    out = objective(x)
    v = float(out.value) if isinstance(out, Var) else float(np.asarray(out))
    if not np.isfinite(v):
        raise NumericError("objective produced a non-finite value")
    return v


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _require_matrix(a: np.ndarray, op: str, name: str) -> None:
    if a.ndim != 2:
        raise DimensionError(f"{op}: {name} must be 2-D, got shape {a.shape}")


def matmul(a, b):
    """Matrix product; requires ``a.cols == b.rows``."""
    av, bv = value_of(a), value_of(b)
    _require_matrix(av, "matmul", "a")
    _require_matrix(bv, "matmul", "b")
    if av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ, {av.shape} x {bv.shape}"
        )
    return custom_node(
        "matmul",
        av @ bv,
        ((a, lambda g: g @ bv.T), (b, lambda g: av.T @ g)),
    )


def row_softmax(m):
    """Softmax along the last axis, stabilized by max subtraction.

    Output rows sum to 1 with entries in (0, 1); invariant to adding a
    per-row constant to the input.
    """
    mv = value_of(m)
    if mv.size == 0 or mv.ndim < 1:
        raise DimensionError(f"row_softmax: input must be nonempty, got shape {mv.shape}")
    z = mv - mv.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - inner)

    return custom_node("row_softmax", y, ((m, vjp),))


def cosine_similarity_matrix(u, v):
    """Pairwise cosine similarities: out[i, j] = cos(u_i, v_j), in [-1, 1].

    Rows of either operand with norm below 1e-12 are rejected as
    degenerate (no direction to compare).
    """
    uv, vv = value_of(u), value_of(v)
    _require_matrix(uv, "cosine_similarity_matrix", "u")
    _require_matrix(vv, "cosine_similarity_matrix", "v")
    if uv.shape[1] != vv.shape[1]:
        raise DimensionError(
            f"cosine_similarity_matrix: feature dims differ, {uv.shape} vs {vv.shape}"
        )
    un = np.linalg.norm(uv, axis=1)
    vn = np.linalg.norm(vv, axis=1)
    for name, norms in (("u", un), ("v", vn)):
        if norms.min(initial=np.inf) <= ZERO_NORM_EPS:
            row = int(np.argmin(norms))
            raise DegenerateInputError(
                f"cosine_similarity_matrix: {name} row {row} has near-zero norm"
            )
    uhat = uv / un[:, None]
    vhat = vv / vn[:, None]
    s = uhat @ vhat.T

    def vjp_u(g):
        return (g @ vhat - (g * s).sum(axis=1, keepdims=True) * uhat) / un[:, None]

    def vjp_v(g):
        return (g.T @ uhat - (g * s).sum(axis=0)[:, None] * vhat) / vn[:, None]

    return custom_node("cosine_similarity_matrix", s, ((u, vjp_u), (v, vjp_v)))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return custom_node(
        "add",
        out,
        (
            (a, lambda g: _unbroadcast(g, av.shape)),
            (b, lambda g: _unbroadcast(g, bv.shape)),
        ),
    )


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return custom_node(
        "sub",
        out,
        (
            (a, lambda g: _unbroadcast(g, av.shape)),
            (b, lambda g: _unbroadcast(-g, bv.shape)),
        ),
    )


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return custom_node(
        "mul",
        out,
        (
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
    )


def div(a, b):
    av, bv = value_of(a), value_of(b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = av / bv
    return custom_node(
        "div",
        out,
        (
            (a, lambda g: _unbroadcast(g / bv, av.shape)),
            (b, lambda g: _unbroadcast(-g * out / bv, bv.shape)),
        ),
    )


def neg(a):
    av = value_of(a)
    return custom_node("neg", -av, ((a, lambda g: -g),))


def log(a):
    av = value_of(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(av)
    return custom_node("log", out, ((a, lambda g: g / av),))


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    return custom_node("exp", out, ((a, lambda g: g * out),))


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    return custom_node("tanh", out, ((a, lambda g: g * (1.0 - out * out)),))


def xlogx(a):
    """Elementwise x*log(x) with the convention 0*log(0) = 0."""
    av = value_of(a)
    safe = np.where(av > 0.0, av, 1.0)
    out = np.where(av > 0.0, av * np.log(safe), 0.0)

    def vjp(g):
        return g * np.where(av > 0.0, np.log(safe) + 1.0, 0.0)

    return custom_node("xlogx", out, ((a, vjp),))


def total_sum(a):
    """Sum of all entries, as a scalar."""
    av = value_of(a)
    return custom_node(
        "total_sum", np.asarray(av.sum()), ((a, lambda g: np.broadcast_to(g, av.shape).copy()),)
    )


def mean(a):
    """Mean of all entries, as a scalar."""
    av = value_of(a)
    n = av.size
    return custom_node(
        "mean",
        np.asarray(av.mean()),
        ((a, lambda g: np.broadcast_to(g / n, av.shape).copy()),),
    )


def squared_norm(a):
    """Sum of squared entries, as a scalar."""
    av = value_of(a)
    return custom_node(
        "squared_norm", np.asarray((av * av).sum()), ((a, lambda g: 2.0 * g * av),)
    )


def sum_axis(a, axis: int, keepdims: bool = False):
    """Sum along one axis."""
    av = value_of(a)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return custom_node("sum_axis", av.sum(axis=axis, keepdims=keepdims), ((a, vjp),))


def mean_axis(a, axis: int, keepdims: bool = False):
    """Mean along one axis."""
    av = value_of(a)
    n = av.shape[axis]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g / n, av.shape).copy()

    return custom_node("mean_axis", av.mean(axis=axis, keepdims=keepdims), ((a, vjp),))


def transpose(a):
    av = value_of(a)
    _require_matrix(av, "transpose", "a")
    return custom_node("transpose", av.T.copy(), ((a, lambda g: g.T.copy()),))


def reshape(a, shape):
    av = value_of(a)
    return custom_node("reshape", av.reshape(shape), ((a, lambda g: g.reshape(av.shape)),))


def diag_part(a):
    """Main diagonal of a square matrix, as a vector."""
    av = value_of(a)
    _require_matrix(av, "diag_part", "a")
    if av.shape[0] != av.shape[1]:
        raise DimensionError(f"diag_part: matrix must be square, got {av.shape}")

    def vjp(g):
        out = np.zeros_like(av)
        np.fill_diagonal(out, g)
        return out

    return custom_node("diag_part", np.diag(av).copy(), ((a, vjp),))
