"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` is a Wengert list: every primitive applied to :class:`Var`
operands appends one node recording the op name, parent ids, and any
non-differentiable auxiliary data.  Creation order is a topological order, so
the reverse sweep is a single backward pass over the list and replaying the
list forward reproduces every recorded value bit-for-bit.

Only the primitives the losses and estimators need are implemented: matmul,
elementwise arithmetic, square/sqrt/log/exp, hinge and activation
nonlinearities, reductions, log-sum-exp, gather/concat, and a Cholesky-backed
log-determinant for SPD matrices.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg as sla

ArrayLike = Union[np.ndarray, float, int]


class NonScalarRootError(ValueError):
    """Raised when a gradient is requested from a non-scalar node."""


class Var:
    """One node of a tape: a value plus the recipe that produced it."""

    __slots__ = ("tape", "index", "value", "op", "parents", "aux", "requires_grad", "grad")

    def __init__(self, tape, index, value, op, parents, aux, requires_grad):
        self.tape = tape
        self.index = index
        self.value = value
        self.op = op
        self.parents = parents
        self.aux = aux
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(#{self.index}, op={self.op!r}, shape={self.value.shape})"

    # Operator sugar; scalars and ndarrays are lifted to constant leaves.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __float__(self):
        return float(self.value)


class Tape:
    """Execution trace of primitive operations, in evaluation order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def _append(self, value, op, parents, aux, requires_grad) -> Var:
        v = Var(self, len(self.nodes), np.asarray(value, dtype=np.float64),
                op, tuple(parents), aux, requires_grad)
        self.nodes.append(v)
        return v

    def leaf(self, value: ArrayLike, requires_grad: bool = True) -> Var:
        """Record an input (parameter or data) node."""
        return self._append(value, "leaf", (), None, requires_grad)

    def constant(self, value: ArrayLike) -> Var:
        """Record a non-differentiable input node."""
        return self._append(value, "leaf", (), None, False)

    def replay(self) -> bool:
        """Re-execute every recorded op; True iff all values match bit-for-bit."""
        recomputed: dict[int, np.ndarray] = {}
        for node in self.nodes:
            if node.op == "leaf":
                recomputed[node.index] = node.value
            else:
                vals = [recomputed[p.index] for p in node.parents]
                recomputed[node.index] = _FORWARD[node.op](vals, node.aux)
            if not np.array_equal(recomputed[node.index], node.value):
                return False
        return True


def _find_tape(args) -> Tape:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands recorded on different tapes")
        return x
    return tape.constant(x)


def _record(op: str, args: Sequence, aux=None) -> Var:
    tape = _find_tape(args)
    parents = [_lift(tape, a) for a in args]
    value = _FORWARD[op]([p.value for p in parents], aux)
    requires_grad = any(p.requires_grad for p in parents)
    return tape._append(value, op, parents, aux, requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that broadcasting expanded."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive registry: forward(values, aux) and backward(g, values, out, aux).
# Backward returns one gradient per parent (None for non-differentiable slots).
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable] = {}
_BACKWARD: dict[str, Callable] = {}


def _primitive(name):
    def deco(pair):
        fwd, bwd = pair()
        _FORWARD[name] = fwd
        _BACKWARD[name] = bwd
        return pair
    return deco


@_primitive("add")
def _op_add():
    return (lambda v, aux: v[0] + v[1],
            lambda g, v, out, aux: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)))


@_primitive("sub")
def _op_sub():
    return (lambda v, aux: v[0] - v[1],
            lambda g, v, out, aux: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)))


@_primitive("mul")
def _op_mul():
    return (lambda v, aux: v[0] * v[1],
            lambda g, v, out, aux: (_unbroadcast(g * v[1], v[0].shape),
                                    _unbroadcast(g * v[0], v[1].shape)))


@_primitive("div")
def _op_div():
    return (lambda v, aux: v[0] / v[1],
            lambda g, v, out, aux: (_unbroadcast(g / v[1], v[0].shape),
                                    _unbroadcast(-g * v[0] / (v[1] ** 2), v[1].shape)))


@_primitive("neg")
def _op_neg():
    return (lambda v, aux: -v[0],
            lambda g, v, out, aux: (-g,))


@_primitive("matmul")
def _op_matmul():
    return (lambda v, aux: v[0] @ v[1],
            lambda g, v, out, aux: (g @ v[1].T, v[0].T @ g))


@_primitive("transpose")
def _op_transpose():
    return (lambda v, aux: v[0].T,
            lambda g, v, out, aux: (g.T,))


@_primitive("sum")
def _op_sum():
    def fwd(v, aux):
        axis, keepdims = aux
        return np.sum(v[0], axis=axis, keepdims=keepdims)

    def bwd(g, v, out, aux):
        axis, keepdims = aux
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v[0].shape).copy(),)

    return fwd, bwd


@_primitive("square")
def _op_square():
    return (lambda v, aux: v[0] ** 2,
            lambda g, v, out, aux: (2.0 * v[0] * g,))


@_primitive("sqrt")
def _op_sqrt():
    return (lambda v, aux: np.sqrt(v[0]),
            lambda g, v, out, aux: (0.5 * g / out,))


@_primitive("log")
def _op_log():
    return (lambda v, aux: np.log(v[0]),
            lambda g, v, out, aux: (g / v[0],))


@_primitive("exp")
def _op_exp():
    return (lambda v, aux: np.exp(v[0]),
            lambda g, v, out, aux: (g * out,))


@_primitive("reciprocal")
def _op_reciprocal():
    return (lambda v, aux: 1.0 / v[0],
            lambda g, v, out, aux: (-g * out * out,))


@_primitive("hinge")
def _op_hinge():
    # max(x, 0) with the subgradient at 0 taken on the inactive side (0).
    return (lambda v, aux: np.maximum(v[0], 0.0),
            lambda g, v, out, aux: (g * (v[0] > 0.0),))


@_primitive("relu_act")
def _op_relu_act():
    # Network activation: exact zeros belong to the non-negative region (slope 1).
    return (lambda v, aux: np.maximum(v[0], 0.0),
            lambda g, v, out, aux: (g * (v[0] >= 0.0),))


@_primitive("leaky_act")
def _op_leaky_act():
    def fwd(v, aux):
        slope = aux
        return np.where(v[0] >= 0.0, v[0], slope * v[0])

    def bwd(g, v, out, aux):
        slope = aux
        return (g * np.where(v[0] >= 0.0, 1.0, slope),)

    return fwd, bwd


@_primitive("abs_act")
def _op_abs_act():
    return (lambda v, aux: np.abs(v[0]),
            lambda g, v, out, aux: (g * np.where(v[0] >= 0.0, 1.0, -1.0),))


@_primitive("logsumexp")
def _op_logsumexp():
    def fwd(v, aux):
        axis = aux
        m = np.max(v[0], axis=axis, keepdims=True)
        return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(v[0] - m), axis=axis))

    def bwd(g, v, out, aux):
        axis = aux
        soft = np.exp(v[0] - np.expand_dims(out, axis))
        return (np.expand_dims(np.asarray(g), axis) * soft,)

    return fwd, bwd


@_primitive("logdet_psd")
def _op_logdet_psd():
    def fwd(v, aux):
        chol = np.linalg.cholesky(v[0])
        return np.asarray(2.0 * np.sum(np.log(np.diag(chol))))

    def bwd(g, v, out, aux):
        chol = np.linalg.cholesky(v[0])
        inv = sla.cho_solve((chol, True), np.eye(v[0].shape[0]))
        inv = 0.5 * (inv + inv.T)
        return (float(g) * inv,)

    return fwd, bwd


@_primitive("symmetrize")
def _op_symmetrize():
    return (lambda v, aux: 0.5 * (v[0] + v[0].T),
            lambda g, v, out, aux: (0.5 * (g + g.T),))


@_primitive("diag_part")
def _op_diag_part():
    def bwd(g, v, out, aux):
        gm = np.zeros_like(v[0])
        np.fill_diagonal(gm, g)
        return (gm,)

    return (lambda v, aux: np.diag(v[0]).copy(), bwd)


@_primitive("gather_rows")
def _op_gather_rows():
    def bwd(g, v, out, aux):
        gm = np.zeros_like(v[0])
        np.add.at(gm, aux, g)
        return (gm,)

    return (lambda v, aux: v[0][aux], bwd)


@_primitive("concat")
def _op_concat():
    def fwd(v, aux):
        return np.concatenate(v, axis=aux)

    def bwd(g, v, out, aux):
        sizes = [a.shape[aux] for a in v]
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=aux))

    return fwd, bwd


# ---------------------------------------------------------------------------
# Public op functions.
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    return _record("add", (a, b))


def sub(a, b) -> Var:
    return _record("sub", (a, b))


def mul(a, b) -> Var:
    return _record("mul", (a, b))


def div(a, b) -> Var:
    return _record("div", (a, b))


def neg(a) -> Var:
    return _record("neg", (a,))


def matmul(a, b) -> Var:
    return _record("matmul", (a, b))


def transpose(a) -> Var:
    return _record("transpose", (a,))


def sum_(a, axis=None, keepdims=False) -> Var:
    return _record("sum", (a,), (axis, keepdims))


def mean(a, axis=None, keepdims=False) -> Var:
    a = a if isinstance(a, Var) else _lift(_find_tape((a,)), a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def square(a) -> Var:
    return _record("square", (a,))


def sqrt(a) -> Var:
    return _record("sqrt", (a,))


def log(a) -> Var:
    return _record("log", (a,))


def exp(a) -> Var:
    return _record("exp", (a,))


def reciprocal(a) -> Var:
    return _record("reciprocal", (a,))


def hinge(a) -> Var:
    """max(a, 0); gradient 0 at the kink."""
    return _record("hinge", (a,))


def relu(a) -> Var:
    """Network ReLU; exact zeros take the slope of the non-negative side."""
    return _record("relu_act", (a,))


def leaky_relu(a, slope: float) -> Var:
    return _record("leaky_act", (a,), float(slope))


def abs_act(a) -> Var:
    return _record("abs_act", (a,))


def logsumexp(a, axis: int) -> Var:
    return _record("logsumexp", (a,), axis)


def logdet_psd(a) -> Var:
    """log det of a symmetric positive-definite matrix, via Cholesky."""
    return _record("logdet_psd", (a,))


def symmetrize(a) -> Var:
    return _record("symmetrize", (a,))


def diag_part(a) -> Var:
    return _record("diag_part", (a,))


def gather_rows(a, idx) -> Var:
    return _record("gather_rows", (a,), np.asarray(idx, dtype=np.intp))


def concat(vars_: Sequence, axis: int = 0) -> Var:
    return _record("concat", tuple(vars_), axis)


# ---------------------------------------------------------------------------
# Reverse sweep.
# ---------------------------------------------------------------------------

def grad(tape: Tape, root: Var) -> dict[Var, np.ndarray]:
    """Reverse-mode gradients of a recorded scalar with respect to every
    differentiable leaf.

    Also writes each leaf's gradient to its ``.grad`` attribute.  Raises
    :class:`NonScalarRootError` if ``root`` is not a scalar.
    """
    if root.tape is not tape:
        raise ValueError("root was recorded on a different tape")
    if root.value.size != 1:
        raise NonScalarRootError(f"gradient root must be scalar, got shape {root.value.shape}")

    adjoint: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    out: dict[Var, np.ndarray] = {}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = adjoint.pop(node.index, None)
        if g is None or not node.requires_grad:
            continue
        if node.op == "leaf":
            node.grad = g
            out[node] = g
            continue
        parent_grads = _BACKWARD[node.op](g, [p.value for p in node.parents], node.value, node.aux)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.index in adjoint:
                adjoint[parent.index] = adjoint[parent.index] + pg
            else:
                adjoint[parent.index] = np.asarray(pg, dtype=np.float64)
    return out
