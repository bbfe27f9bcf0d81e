"""A small reverse-mode differentiation engine over float64 numpy arrays.

Every primitive appends a node to the :class:`Tape` that owns its inputs;
:func:`backward` walks that tape once in reverse and accumulates gradients.
Only what the encoder, the per-step MLPs and the loss need is provided.

Local gradient rules live in ``GRAD_RULES`` keyed by primitive name, so a rule
can be swapped out (the gradient checker's negative control does exactly that).
"""

from __future__ import annotations

import functools
import math
from typing import Callable

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("value", "tape", "op", "inputs", "ctx", "requires_grad", "name", "__weakref__")

    def __init__(self, value, tape, op="leaf", inputs=(), ctx=None, requires_grad=False,
                 name=None):
        self.value = value
        self.tape = tape
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} op={self.op} shape={self.shape}>"

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

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records tensors in creation order, which is a valid topological order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def leaf(self, value, name=None) -> Tensor:
        """A differentiable input (a parameter or a point set being optimized)."""
        return self._record(Tensor(_as_array(value), self, requires_grad=True, name=name))

    def constant(self, value, name=None) -> Tensor:
        return self._record(Tensor(_as_array(value), self, op="const", name=name))

    def _record(self, t: Tensor) -> Tensor:
        self.nodes.append(t)
        return t


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("non-finite value entering the tape")
    return arr


def _lift(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors belong to different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TypeError("at least one operand must be a Tensor")


def _emit(op: str, value: np.ndarray, inputs: tuple, ctx=None) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    tape = inputs[0].tape
    grad = any(t.requires_grad for t in inputs)
    return tape._record(Tensor(value, tape, op, inputs, ctx, requires_grad=grad))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _quiet(fn):
    # overflow shows up as a NonFiniteError from _emit, not as a numpy warning
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        with np.errstate(over="ignore", invalid="ignore"):
            return fn(*args, **kwargs)
    return wrapper


# --------------------------------------------------------------------------
# Primitives


@_quiet
def add(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("add", a, b)
    return _emit("add", a.value + b.value, (a, b))


@_quiet
def sub(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.value - b.value, (a, b))


@_quiet
def mul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _check_broadcast("mul", a, b)
    return _emit("mul", a.value * b.value, (a, b))


@_quiet
def matmul(a, b) -> Tensor:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _emit("matmul", a.value @ b.value, (a, b))


def concat(xs, axis: int = 0) -> Tensor:
    tape = _tape_of(*xs)
    xs = tuple(_lift(x, tape) for x in xs)
    try:
        value = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} "
                         f"along axis {axis}") from None
    sizes = [x.shape[axis] for x in xs]
    return _emit("concat", value, xs, (axis, np.cumsum(sizes)[:-1]))


def concat_rows(xs) -> Tensor:
    return concat(xs, axis=0)


def concat_cols(xs) -> Tensor:
    return concat(xs, axis=1)


def relu(x: Tensor) -> Tensor:
    return _emit("relu", np.maximum(x.value, 0.0), (x,))


def tanh(x: Tensor) -> Tensor:
    return _emit("tanh", np.tanh(x.value), (x,))


@_quiet
def square(x: Tensor) -> Tensor:
    return _emit("square", x.value * x.value, (x,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries (correctly rounded, independent of layout)."""
    return _emit("sum", np.array(math.fsum(x.value.ravel().tolist())), (x,))


def mean(x: Tensor) -> Tensor:
    return _emit("mean", np.array(math.fsum(x.value.ravel().tolist()) / x.value.size), (x,))


def _rows_2d(op: str, x: Tensor):
    if x.value.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"{op}: expected a nonempty 2-D tensor, got shape {x.shape}")


def mean_rows(x: Tensor) -> Tensor:
    """Average over rows, shape ``(n, c) -> (1, c)``. Rows are added in index order."""
    _rows_2d("mean_rows", x)
    acc = x.value[0].copy()
    for row in x.value[1:]:
        acc += row
    return _emit("mean_rows", (acc / x.shape[0])[None, :], (x,))


def max_rows(x: Tensor) -> Tensor:
    """Column-wise max over rows; the gradient goes to the first maximizing row."""
    _rows_2d("max_rows", x)
    arg = np.argmax(x.value, axis=0)
    return _emit("max_rows", x.value[arg, np.arange(x.shape[1])][None, :], (x,), arg)


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Tile a ``(1, c)`` row ``n`` times."""
    if x.value.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_rows: expected shape (1, c), got {x.shape}")
    return _emit("repeat_rows", np.repeat(x.value, n, axis=0), (x,))


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if x.value.ndim < 1 or (len(idx) and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise ShapeError(f"take_rows: indices out of range for shape {x.shape}")
    return _emit("take_rows", x.value[idx], (x,), idx)


@_quiet
def row_sqnorm(x: Tensor) -> Tensor:
    """Squared norm of each row, ``(n, c) -> (n,)``, columns accumulated left to right."""
    if x.value.ndim != 2:
        raise ShapeError(f"row_sqnorm: expected a 2-D tensor, got shape {x.shape}")
    v = x.value
    acc = v[:, 0] * v[:, 0]
    for k in range(1, v.shape[1]):
        acc = acc + v[:, k] * v[:, k]
    return _emit("row_sqnorm", acc, (x,))


# --------------------------------------------------------------------------
# Local gradient rules: rule(node, upstream) -> one gradient per input


def _g_add(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _g_sub(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _g_mul(node, g):
    a, b = node.inputs
    return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)


def _g_matmul(node, g):
    a, b = node.inputs
    return g @ b.value.T, a.value.T @ g


def _g_concat(node, g):
    axis, cuts = node.ctx
    return tuple(np.split(g, cuts, axis=axis))


def _g_relu(node, g):
    # relu'(0) is taken as 0
    return (g * (node.inputs[0].value > 0),)


def _g_tanh(node, g):
    return (g * (1.0 - node.value * node.value),)


def _g_square(node, g):
    return (2.0 * node.inputs[0].value * g,)


def _g_sum(node, g):
    return (np.full(node.inputs[0].shape, float(g)),)


def _g_mean(node, g):
    x = node.inputs[0]
    return (np.full(x.shape, float(g) / x.value.size),)


def _g_mean_rows(node, g):
    x = node.inputs[0]
    return (np.broadcast_to(g / x.shape[0], x.shape).copy(),)


def _g_max_rows(node, g):
    x = node.inputs[0]
    out = np.zeros(x.shape)
    out[node.ctx, np.arange(x.shape[1])] = g[0]
    return (out,)


def _g_repeat_rows(node, g):
    return (g.sum(axis=0, keepdims=True),)


def _g_take_rows(node, g):
    out = np.zeros(node.inputs[0].shape)
    np.add.at(out, node.ctx, g)
    return (out,)


def _g_row_sqnorm(node, g):
    return (2.0 * node.inputs[0].value * g[:, None],)


GRAD_RULES: dict[str, Callable] = {
    "add": _g_add,
    "sub": _g_sub,
    "mul": _g_mul,
    "matmul": _g_matmul,
    "concat": _g_concat,
    "relu": _g_relu,
    "tanh": _g_tanh,
    "square": _g_square,
    "sum": _g_sum,
    "mean": _g_mean,
    "mean_rows": _g_mean_rows,
    "max_rows": _g_max_rows,
    "repeat_rows": _g_repeat_rows,
    "take_rows": _g_take_rows,
    "row_sqnorm": _g_row_sqnorm,
}


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every leaf on ``tape``.

    Leaves that the loss does not depend on get zero gradients.
    """
    if loss.tape is not tape:
        raise ValueError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None) if node.inputs else grads.get(id(node))
        if g is None or not node.inputs:
            continue
        local = GRAD_RULES[node.op](node, g)
        for inp, gi in zip(node.inputs, local):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(inp.shape)
    return {t: grads.get(id(t), np.zeros(t.shape))
            for t in tape.nodes if t.op == "leaf"}


# --------------------------------------------------------------------------
# Finite-difference checking


def grad_check(f: Callable, params: dict, epsilon: float = 1e-5, probes: int | None = None,
               seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f(tape, leaves)`` builds a scalar loss from ``leaves`` (a dict of tensors
    matching ``params``). Relative error is ``|a - n| / max(1, |a|, |n|)``.
    With ``probes`` set, that many coordinates are drawn at random across all
    parameters; otherwise every coordinate is checked.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value_at(vals) -> float:
        tape = Tape()
        out = f(tape, {k: tape.leaf(v, name=k) for k, v in vals.items()})
        v = float(out.value)
        if not math.isfinite(v):
            raise NonFiniteError("objective is non-finite at a probe point")
        return v

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in params.items()}
    loss = f(tape, leaves)
    grads = backward(tape, loss)
    analytic = {k: grads[t] for k, t in leaves.items()}

    coords = [(k, i) for k, v in params.items() for i in range(v.size)]
    if probes is not None and probes < len(coords):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=probes, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for k, i in coords:
        base = params[k]
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += epsilon
        minus.flat[i] -= epsilon
        fp = value_at({**params, k: plus})
        fm = value_at({**params, k: minus})
        numeric = (fp - fm) / (2.0 * epsilon)
        a = float(analytic[k].flat[i])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
