"""A small reverse-mode differentiation engine over numpy arrays.

Values are float64 arrays. Elementwise binary operations accept operands of
identical shape, or a scalar paired with anything; every other shape mix is a
:class:`ShapeError`. Batched linear algebra goes through :func:`matvec` and
:func:`scale`, which state their shape contracts explicitly.

Typical use::

    tape = Tape()
    x = tape.var(np.random.rand(8, 8))
    y = ad.sum(ad.sigmoid(x) * x)
    grads = tape.backward(y)
    grads[x]
"""

from __future__ import annotations

import builtins
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    """Forward evaluation outside an operation's domain."""


class Var:
    __slots__ = ("tape", "id", "value", "requires_grad")
    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, tape: "Tape", value, requires_grad: bool):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.id = tape._new_id()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class _Node:
    out: int
    inputs: tuple[Var, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Gradients(dict):
    """Adjoints keyed by Var id; indexing with a Var is also accepted."""

    def __init__(self, data, shapes):
        super().__init__(data)
        self._shapes = shapes

    def __getitem__(self, key):
        vid = key.id if isinstance(key, Var) else key
        if vid in self:
            return dict.__getitem__(self, vid)
        if vid in self._shapes:
            return np.zeros(self._shapes[vid])
        raise KeyError(key)


class Tape:
    """Append-only record of operations; one per evaluation."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._count = 0
        self._leaves: dict[int, tuple[int, ...]] = {}

    def _new_id(self) -> int:
        self._count += 1
        return self._count

    def var(self, value, requires_grad: bool = True) -> Var:
        v = Var(self, value, requires_grad)
        if requires_grad:
            self._leaves[v.id] = v.shape
        return v

    def const(self, value) -> Var:
        return Var(self, value, False)

    def record(self, value, inputs: tuple[Var, ...], vjp, op: str) -> Var:
        needs = builtins.any(v.requires_grad for v in inputs)
        out = Var(self, value, needs)
        if needs:
            self.nodes.append(_Node(out.id, inputs, vjp, op))
        return out

    def backward(self, output: Var) -> Gradients:
        """Adjoints of scalar ``output`` with respect to every leaf variable."""
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.shape != ():
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.id: np.ones(())}
        for node in reversed(self.nodes):
            g = grads.pop(node.out, None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        out = {k: np.asarray(v, dtype=np.float64) for k, v in grads.items() if k in self._leaves}
        return Gradients(out, dict(self._leaves))

    def grad(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        g = self.backward(output)
        return [g[v] for v in wrt]


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a Var")


def _lift(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("operands belong to different tapes")
        return x
    return tape.const(x)


def _pair(a, b) -> tuple[Var, Var]:
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Var:
    a, b = _pair(a, b)
    return a.tape.record(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    return a.tape.record(
        a.value - b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul",
    )


def div(a, b) -> Var:
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    return a.tape.record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)), "div",
    )


def _minmax(a, b, pick_a: np.ndarray, out: np.ndarray, op: str) -> Var:
    tie = a.value == b.value
    wa = np.where(tie, 0.5, pick_a.astype(np.float64))
    wb = 1.0 - wa
    return a.tape.record(
        out, (a, b),
        lambda g: (_unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)), op,
    )


def min2(a, b) -> Var:
    """Elementwise minimum; on ties the adjoint is split evenly."""
    a, b = _pair(a, b)
    return _minmax(a, b, a.value < b.value, np.minimum(a.value, b.value), "min2")


def max2(a, b) -> Var:
    """Elementwise maximum; on ties the adjoint is split evenly."""
    a, b = _pair(a, b)
    return _minmax(a, b, a.value > b.value, np.maximum(a.value, b.value), "max2")


# ----------------------------------------------------------------- unary ops


def _unary(x, out, dfdx, op) -> Var:
    return x.tape.record(out, (x,), lambda g: (g * dfdx,), op)


def neg(x: Var) -> Var:
    return x.tape.record(-x.value, (x,), lambda g: (-g,), "neg")


def abs(x: Var) -> Var:
    return _unary(x, np.abs(x.value), np.sign(x.value), "abs")


def log1p(x: Var) -> Var:
    if np.any(x.value <= -1):
        raise DomainError("log1p of a value <= -1")
    return _unary(x, np.log1p(x.value), 1.0 / (1.0 + x.value), "log1p")


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return _unary(x, out, out, "exp")


def sqrt(x: Var) -> Var:
    if np.any(x.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.value)
    with np.errstate(divide="ignore"):
        d = 0.5 / out
    return _unary(x, out, d, "sqrt")


def sigmoid(x: Var) -> Var:
    s = expit(x.value)
    return _unary(x, s, s * (1.0 - s), "sigmoid")


def softplus(x: Var) -> Var:
    return _unary(x, np.logaddexp(0.0, x.value), expit(x.value), "softplus")


def tanh(x: Var) -> Var:
    t = np.tanh(x.value)
    return _unary(x, t, 1.0 - t * t, "tanh")


def gelu(x: Var) -> Var:
    """GELU, tanh approximation, with its exact derivative."""
    v = x.value
    # in-place arithmetic: these arrays are large on the emulator's pixel path
    v2 = v * v
    t = v2 * _GELU_A
    t += 1.0
    t *= v
    t *= _GELU_C
    np.tanh(t, out=t)
    half = t + 1.0
    half *= 0.5
    out = v * half
    sech2 = t * t
    np.subtract(1.0, sech2, out=sech2)
    v2 *= 3.0 * _GELU_A
    v2 += 1.0
    sech2 *= v2
    sech2 *= v
    sech2 *= 0.5 * _GELU_C
    sech2 += half
    return _unary(x, out, sech2, "gelu")


def relu(x: Var) -> Var:
    return max2(x, 0.0)


# --------------------------------------------------------------- structural


def sum(x: Var, axis: int | None = None) -> Var:
    """Sum of all elements (a scalar), or along one ``axis``."""
    shape = x.shape
    if axis is None:
        return x.tape.record(np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    return x.tape.record(
        x.value.sum(axis=axis), (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),), "sum",
    )


def max(x: Var, axis: int) -> Var:
    """Maximum along ``axis``; the adjoint is shared evenly among tied maxima."""
    out = x.value.max(axis=axis)
    hit = (x.value == np.expand_dims(out, axis)).astype(np.float64)
    hit /= hit.sum(axis=axis, keepdims=True)
    return x.tape.record(out, (x,), lambda g: (np.expand_dims(g, axis) * hit,), "max")


def reshape(x: Var, shape) -> Var:
    old = x.shape
    return x.tape.record(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def stack(xs: Sequence[Var], axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = tuple(_lift(t, x) for x in xs)
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out = np.stack([x.value for x in xs], axis=axis)
    return t.record(out, xs, lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def mean(x: Var) -> Var:
    return sum(x) * (1.0 / x.size)


def shift(x: Var, dy: int, dx: int) -> Var:
    """Translate the last two axes by ``(dy, dx)`` with zero fill.

    ``out[..., i, j] = x[..., i - dy, j - dx]``.
    """
    if x.value.ndim < 2:
        raise ShapeError("shift needs at least two axes")
    return x.tape.record(_shift(x.value, dy, dx), (x,), lambda g: (_shift(g, -dy, -dx),), "shift")


def _shift(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = a.shape[-2:]
    out = np.zeros_like(a)
    if builtins.abs(dy) >= h or builtins.abs(dx) >= w:
        return out
    src_y = builtins.slice(builtins.max(0, -dy), h - builtins.max(0, dy))
    dst_y = builtins.slice(builtins.max(0, dy), h - builtins.max(0, -dy))
    src_x = builtins.slice(builtins.max(0, -dx), w - builtins.max(0, dx))
    dst_x = builtins.slice(builtins.max(0, dx), w - builtins.max(0, -dx))
    out[..., dst_y, dst_x] = a[..., src_y, src_x]
    return out


def slice_(x: Var, index) -> Var:
    """``x[index]`` for any numpy index (basic or advanced)."""
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return x.tape.record(np.array(x.value[index]), (x,), vjp, "slice")


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    t = _tape_of(*xs)
    xs = tuple(_lift(t, x) for x in xs)
    out = np.concatenate([x.value for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return t.record(out, xs, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def softmax(x: Var, axis: int = -1) -> Var:
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return x.tape.record(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def cumsum(x: Var, axis: int = -1, reverse: bool = False) -> Var:
    """Cumulative sum; with ``reverse`` each entry sums itself and everything after it."""
    def fwd(a):
        if reverse:
            return np.flip(np.cumsum(np.flip(a, axis), axis=axis), axis)
        return np.cumsum(a, axis=axis)

    def bwd(g):
        if reverse:
            return np.cumsum(g, axis=axis)
        return np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)

    return x.tape.record(fwd(x.value), (x,), lambda g: (bwd(g),), "cumsum")


def dot(a, b) -> Var:
    """Full contraction of two same-shape operands to a scalar."""
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    if a.shape != b.shape:
        raise ShapeError(f"dot needs equal shapes, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return t.record(np.asarray(np.vdot(av, bv)), (a, b), lambda g: (g * bv, g * av), "dot")


def matvec(w, x, bias=None) -> Var:
    """``W @ x (+ bias)`` for ``x`` of shape ``(n,)`` or a batch ``(B, n)``.

    ``W`` is ``(m, n)``; ``bias`` is ``(m,)``. A batch returns ``(B, m)``.
    """
    t = _tape_of(w, x, bias)
    w, x = _lift(t, w), _lift(t, x)
    b = None if bias is None else _lift(t, bias)
    if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"matvec shapes {w.shape} x {x.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} for {w.shape[0]} outputs")
    wv, xv = w.value, x.value
    out = xv @ wv.T
    if b is not None:
        out = out + b.value
    batched = xv.ndim == 2

    def vjp(g):
        gw = g.T @ xv if batched else np.outer(g, xv)
        gx = g @ wv
        gb = g.sum(axis=0) if batched else g
        return (gw, gx, gb) if b is not None else (gw, gx)

    inputs = (w, x, b) if b is not None else (w, x)
    return t.record(out, inputs, vjp, "matvec")


def scale(x, s) -> Var:
    """Multiply ``x`` by ``s`` broadcast over the last axis.

    ``s`` is a scalar or has shape ``x.shape[:-1]`` (one factor per row).
    """
    t = _tape_of(x, s)
    x, s = _lift(t, x), _lift(t, s)
    if s.shape == ():
        return mul(x, s)
    if s.shape != x.shape[:-1]:
        raise ShapeError(f"scale factor shape {s.shape} for operand {x.shape}")
    xv, sv = x.value, s.value
    return t.record(
        xv * sv[..., None], (x, s),
        lambda g: (g * sv[..., None], (g * xv).sum(axis=-1)), "scale",
    )


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "sum": sum,
    "abs": abs, "log1p": log1p, "exp": exp, "sqrt": sqrt, "sigmoid": sigmoid,
    "softplus": softplus, "gelu": gelu, "tanh": tanh, "min2": min2, "max2": max2,
    "shift": shift, "slice": slice_, "concat": concat, "softmax": softmax,
    "cumsum": cumsum, "dot": dot, "matvec": matvec, "scale": scale,
    "reshape": reshape, "stack": stack, "max": max,
}
