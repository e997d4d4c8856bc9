"""Minimal reverse-mode differentiation over a flat tape of numpy primitives.

Every primitive accepts plain arrays or :class:`Var` handles.  With plain
arrays it simply evaluates, so the same loss code serves as the numeric
reference and as the differentiable training path.  As soon as one operand is
a :class:`Var`, the result is recorded on that operand's :class:`Tape`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "Var",
    "Gradients",
    "backward",
    "value_of",
    "add",
    "sub",
    "mul",
    "neg",
    "square",
    "absolute",
    "magnitude",
    "sum",
    "mean",
    "matmul",
    "affine",
    "reshape",
    "transpose",
    "take",
    "take_cols",
    "pad_cols",
    "gather_rows",
    "l2_normalize",
    "logsumexp",
    "stop_gradient",
    "ste_quantize",
    "fd_check",
    "SGD",
]


class Var:
    """Handle to a node recorded on a tape."""

    __slots__ = ("tape", "index")
    # make ``ndarray <op> Var`` defer to the Var's reflected operator
    __array_priority__ = 1000

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.index]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __len__(self) -> int:
        return len(self.value)

    def __repr__(self) -> str:
        return f"Var(#{self.index}, op={self.tape._ops[self.index]!r}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass(frozen=True)
class TapeEntry:
    op: str
    inputs: tuple[int | None, ...]
    output: int


class Tape:
    """Ordered record of primitive applications (a Wengert list)."""

    def __init__(self) -> None:
        self._values: list[np.ndarray] = []
        self._ops: list[str] = []
        self._parents: list[tuple[int | None, ...]] = []
        self._vjps: list[Callable | None] = []

    def __len__(self) -> int:
        return len(self._values)

    def leaf(self, value) -> Var:
        return self._push("leaf", np.asarray(value, dtype=np.float64), (), None)

    @property
    def entries(self) -> list[TapeEntry]:
        return [TapeEntry(op, parents, i) for i, (op, parents) in enumerate(zip(self._ops, self._parents))]

    def _push(self, op, value, parents, vjp) -> Var:
        self._values.append(value)
        self._ops.append(op)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(self, len(self._values) - 1)

    def record(self, op: str, value: np.ndarray, inputs: Sequence, vjp: Callable) -> Var:
        parents = tuple(x.index if isinstance(x, Var) else None for x in inputs)
        return self._push(op, value, parents, vjp)

    def backward(self, output: Var) -> Gradients:
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[output.index] = np.ones_like(output.value)
        for i in range(output.index, -1, -1):
            g = grads[i]
            parents = self._parents[i]
            if g is None or not parents:
                continue
            contributions = self._vjps[i](g)
            for p, c in zip(parents, contributions):
                if p is None or c is None:
                    continue
                grads[p] = c if grads[p] is None else grads[p] + c
        return Gradients(self, grads)


class Gradients:
    """Gradient lookup keyed by :class:`Var`; unreached nodes get zeros."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        g = self._grads[var.index]
        return np.zeros_like(var.value) if g is None else g

    def reached(self, var: Var) -> bool:
        return self._grads[var.index] is not None


def backward(output: Var) -> Gradients:
    return output.tape.backward(output)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is not None and a.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = a.tape
    return tape


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b):
    va, vb = value_of(a), value_of(b)
    out = va + vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ga, gb = isinstance(a, Var), isinstance(b, Var)
    return tape.record(
        "add", out, (a, b), lambda g: (_unbroadcast(g, va.shape) if ga else None, _unbroadcast(g, vb.shape) if gb else None)
    )


def sub(a, b):
    va, vb = value_of(a), value_of(b)
    out = va - vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ga, gb = isinstance(a, Var), isinstance(b, Var)
    return tape.record(
        "sub", out, (a, b), lambda g: (_unbroadcast(g, va.shape) if ga else None, -_unbroadcast(g, vb.shape) if gb else None)
    )


def mul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va * vb
    tape = _tape_of(a, b)
    if tape is None:
        return out
    ga, gb = isinstance(a, Var), isinstance(b, Var)
    return tape.record(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * vb, va.shape) if ga else None, _unbroadcast(g * va, vb.shape) if gb else None),
    )


def neg(a):
    return mul(a, -1.0)


def square(a):
    va = value_of(a)
    out = va * va
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("square", out, (a,), lambda g: (2.0 * va * g,))


def absolute(a):
    va = value_of(a)
    out = np.abs(va)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("abs", out, (a,), lambda g: (np.sign(va) * g,))


def magnitude(re, im):
    """Elementwise ``sqrt(re**2 + im**2)``; the subgradient at 0 is taken as 0."""
    vr, vi = value_of(re), value_of(im)
    out = np.hypot(vr, vi)
    tape = _tape_of(re, im)
    if tape is None:
        return out

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        scale = np.where(out > 0.0, g / safe, 0.0)
        return scale * vr, scale * vi

    return tape.record("magnitude", out, (re, im), vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    va = value_of(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return tape.record("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    va = value_of(a)
    n = va.size if axis is None else np.prod([va.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b):
    va, vb = value_of(a), value_of(b)
    out = va @ vb
    tape = _tape_of(a, b)
    if tape is None:
        return out

    need_a, need_b = isinstance(a, Var), isinstance(b, Var)

    def vjp(g):
        ga = gb = None
        if need_a:
            ga = g @ vb.T if vb.ndim == 2 else np.multiply.outer(g, vb)
        if need_b:
            gb = va.T @ g if va.ndim == 2 else np.multiply.outer(va, g)
        return ga, gb

    return tape.record("matmul", out, (a, b), vjp)


def affine(x, weight, bias):
    """Row-wise ``x @ weight + bias``."""
    return add(matmul(x, weight), bias)


def reshape(a, shape):
    va = value_of(a)
    out = va.reshape(shape)
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("reshape", out, (a,), lambda g: (g.reshape(va.shape),))


def transpose(a):
    va = value_of(a)
    out = va.T
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("transpose", out, (a,), lambda g: (g.T,))


def take(a, index):
    """Fancy-index gather ``a[index]`` along the first axis (repeats allowed)."""
    va = value_of(a)
    index = np.asarray(index)
    out = va[index]
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        acc = np.zeros_like(va)
        np.add.at(acc, index, g)
        return (acc,)

    return tape.record("take", out, (a,), vjp)


def gather_rows(table, index):
    """Rows of ``table`` selected by integer ``index``; gradient scatters back."""
    return take(table, index)


def take_cols(a, width: int):
    """Keep the first ``width`` columns; the dropped columns get zero gradient."""
    va = value_of(a)
    out = va[:, :width]
    tape = _tape_of(a)
    if tape is None:
        return out.copy()

    def vjp(g):
        full = np.zeros_like(va)
        full[:, :width] = g
        return (full,)

    return tape.record("take_cols", out.copy(), (a,), vjp)


def pad_cols(a, width: int):
    """Zero-pad columns on the right up to ``width``."""
    va = value_of(a)
    if va.shape[1] > width:
        raise ValueError(f"cannot pad {va.shape[1]} columns down to {width}")
    out = np.zeros((va.shape[0], width))
    out[:, : va.shape[1]] = va
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record("pad_cols", out, (a,), lambda g: (g[:, : va.shape[1]],))


def l2_normalize(a):
    """Scale each row to unit Euclidean norm.  All-zero rows are an error."""
    va = value_of(a)
    norms = np.sqrt(np.sum(va * va, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize an all-zero row")
    out = va / norms
    tape = _tape_of(a)
    if tape is None:
        return out

    def vjp(g):
        return ((g - out * np.sum(g * out, axis=-1, keepdims=True)) / norms,)

    return tape.record("l2_normalize", out, (a,), vjp)


def logsumexp(a, axis=-1):
    """Max-shifted log-sum-exp along ``axis`` (reduced axis is dropped)."""
    va = value_of(a)
    m = np.max(va, axis=axis, keepdims=True)
    shifted = np.exp(va - m)
    s = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    tape = _tape_of(a)
    if tape is None:
        return out
    softmax = shifted / s
    return tape.record("logsumexp", out, (a,), lambda g: (np.expand_dims(g, axis) * softmax,))


def stop_gradient(a):
    """Identity forward, zero Jacobian backward."""
    va = value_of(a)
    tape = _tape_of(a)
    if tape is None:
        return va
    return tape.record("stop_gradient", va, (a,), lambda g: (None,))


def ste_quantize(zc_hat, vectors):
    """Nearest-code quantization with a straight-through gradient.

    Returns ``(codes, zq_hat)``.  The forward value of ``zq_hat`` is exactly the
    selected code vector; backward passes the upstream gradient to ``zc_hat``
    unchanged.  ``vectors`` is read by value only: route codebook gradients
    through :func:`gather_rows` instead.
    """
    from .quantizer import nearest_codes

    table = value_of(vectors)
    codes = nearest_codes(value_of(zc_hat), table)
    out = table[codes]
    tape = _tape_of(zc_hat)
    if tape is None:
        return codes, out
    return codes, tape.record("ste_quantize", out, (zc_hat,), lambda g: (g,))


# --------------------------------------------------------------- checking


def fd_check(op: Callable, point, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``op`` maps one array (or several, when ``point`` is a tuple) to a scalar
    and must be built from this module's primitives.  The error is measured
    per input as ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    points = point if isinstance(point, tuple) else (point,)
    points = tuple(np.array(p, dtype=np.float64) for p in points)

    tape = Tape()
    leaves = [tape.leaf(p) for p in points]
    out = op(*leaves)
    if not isinstance(out, Var):
        raise ValueError("op did not record onto the tape")
    grads = tape.backward(out)

    worst = 0.0
    for k, p in enumerate(points):
        analytic = grads[leaves[k]]
        numeric = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            args_hi = [q.copy() for q in points]
            args_lo = [q.copy() for q in points]
            args_hi[k][idx] += eps
            args_lo[k][idx] -= eps
            # divide by the step actually taken after rounding
            step = args_hi[k][idx] - args_lo[k][idx]
            hi = float(np.asarray(op(*args_hi)))
            lo = float(np.asarray(op(*args_lo)))
            numeric[idx] = (hi - lo) / step
        scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return worst


class SGD:
    """Plain stochastic gradient descent over named parameter arrays."""

    def __init__(self, lr: float = 0.05):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0.0:
            return
        for name, g in grads.items():
            params[name] -= self.lr * g
