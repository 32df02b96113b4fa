"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to the tensors created on it.
Each recorded node keeps a vector-Jacobian product closure, so calling
:meth:`Tape.backward` on a scalar output walks the nodes once in reverse order.
Tapes are cheap and meant to be rebuilt for every optimisation step::

    tape = Tape()
    w = tape.leaf(np.array([1.0, -2.0]))
    loss = mean(square(matmul(X, w) - y))
    grads = tape.backward(loss, [w])

The module also carries the Adam optimiser and a central finite-difference
gradient used as an independent oracle in tests.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "square",
    "sqrt",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "sum_",
    "mean",
    "stack",
    "reshape",
    "variance",
    "squared_error",
    "logistic_loss",
    "softmax_cross_entropy",
    "detach",
    "finite_diff_grad",
    "AdamState",
    "adam_init",
    "adam_step",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """Value recorded on a tape. Immutable once created."""

    __slots__ = ("data", "tape", "idx")

    def __init__(self, data: np.ndarray, tape: "Tape", idx: int):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.idx})"

    __array_priority__ = 100.0

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tape:
    """Append-only record of operations; nodes are stored in creation order."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str = "leaf") -> Tensor:
        data = np.array(value, dtype=np.float64)
        return self._push(name, data, (), None)

    def constant(self, value) -> Tensor:
        return self._push("const", np.array(value, dtype=np.float64), (), None)

    def _push(self, op, data, inputs, vjp) -> Tensor:
        idx = len(self.nodes)
        self.nodes.append(_Node(op, inputs, vjp))
        self.values.append(data)
        return Tensor(data, self, idx)

    def record(self, op, data, inputs: Sequence[Tensor], vjp) -> Tensor:
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op}: produced non-finite values")
        return self._push(op, data, tuple(t.idx for t in inputs), vjp)

    def backward(self, output: Tensor, wrt: Sequence[Tensor] | Mapping[str, Tensor]):
        """Gradients of the scalar ``output`` with respect to ``wrt``.

        Nothing is accumulated on the tape, so repeated calls return identical
        arrays. ``wrt`` may be a sequence (a list is returned) or a mapping (a
        dict with the same keys is returned).
        """
        if output.tape is not self:
            raise ValueError("backward: output was recorded on a different tape")
        if output.data.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
        grads: list[np.ndarray | None] = [None] * (output.idx + 1)
        grads[output.idx] = np.ones_like(output.data)
        for i in range(output.idx, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.vjp is None:
                continue
            for j, gj in zip(node.inputs, node.vjp(g)):
                if gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj

        def grad_of(t: Tensor) -> np.ndarray:
            if t.tape is not self:
                raise ValueError("backward: requested tensor is on a different tape")
            g = grads[t.idx] if t.idx < len(grads) else None
            return np.zeros_like(t.data) if g is None else np.array(g, dtype=np.float64)

        if isinstance(wrt, Mapping):
            return {k: grad_of(t) for k, t in wrt.items()}
        return [grad_of(t) for t in wrt]


# ----------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands live on different tapes")
    if tape is None:
        raise TypeError("at least one operand must be a Tensor")
    return tape


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _binary(op, a, b, fwd, da, db) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    _broadcast_shape(op, av, bv)
    out = fwd(av, bv)
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    inputs = [t for t in (a, b) if isinstance(t, Tensor)]

    def vjp(g):
        res = []
        if a_t:
            res.append(_unbroadcast(da(g, av, bv, out), av.shape))
        if b_t:
            res.append(_unbroadcast(db(g, av, bv, out), bv.shape))
        return tuple(res)

    return tape.record(op, out, inputs, vjp)


def _unary(op, x: Tensor, out: np.ndarray, dx) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"{op}: expected a Tensor")
    return x.tape.record(op, out, [x], lambda g: (dx(g),))


# ----------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, *_: g, lambda g, *_: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, *_: g, lambda g, *_: -g)


def mul(a, b) -> Tensor:
    return _binary(
        "mul", a, b, np.multiply,
        lambda g, av, bv, _: g * bv,
        lambda g, av, bv, _: g * av,
    )


def div(a, b) -> Tensor:
    bv = _val(b)
    if np.any(bv == 0):
        raise DomainError("div: division by zero")
    return _binary(
        "div", a, b, np.divide,
        lambda g, av, bv, _: g / bv,
        lambda g, av, bv, out: -g * out / bv,
    )


def neg(x: Tensor) -> Tensor:
    return _unary("neg", x, -x.data, lambda g: -g)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary("scale", x, c * x.data, lambda g: c * g)


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D and 1-D @ 2-D operands."""
    tape = _tape_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or (av.ndim == 1 and bv.ndim == 1):
        raise ShapeError(f"matmul: unsupported shapes {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {av.shape} and {bv.shape}")
    out = av @ bv
    inputs = [t for t in (a, b) if isinstance(t, Tensor)]

    def vjp(g):
        res = []
        if isinstance(a, Tensor):
            if bv.ndim == 1:
                ga = np.outer(g, bv)
            elif av.ndim == 1:
                ga = bv @ g
            else:
                ga = g @ bv.T
            res.append(ga)
        if isinstance(b, Tensor):
            if bv.ndim == 1:
                gb = av.T @ g
            elif av.ndim == 1:
                gb = np.outer(av, g)
            else:
                gb = av.T @ g
            res.append(gb)
        return tuple(res)

    return tape.record("matmul", out, inputs, vjp)


def square(x: Tensor) -> Tensor:
    xv = x.data
    return _unary("square", x, xv * xv, lambda g: 2.0 * xv * g)


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("sqrt: non-positive input")
    out = np.sqrt(x.data)
    return _unary("sqrt", x, out, lambda g: 0.5 * g / out)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary("exp", x, out, lambda g: g * out)


def log(x: Tensor) -> Tensor:
    xv = x.data
    if np.any(xv <= 0):
        bad = int(np.sum(xv <= 0))
        raise DomainError(f"log: {bad} non-positive value(s), min={xv.min():.3g}")
    return _unary("log", x, np.log(xv), lambda g: g / xv)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary("relu", x, np.where(mask, x.data, 0.0), lambda g: g * mask)


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(np.atleast_1d(x.data)).reshape(x.data.shape)
    return _unary("sigmoid", x, s, lambda g: g * s * (1.0 - s))


# ----------------------------------------------------------------------------
# reductions and shape


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis)

    def dx(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return _unary("sum", x, np.asarray(out, dtype=np.float64), dx)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean: empty tensor")
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return _unary("reshape", x, out, lambda g: g.reshape(old))


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    if not xs:
        raise ShapeError("stack: empty list")
    tape = _tape_of(*xs)
    shapes = {t.shape for t in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.data for t in xs])
    return tape.record("stack", out, list(xs), lambda g: tuple(g[i] for i in range(len(xs))))


def variance(xs: Sequence[Tensor] | Tensor) -> Tensor:
    """Population variance of a list of scalars (or of a 1-D tensor)."""
    v = stack([reshape(t, ()) for t in xs]) if not isinstance(xs, Tensor) else xs
    centred = v - mean(v)
    return mean(square(centred))


def detach(x: Tensor) -> Tensor:
    return x.tape.constant(x.data)


# ----------------------------------------------------------------------------
# per-sample losses


def _check_same(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: prediction shape {a.shape} and label shape {b.shape} differ")


def squared_error(pred: Tensor, y) -> Tensor:
    """Per-sample (pred - y)**2."""
    yv = np.asarray(y, dtype=np.float64)
    _check_same("squared_error", pred.data, yv)
    return square(pred - yv)


def logistic_loss(logit: Tensor, y) -> Tensor:
    """Per-sample binary cross-entropy on logits with labels in {0, 1}."""
    yv = np.asarray(y, dtype=np.float64)
    _check_same("logistic_loss", logit.data, yv)
    z = logit.data
    out = np.maximum(z, 0.0) - z * yv + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid_np(np.atleast_1d(z)).reshape(z.shape)
    return _unary("logistic_loss", logit, out, lambda g: g * (p - yv))


def softmax_cross_entropy(logits: Tensor, y) -> Tensor:
    """Per-sample cross-entropy of (n, c) logits against integer labels."""
    labels = np.asarray(y).astype(np.int64)
    z = logits.data
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= z.shape[1]:
        raise ShapeError("softmax_cross_entropy: label out of range")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    tot = ez.sum(axis=1, keepdims=True)
    p = ez / tot
    rows = np.arange(z.shape[0])
    out = (np.log(tot[:, 0]) + zmax[:, 0]) - z[rows, labels]

    def dx(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return d * g[:, None]

    return _unary("softmax_cross_entropy", logits, out, dx)


# ----------------------------------------------------------------------------
# finite differences


def finite_diff_grad(loss_fn: Callable, params, h: float = 1e-5):
    """Central-difference gradient of a pure scalar function.

    ``params`` is an array or a dict of arrays; the estimate has the same
    structure. ``loss_fn`` receives the same structure and returns a float.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    if isinstance(params, Mapping):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        out = {}
        for k in base:
            out[k] = _fd_one(lambda arr, k=k: loss_fn({**base, k: arr}), base[k], h)
        return out
    return _fd_one(loss_fn, np.array(params, dtype=np.float64), h)


def _fd_one(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (float(f(xp.reshape(x.shape))) - float(f(xm.reshape(x.shape)))) / (2 * h)
    return g


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Mapping[str, np.ndarray], lr: float = 1e-3, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, weight_decay=weight_decay,
        m={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
        v={k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()},
    )


def adam_step(state: AdamState, params: dict[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update with decoupled weight decay.

    Returns a new parameter dict; ``state`` is advanced in place.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for '{k}' at step {state.step + 1}")
        if g.shape != params[k].shape:
            raise ShapeError(f"adam_step: gradient shape {g.shape} vs parameter shape {params[k].shape} for '{k}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new = {}
    for k, p in params.items():
        if k not in grads:
            new[k] = p
            continue
        g = grads[k]
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        state.m[k], state.v[k] = m, v
        p = p - state.lr * state.weight_decay * p if state.weight_decay else p
        new[k] = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return new
