"""Small reverse-mode differentiation core over numpy arrays.

Only first-order gradients with respect to parameters are supported. Input
gradients of the Lyapunov network are built explicitly out of these same
primitives (see :mod:`stabilizable.nets`), so no nested differentiation is
ever needed.

A program is an ordinary Python function that combines :class:`Var` objects
with the primitives defined here. Every primitive checks its output for
non-finite entries and raises :class:`NonFiniteError` naming itself and the
first offending sample (leading axis) index.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "ParameterBlock",
    "GradientBundle",
    "NonFiniteError",
    "Var",
    "as_var",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reduce_sum",
    "square",
    "sqrt",
    "tanh",
    "softplus",
    "relu",
    "smooth_relu",
    "smooth_relu_slope",
    "guarded_div",
    "backward",
    "value_and_param_grad",
    "finite_difference_gradient",
]


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf."""

    def __init__(self, primitive: str, sample_index: int | None):
        self.primitive = primitive
        self.sample_index = sample_index
        where = "" if sample_index is None else f" at sample index {sample_index}"
        super().__init__(f"non-finite value in primitive '{primitive}'{where}")


@dataclass
class ParameterBlock:
    """Named dense parameter array. The shape is fixed at creation."""

    name: str
    values: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"parameter block '{self.name}' has non-finite entries")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def assign(self, new_values: np.ndarray) -> None:
        new_values = np.asarray(new_values, dtype=float)
        if new_values.shape != self.values.shape:
            raise ValueError(
                f"block '{self.name}': shape {new_values.shape} != {self.values.shape}"
            )
        if not np.all(np.isfinite(new_values)):
            raise ValueError(f"block '{self.name}': non-finite update")
        self.values = new_values


@dataclass
class GradientBundle:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _first_bad_index(value: np.ndarray) -> int | None:
    if value.ndim == 0:
        return None
    bad = ~np.isfinite(value)
    if value.ndim > 1:
        bad = bad.reshape(value.shape[0], -1).any(axis=1)
    return int(np.flatnonzero(bad)[0])


def _check(name: str, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(name, _first_bad_index(value))
    return value


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Node of a computation graph holding a numpy value."""

    __slots__ = ("value", "parents", "vjp", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

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

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _node(name, value, parents, vjp) -> Var:
    _check(name, value)
    if any(p.requires_grad for p in parents):
        return Var(value, parents, vjp, requires_grad=True)
    return Var(value)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(
        "add",
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(
        "sub",
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node(
        "mul",
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Var:
    """Elementwise quotient; the denominator must be nonzero."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NonFiniteError("div", _first_bad_index(np.where(bv == 0, np.inf, 0.0)))
    out = av / bv
    return _node(
        "div",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * out / bv, bv.shape),
        ),
    )


def neg(a) -> Var:
    a = as_var(a)
    return _node("neg", -a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Var:
    """Matrix product of 2-d operands."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {av.shape} and {bv.shape}")
    return _node("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a) -> Var:
    a = as_var(a)
    return _node("transpose", a.value.T, (a,), lambda g: (g.T,))


def take(a, index) -> Var:
    """Basic or integer-array indexing, including ``None`` axes."""
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _node("take", a.value[index], (a,), vjp)


def reduce_sum(a, axis=None, keepdims=False) -> Var:
    a = as_var(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node("sum", a.value.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def square(a) -> Var:
    a = as_var(a)
    av = a.value
    return _node("square", av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Var:
    a = as_var(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.value)
    return _node(
        "sqrt",
        out,
        (a,),
        lambda g: (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),),
    )


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.value)
    return _node("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Var:
    """log(1 + e^a), computed without overflow."""
    a = as_var(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _node("softplus", out, (a,), lambda g: (g * sig,))


def relu(a) -> Var:
    """max(a, 0) with subgradient 0 at the kink."""
    a = as_var(a)
    av = a.value
    mask = av > 0
    return _node("relu", np.where(mask, av, 0.0), (a,), lambda g: (g * mask,))


def _srelu_value(y, d):
    return np.where(y <= 0, 0.0, np.where(y < d, y * y / (2.0 * d), y - d / 2.0))


def _srelu_slope(y, d):
    return np.clip(y / d, 0.0, 1.0)


def smooth_relu(y, d) -> Var:
    """C^1 rectifier: 0 for y <= 0, y^2/(2d) on (0, d), y - d/2 beyond.

    ``d`` is a fixed positive constant (scalar or broadcastable array).
    """
    y = as_var(y)
    d = value_of(d)
    yv = y.value
    slope = _srelu_slope(yv, d)
    return _node("smooth_relu", _srelu_value(yv, d), (y,), lambda g: (g * slope,))


def smooth_relu_slope(y, d) -> Var:
    """Derivative of :func:`smooth_relu` in its argument: clip(y/d, 0, 1)."""
    y = as_var(y)
    d = value_of(d)
    yv = y.value
    inner = ((yv > 0) & (yv < d)) / np.broadcast_to(d, yv.shape)
    return _node("smooth_relu_slope", _srelu_slope(yv, d), (y,), lambda g: (g * inner,))


def guarded_div(num, den, tol: float = 1e-12) -> Var:
    """num / den, defined as 0 wherever den < tol."""
    num, den = as_var(num), as_var(den)
    nv, dv = num.value, den.value
    ok = dv >= tol
    safe = np.where(ok, dv, 1.0)
    out = np.where(ok, nv / safe, 0.0)
    return _node(
        "guarded_div",
        out,
        (num, den),
        lambda g: (
            _unbroadcast(np.where(ok, g / safe, 0.0), nv.shape),
            _unbroadcast(np.where(ok, -g * out / safe, 0.0), dv.shape),
        ),
    )


# ------------------------------------------------------------------- driver


def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of the scalar ``root`` with respect to each leaf in ``wrt``."""
    if root.value.size != 1:
        raise ValueError("backward needs a scalar output")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_toposort(root)):
        g = grads.pop(id(node), None) if node.parents else grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(w), np.zeros_like(w.value)) for w in wrt]


def value_and_param_grad(
    program: Callable[[Mapping[str, Var], object], Var],
    blocks: Sequence[ParameterBlock],
    inputs=None,
) -> GradientBundle:
    """Evaluate ``program(leaves, inputs)`` and differentiate it.

    ``leaves`` maps block names to graph leaves. Gradients are returned for
    every trainable block; the blocks themselves are not modified.
    """
    leaves = {
        b.name: Var(b.values.copy(), requires_grad=b.trainable, name=b.name) for b in blocks
    }
    out = program(leaves, inputs)
    trainable = [b for b in blocks if b.trainable]
    if not any(leaves[b.name].requires_grad for b in trainable):
        return GradientBundle(float(out.value), {})
    if not out.requires_grad:
        return GradientBundle(
            float(np.asarray(out.value).reshape(())),
            {b.name: np.zeros(b.shape) for b in trainable},
        )
    gs = backward(out, [leaves[b.name] for b in trainable])
    for b, g in zip(trainable, gs):
        _check(f"gradient of {b.name}", g)
    return GradientBundle(
        float(np.asarray(out.value).reshape(())),
        {b.name: g for b, g in zip(trainable, gs)},
    )


def finite_difference_gradient(fun: Callable[[np.ndarray], float], x, step: float = 1e-5):
    """Central-difference gradient of a scalar function."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fun(x))
        flat[i] = orig - step
        fm = float(fun(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("finite_difference", i)
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
