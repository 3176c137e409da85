"""Parameterized function families: origin-pinned MLPs and the ICNN Lyapunov candidate.

All forward functions take a batch of states with shape ``(B, n)`` (a single
state of shape ``(n,)`` is accepted by the public array-level helpers). The
``*_graph`` variants build :mod:`~stabilizable.diffcore` graphs and take an
optional ``env`` mapping block names to graph leaves, which is how the
training loop differentiates through them.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterBlock, Var
from .errors import ConfigurationError

Env = Mapping[str, Var] | None


def _param(block: ParameterBlock, env: Env):
    if env is not None and block.name in env:
        return env[block.name]
    return block.values


def _batch(x) -> tuple[object, bool]:
    """Promote a single state to a batch of one."""
    if isinstance(x, Var):
        return x, False
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _unbatch(v: np.ndarray, single: bool):
    return v[0] if single else v


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ConfigurationError("softplus values must be positive")
    return y + np.log(-np.expm1(-y))


# ------------------------------------------------------------ smooth ReLU


def smooth_relu(y, d):
    """Value and slope of the smooth rectifier with smoothing width ``d``."""
    if np.any(np.asarray(d) <= 0):
        raise ConfigurationError(f"smoothing constant must be positive, got {d}")
    y = np.asarray(y, dtype=float)
    return dc._srelu_value(y, d), dc._srelu_slope(y, d)


# ------------------------------------------------------------------- MLP


@dataclass
class MlpParameters:
    """tanh hidden layers, identity output. Weights stored as (fan_in, fan_out)."""

    widths: tuple[int, ...]
    weights: list[ParameterBlock]
    biases: list[ParameterBlock]

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.weights) != len(self.widths) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight and bias block per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.widths[i], self.widths[i + 1]) or b.shape != (self.widths[i + 1],):
                raise ValueError(f"layer {i}: incompatible shapes {w.shape}, {b.shape}")

    @property
    def blocks(self) -> list[ParameterBlock]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, prefix: str, weights: Sequence, biases: Sequence) -> "MlpParameters":
        weights = [np.atleast_2d(np.asarray(w, dtype=float)) for w in weights]
        widths = [weights[0].shape[0]] + [w.shape[1] for w in weights]
        return cls(
            tuple(widths),
            [ParameterBlock(f"{prefix}.W{i}", w) for i, w in enumerate(weights)],
            [ParameterBlock(f"{prefix}.b{i}", np.atleast_1d(b)) for i, b in enumerate(biases)],
        )


def init_mlp(prefix: str, widths: Sequence[int], rng: np.random.Generator) -> MlpParameters:
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        weights.append(ParameterBlock(f"{prefix}.W{i}", w))
        biases.append(ParameterBlock(f"{prefix}.b{i}", np.zeros(fan_out)))
    return MlpParameters(tuple(widths), weights, biases)


def _mlp_raw(params: MlpParameters, a, env: Env):
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = dc.add(dc.matmul(a, _param(w, env)), _param(b, env))
        if i < last:
            a = dc.tanh(a)
    return a


def mlp_forward_graph(params: MlpParameters, x, env: Env = None) -> Var:
    x_val = dc.value_of(x)
    if x_val.ndim != 2 or x_val.shape[1] != params.widths[0]:
        raise ValueError(f"expected states of width {params.widths[0]}, got shape {x_val.shape}")
    at_zero = _mlp_raw(params, np.zeros((1, params.widths[0])), env)
    return dc.sub(_mlp_raw(params, x, env), at_zero)


def mlp_forward(params: MlpParameters, x) -> np.ndarray:
    """net(x) - net(0), so the output at the origin is exactly zero."""
    xb, single = _batch(x)
    return _unbatch(mlp_forward_graph(params, xb).value, single)


# ------------------------------------------------------------------ ICNN


@dataclass
class IcnnParameters:
    """Input-convex network with general hidden widths.

    ``w[i]`` maps the state into layer ``i`` (shape ``(n, h_i)``),
    ``v_raw[i-1]`` holds the unconstrained pass-through weights from layer
    ``i-1`` to layer ``i`` (mapped through softplus, so always positive),
    and ``d`` holds the k+1 smoothing constants, the last one for the outer
    rectifier of the Lyapunov function.
    """

    w: list[ParameterBlock]
    v_raw: list[ParameterBlock]
    b: list[ParameterBlock]
    d: ParameterBlock

    def __post_init__(self):
        k = self.depth
        if len(self.v_raw) != k - 1 or len(self.b) != k:
            raise ValueError("ICNN needs k input maps, k biases and k-1 pass-through maps")
        if self.d.shape != (k + 1,):
            raise ValueError(f"need {k + 1} smoothing constants, got shape {self.d.shape}")
        if np.any(self.d.values <= 0):
            raise ConfigurationError("smoothing constants d_i must be positive")
        n = self.w[0].shape[0]
        widths = [w.shape[1] for w in self.w]
        if widths[-1] != 1:
            raise ValueError("final ICNN layer must have width 1")
        for i, w in enumerate(self.w):
            if w.shape[0] != n or self.b[i].shape != (widths[i],):
                raise ValueError(f"layer {i}: inconsistent shapes")
        for i, v in enumerate(self.v_raw, start=1):
            if v.shape != (widths[i - 1], widths[i]):
                raise ValueError(f"pass-through {i}: shape {v.shape}")

    @property
    def depth(self) -> int:
        return len(self.w)

    @property
    def n(self) -> int:
        return self.w[0].shape[0]

    @property
    def blocks(self) -> list[ParameterBlock]:
        return [*self.w, *self.v_raw, *self.b, self.d]

    def mapped_v(self) -> list[np.ndarray]:
        return [np.logaddexp(0.0, v.values) for v in self.v_raw]

    @classmethod
    def from_arrays(cls, w, b, d, v=None, prefix: str = "V") -> "IcnnParameters":
        """Build from explicit arrays; ``v`` are the (positive) mapped weights."""
        w = [np.atleast_2d(np.asarray(a, dtype=float)) for a in w]
        v = [] if v is None else [np.atleast_2d(np.asarray(a, dtype=float)) for a in v]
        return cls(
            [ParameterBlock(f"{prefix}.w{i}", a) for i, a in enumerate(w)],
            [ParameterBlock(f"{prefix}.v{i}_raw", inverse_softplus(a)) for i, a in enumerate(v, 1)],
            [ParameterBlock(f"{prefix}.b{i}", np.atleast_1d(a)) for i, a in enumerate(b)],
            ParameterBlock(f"{prefix}.d", np.asarray(d, dtype=float), trainable=False),
        )


@dataclass
class LyapunovParameters:
    icnn: IcnnParameters
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def blocks(self) -> list[ParameterBlock]:
        return self.icnn.blocks


def init_lyapunov(
    n: int,
    hidden: Sequence[int],
    epsilon: float,
    rng: np.random.Generator,
    d: float = 0.1,
    prefix: str = "V",
) -> LyapunovParameters:
    """ICNN of depth ``len(hidden) + 1`` (final width 1) plus the epsilon term."""
    widths = [*hidden, 1]
    w = [rng.standard_normal((n, h)) / np.sqrt(n) for h in widths]
    v_raw = [
        np.full((a, b), float(inverse_softplus(1.0 / a))) for a, b in zip(widths[:-1], widths[1:])
    ]
    icnn = IcnnParameters(
        [ParameterBlock(f"{prefix}.w{i}", a) for i, a in enumerate(w)],
        [ParameterBlock(f"{prefix}.v{i}_raw", a) for i, a in enumerate(v_raw, 1)],
        [ParameterBlock(f"{prefix}.b{i}", np.zeros(h)) for i, h in enumerate(widths)],
        ParameterBlock(f"{prefix}.d", np.full(len(widths) + 1, d), trainable=False),
    )
    return LyapunovParameters(icnn, epsilon)


def _icnn_layers(icnn: IcnnParameters, x, env: Env):
    d = _param(icnn.d, env)
    d = dc.value_of(d)
    pre = [dc.add(dc.matmul(x, _param(icnn.w[0], env)), _param(icnn.b[0], env))]
    z = dc.smooth_relu(pre[0], d[0])
    vs = []
    for i in range(1, icnn.depth):
        v = dc.softplus(_param(icnn.v_raw[i - 1], env))
        vs.append(v)
        y = dc.add(dc.matmul(z, v), dc.matmul(x, _param(icnn.w[i], env)))
        pre.append(dc.add(y, _param(icnn.b[i], env)))
        z = dc.smooth_relu(pre[i], d[i])
    return z, pre, vs, d


def icnn_forward_graph(icnn: IcnnParameters, x, env: Env = None) -> Var:
    z, _, _, _ = _icnn_layers(icnn, x, env)
    return z[:, 0]


def icnn_forward(icnn: IcnnParameters, x) -> np.ndarray:
    xb, single = _batch(x)
    _check_width(xb, icnn.n)
    return _unbatch(icnn_forward_graph(icnn, xb).value, single)


def _check_width(x, n):
    if dc.value_of(x).shape[-1] != n:
        raise ValueError(f"expected states of width {n}, got shape {dc.value_of(x).shape}")


def lyapunov_graph(lyap: LyapunovParameters, x, env: Env = None) -> tuple[Var, Var]:
    """V(x) of shape (B,) and its analytic input gradient of shape (B, n)."""
    icnn = lyap.icnn
    _check_width(x, icnn.n)
    z, pre, vs, d = _icnn_layers(icnn, x, env)
    gamma0, _, _, _ = _icnn_layers(icnn, np.zeros((1, icnn.n)), env)
    shifted = dc.sub(z, gamma0)[:, 0]
    sq = dc.reduce_sum(dc.square(x), axis=1)
    value = dc.add(dc.smooth_relu(shifted, d[-1]), dc.mul(lyap.epsilon, sq))

    # reverse sweep over layers: delta_i = dgamma/dz_pre_i
    k = icnn.depth
    delta = dc.smooth_relu_slope(pre[k - 1], d[k - 1])
    grad_gamma = dc.matmul(delta, dc.transpose(_param(icnn.w[k - 1], env)))
    for i in range(k - 2, -1, -1):
        back = dc.matmul(delta, dc.transpose(vs[i]))
        delta = dc.mul(back, dc.smooth_relu_slope(pre[i], d[i]))
        grad_gamma = dc.add(grad_gamma, dc.matmul(delta, dc.transpose(_param(icnn.w[i], env))))
    outer = dc.smooth_relu_slope(shifted, d[-1])[:, None]
    grad = dc.add(dc.mul(outer, grad_gamma), dc.mul(2.0 * lyap.epsilon, x))
    return value, grad


def lyapunov_value(lyap: LyapunovParameters, x) -> np.ndarray:
    xb, single = _batch(x)
    return _unbatch(lyapunov_graph(lyap, xb)[0].value, single)


def lyapunov_input_gradient(lyap: LyapunovParameters, x) -> np.ndarray:
    xb, single = _batch(x)
    return _unbatch(lyapunov_graph(lyap, xb)[1].value, single)


def lyapunov_value_and_gradient(lyap: LyapunovParameters, x) -> tuple[np.ndarray, np.ndarray]:
    xb, single = _batch(x)
    v, g = lyapunov_graph(lyap, xb)
    return _unbatch(v.value, single), _unbatch(g.value, single)


def gradient_norm_bound(lyap: LyapunovParameters, x_norm) -> np.ndarray:
    """Upper bound on the input-gradient norm of V in terms of weight norms.

    2*eps*|x| + sum_i (prod_{j>i} ||v_j||_2) ||w_i||_2, with induced 2-norms.
    """
    x_norm = np.asarray(x_norm, dtype=float)
    if np.any(x_norm < 0):
        raise ValueError("x_norm must be nonnegative")
    icnn = lyap.icnn
    w_norms = [np.linalg.norm(w.values, 2) for w in icnn.w]
    v_norms = [np.linalg.norm(v, 2) for v in icnn.mapped_v()]
    k = icnn.depth
    total = 0.0
    for i in range(k):
        # v_norms[j - 1] is ||v_j||
        total += np.prod(v_norms[i:k - 1]) * w_norms[i]
    return 2.0 * lyap.epsilon * x_norm + total
