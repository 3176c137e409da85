"""Closed-form constructions on top of a Lyapunov candidate.

The projections correct a nominal drift along -grad V just enough that the
closed loop decreases V at rate at least W(x). Everything here is written
with :mod:`~stabilizable.diffcore` primitives so the same code runs on plain
arrays and inside the training graph; the public helpers return arrays when
they were given arrays.

Shape conventions: states ``(B, n)``, scalars per state ``(B,)``, input maps
``(B, n, m)``, controls ``(B, m)``. A single unbatched point works too.
"""
from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from . import diffcore as dc
from .diffcore import Var
from .errors import ConfigurationError, InvariantViolation
from .nets import LyapunovParameters, MlpParameters, lyapunov_graph, mlp_forward_graph

InputMap = Callable[[np.ndarray], np.ndarray]

GRAD_TOL = 1e-12
EIG_TOL = 1e-9


def _array_out(fun):
    """Return plain arrays unless one of the arguments is a graph node."""

    @functools.wraps(fun)
    def wrapper(*args, **kwargs):
        out = fun(*args, **kwargs)
        if any(isinstance(a, Var) for a in (*args, *kwargs.values())):
            return out
        if isinstance(out, tuple):
            return tuple(o.value if isinstance(o, Var) else o for o in out)
        return out.value

    return wrapper


def lie(grad, field_) -> Var:
    """Row-wise inner product grad . field."""
    return dc.reduce_sum(dc.mul(grad, field_), axis=-1)


def lie_matrix(grad, g) -> Var:
    """grad^T g: (..., n) x (..., n, m) -> (..., m)."""
    return dc.reduce_sum(dc.mul(dc.as_var(grad)[..., :, None], g), axis=-2)


def apply_input(g, u) -> Var:
    """g u: (..., n, m) x (..., m) -> (..., n)."""
    return dc.reduce_sum(dc.mul(g, dc.as_var(u)[..., None, :]), axis=-1)


def correction(slack, grad) -> Var:
    """-ReLU(slack) / |grad|^2 * grad, zero where |grad|^2 is below the guard."""
    gn2 = dc.reduce_sum(dc.square(grad), axis=-1)
    coef = dc.guarded_div(dc.relu(slack), gn2, GRAD_TOL)
    return dc.neg(dc.mul(dc.as_var(coef)[..., None], grad))


def _correct(fhat, slack, grad) -> Var:
    return dc.add(fhat, correction(slack, grad))


@_array_out
def autonomous_correction(fhat_x, V_x, gradV_x, c3: float):
    """The term added to the nominal drift by :func:`project_autonomous`."""
    if not c3 > 0:
        raise ConfigurationError(f"c3 must be positive, got {c3}")
    return correction(dc.add(lie(gradV_x, fhat_x), dc.mul(c3, V_x)), gradV_x)


@_array_out
def project_autonomous(fhat_x, V_x, gradV_x, c3: float):
    """Nominal drift corrected so that L_f V <= -c3 V."""
    if not c3 > 0:
        raise ConfigurationError(f"c3 must be positive, got {c3}")
    slack = dc.add(lie(gradV_x, fhat_x), dc.mul(c3, V_x))
    return _correct(fhat_x, slack, gradV_x)


@_array_out
def project_stabilizable(fhat_x, g_x, alpha_x, V_x, gradV_x, W_x):
    """Nominal drift corrected so that L_{f+g alpha} V <= -W.

    ``V_x`` is accepted for signature symmetry with the autonomous case; the
    correction only needs the gradient.
    """
    if np.any(dc.value_of(W_x) < 0):
        raise InvariantViolation("weight function returned a negative value")
    closed = dc.add(fhat_x, apply_input(g_x, alpha_x))
    slack = dc.add(lie(gradV_x, closed), W_x)
    return _correct(fhat_x, slack, gradV_x)


def sontag_control(LfV, LgV) -> np.ndarray:
    """Universal CLF feedback.

    Returns 0 where |LgV|^2 < 1e-12. The closed-loop decrease is then
    LfV + LgV.u = -sqrt(LfV^2 + |LgV|^4).
    """
    a = np.asarray(LfV, dtype=float)
    lgv = np.asarray(LgV, dtype=float)
    b = np.sum(lgv * lgv, axis=-1)
    root = np.sqrt(a * a + b * b)
    # a + root without cancellation when a < 0
    num = np.where(a >= 0, a + root, b * b / np.where(root - a > 0, root - a, 1.0))
    active = b >= GRAD_TOL
    scale = np.where(active, -num / np.where(active, b, 1.0), 0.0)
    return scale[..., None] * lgv


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class QuadraticState:
    """W(x) = c |x|^2."""

    c: float

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigurationError(f"quadratic weight needs c > 0, got {self.c}")


@dataclass(frozen=True)
class ProportionalToV:
    """W(x) = c3 V(x)."""

    c3: float

    def __post_init__(self):
        if not self.c3 > 0:
            raise ConfigurationError(f"c3 must be positive, got {self.c3}")


@dataclass(frozen=True)
class HinfComposite:
    """W(x) = |h(x)|^2 + 4 |L_{g_d} V(x)|^2 / gamma^2 + margin |x|^2.

    ``h`` maps (B, n) -> (B, q) and ``g_d`` maps (B, n) -> (B, n, p).
    """

    h: InputMap
    g_d: InputMap
    gamma_hinf: float
    margin: float = 0.0
    h_injective: bool = False
    name: str | None = None

    def __post_init__(self):
        if not self.gamma_hinf > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma_hinf}")
        if self.margin < 0:
            raise ConfigurationError("margin must be nonnegative")
        if self.margin == 0 and not self.h_injective:
            warnings.warn(
                "H-infinity weight with zero margin and non-injective h may not be "
                "positive definite; closed-loop stability is then not guaranteed",
                stacklevel=3,
            )


WeightSpec = Union[QuadraticState, ProportionalToV, HinfComposite]


def weight_graph(spec: WeightSpec, x, V, gradV) -> Var:
    if isinstance(spec, QuadraticState):
        return dc.mul(spec.c, dc.reduce_sum(dc.square(x), axis=-1))
    if isinstance(spec, ProportionalToV):
        return dc.mul(spec.c3, V)
    if isinstance(spec, HinfComposite):
        xv = dc.value_of(x)
        h = np.asarray(spec.h(xv), dtype=float)
        lgd = lie_matrix(gradV, np.asarray(spec.g_d(xv), dtype=float))
        out = dc.add(
            np.sum(h * h, axis=-1),
            dc.mul(4.0 / spec.gamma_hinf**2, dc.reduce_sum(dc.square(lgd), axis=-1)),
        )
        if spec.margin:
            out = dc.add(out, spec.margin * np.sum(xv * xv, axis=-1))
        return out
    raise TypeError(f"unknown weight spec {spec!r}")


def weight_eval(spec: WeightSpec, x, lyap: LyapunovParameters) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    V, grad = lyapunov_graph(lyap, xb)
    out = weight_graph(spec, xb, V, grad).value
    return out[0] if single else out


def hinf_rhs(spec: HinfComposite, x, gradV) -> np.ndarray:
    """|h|^2 + 4 |L_{g_d} V|^2 / gamma^2, the lower bound W has to meet."""
    x = np.asarray(x, dtype=float)
    h = np.asarray(spec.h(x), dtype=float)
    lgd = lie_matrix(gradV, np.asarray(spec.g_d(x), dtype=float)).value
    return np.sum(h * h, axis=-1) + 4.0 * np.sum(lgd * lgd, axis=-1) / spec.gamma_hinf**2


# --------------------------------------------------------------- controls


@dataclass
class FreeNetwork:
    alpha: MlpParameters


@dataclass
class Structured:
    """alpha(x) = -1/2 R(x)^{-1} L_g V(x)^T for a known positive definite R."""

    R: Callable[[np.ndarray], np.ndarray]
    name: str | None = None


@dataclass
class SontagFromV:
    pass


@dataclass
class Zero:
    pass


ControlSpec = Union[FreeNetwork, Structured, SontagFromV, Zero]


def checked_inverse(R_x) -> np.ndarray:
    """Inverse of a batch of symmetric positive definite matrices."""
    R_x = np.asarray(R_x, dtype=float)
    if not np.allclose(R_x, np.swapaxes(R_x, -1, -2), rtol=0, atol=1e-12):
        raise ConfigurationError("R(x) is not symmetric")
    smallest = float(np.min(np.linalg.eigvalsh(R_x)))
    if smallest < EIG_TOL:
        raise ConfigurationError(f"R(x) not positive definite: smallest eigenvalue {smallest:.3e}")
    return np.linalg.inv(R_x)


@_array_out
def structured_alpha_from_gradient(gradV_x, g_x, R_x):
    LgV = lie_matrix(gradV_x, g_x)
    Rinv = checked_inverse(R_x)
    return dc.mul(-0.5, dc.reduce_sum(dc.mul(Rinv, dc.as_var(LgV)[..., None, :]), axis=-1))


def structured_alpha(x, lyap: LyapunovParameters, R, g) -> np.ndarray:
    """-1/2 R(x)^{-1} L_g V(x)^T evaluated for the Lyapunov network."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    grad = lyapunov_graph(lyap, xb)[1].value
    out = structured_alpha_from_gradient(grad, g(xb), R(xb))
    return out[0] if single else out


@_array_out
def hji_residual_from_fields(f_x, g_x, gradV_x, R_x, W_x):
    """H = L_f V - 1/2 L_g V R^{-1} L_g V^T + W."""
    LgV = lie_matrix(gradV_x, g_x)
    Rinv = checked_inverse(R_x)
    quad = dc.reduce_sum(
        dc.mul(LgV, dc.reduce_sum(dc.mul(Rinv, dc.as_var(LgV)[..., None, :]), axis=-1)), axis=-1
    )
    return dc.add(dc.sub(lie(gradV_x, f_x), dc.mul(0.5, quad)), W_x)


def hji_residual(x, f_x, g_x, lyap: LyapunovParameters, R, W_x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None] if single else x
    grad = lyapunov_graph(lyap, xb)[1].value
    if single:
        grad = grad[0]
    R_x = R(xb)
    return hji_residual_from_fields(f_x, g_x, grad, R_x[0] if single else R_x, W_x)


def inverse_optimal_weights(fhat_Lie, V_x, gradV_x, c3: float, b: float):
    """Cost weight r making the autonomous correction inverse-optimal.

    Returns ``(r, khat_limit)`` with khat_limit = -grad V / (2 r), the
    correction that the autonomous projection approaches as b grows.
    """
    if not b > 0 or not c3 > 0:
        raise ConfigurationError("b and c3 must be positive")
    L = np.asarray(fhat_Lie, dtype=float)
    grad = np.asarray(gradV_x, dtype=float)
    gn2 = np.sum(grad * grad, axis=-1)
    slack = L + c3 * np.asarray(V_x, dtype=float)
    active = (slack > 0) & (gn2 >= GRAD_TOL)
    # 1/(2r): on the active branch r = |grad|^2 / (2 slack)
    half_inv_r = np.where(active, slack / np.where(active, gn2, 1.0), 1.0 / (2.0 * b))
    r = np.where(active, gn2 / (2.0 * np.where(active, slack, 1.0)), b)
    return r, -half_inv_r[..., None] * grad


# ---------------------------------------------------------- projected model


@dataclass
class ModelTerms:
    """Everything evaluated at a batch of states. Entries are Vars or arrays."""

    x: np.ndarray
    V: object
    gradV: object
    fhat: object
    W: object
    f: object
    g: np.ndarray | None = None
    alpha: object = None
    LgV: object = None
    nominal_lie: object = None
    closed_loop_lie: object = None
    hji: object = None

    def numpy(self) -> "ModelTerms":
        vals = {k: (v.value if isinstance(v, Var) else v) for k, v in self.__dict__.items()}
        return ModelTerms(**vals)


@dataclass
class ProjectedModel:
    """Nominal drift, Lyapunov network and controller, composed into a projected drift.

    ``mode`` is ``"autonomous"`` (no input, weight must be ProportionalToV)
    or ``"stabilizable"``.
    """

    fhat: MlpParameters
    lyap: LyapunovParameters
    weight: WeightSpec
    control: ControlSpec = field(default_factory=Zero)
    g: InputMap | None = None
    mode: str = "stabilizable"
    g_name: str | None = None

    def __post_init__(self):
        if self.mode not in ("autonomous", "stabilizable"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.mode == "autonomous":
            if not isinstance(self.weight, ProportionalToV):
                raise ConfigurationError("autonomous mode needs W = c3 V")
            if not isinstance(self.control, Zero):
                raise ConfigurationError("autonomous mode has no controller")
        elif self.g is None:
            raise ConfigurationError("stabilizable mode needs an input map g")
        if isinstance(self.control, SontagFromV):
            raise ConfigurationError(
                "the Sontag controller is derived from a trained model; it cannot drive the projection"
            )

    @property
    def n(self) -> int:
        return self.fhat.widths[0]

    @property
    def blocks(self):
        out = [*self.fhat.blocks, *self.lyap.blocks]
        if isinstance(self.control, FreeNetwork):
            out += self.control.alpha.blocks
        return out

    def terms_graph(self, x, env=None, bypass_projection: bool = False) -> ModelTerms:
        x = np.asarray(x, dtype=float)
        V, grad = lyapunov_graph(self.lyap, x, env)
        fhat = mlp_forward_graph(self.fhat, x, env)
        W = weight_graph(self.weight, x, V, grad)
        if self.mode == "autonomous":
            f = fhat if bypass_projection else project_autonomous(fhat, V, grad, self.weight.c3)
            return ModelTerms(
                x, V, grad, fhat, W, f,
                nominal_lie=lie(grad, fhat), closed_loop_lie=lie(grad, f),
            )
        g = np.asarray(self.g(x), dtype=float)
        LgV = lie_matrix(grad, g)
        alpha, R_x = None, None
        if isinstance(self.control, FreeNetwork):
            alpha = mlp_forward_graph(self.control.alpha, x, env)
        elif isinstance(self.control, Structured):
            R_x = np.asarray(self.control.R(x), dtype=float)
            alpha = structured_alpha_from_gradient(grad, g, R_x)
        if alpha is None:
            # no control term at all keeps arithmetic identical to the autonomous case
            nominal = fhat
            alpha = np.zeros((x.shape[0], g.shape[-1]))
            f = fhat if bypass_projection else _correct(fhat, dc.add(lie(grad, fhat), W), grad)
            closed = f
        else:
            gu = apply_input(g, alpha)
            nominal = dc.add(fhat, gu)
            f = fhat if bypass_projection else project_stabilizable(fhat, g, alpha, V, grad, W)
            closed = dc.add(f, gu)
        terms = ModelTerms(
            x, V, grad, fhat, W, f, g=g, alpha=alpha, LgV=LgV,
            nominal_lie=lie(grad, nominal), closed_loop_lie=lie(grad, closed),
        )
        if R_x is not None:
            terms.hji = hji_residual_from_fields(f, g, grad, R_x, W)
        return terms

    def terms(self, x, bypass_projection: bool = False) -> ModelTerms:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        t = self.terms_graph(x[None] if single else x, bypass_projection=bypass_projection).numpy()
        if single:
            t = ModelTerms(**{k: (v[0] if isinstance(v, np.ndarray) else v) for k, v in t.__dict__.items()})
        return t

    def drift(self, x) -> np.ndarray:
        return self.terms(x).f

    def controller(self, x, kind: str = "learned") -> np.ndarray:
        """Control input: ``learned`` (the trained alpha), ``sontag`` or ``zero``."""
        t = self.terms(x)
        return self._control_from_terms(t, kind)

    def _control_from_terms(self, t: ModelTerms, kind: str) -> np.ndarray:
        if kind == "zero":
            return np.zeros_like(t.alpha) if t.alpha is not None else np.zeros(t.x.shape[:-1] + (0,))
        if self.mode == "autonomous":
            raise ConfigurationError("autonomous models have no controller")
        if kind == "learned":
            return t.alpha
        if kind == "sontag":
            return sontag_control(lie(t.gradV, t.f).value, t.LgV)
        raise ConfigurationError(f"unknown controller {kind!r}")

    def closed_loop(self, x, kind: str = "learned") -> np.ndarray:
        """f(x) + g(x) u(x) for the chosen controller."""
        t = self.terms(x)
        if self.mode == "autonomous":
            return t.f
        u = self._control_from_terms(t, kind)
        return t.f + apply_input(t.g, u).value
