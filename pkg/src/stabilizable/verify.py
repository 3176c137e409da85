"""Post-training certification reports.

All checks are sampled: they evaluate conditions on finite point sets and
say nothing about states in between.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .nets import LyapunovParameters, MlpParameters, gradient_norm_bound, lyapunov_value_and_gradient, mlp_forward
from .simdata import Dataset
from .stability import (
    HinfComposite,
    ProjectedModel,
    apply_input,
    autonomous_correction,
    hinf_rhs,
    inverse_optimal_weights,
    weight_eval,
)

TOL = 1e-9


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, allow_nan=False) + "\n")


# ------------------------------------------------------------------ decrease


@dataclass
class DecreaseReport:
    samples: int
    max_violation: float
    argmax: list[float]
    tolerance: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "check": "decrease",
            "samples": self.samples,
            "max_violation": self.max_violation,
            "argmax": self.argmax,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }


def decrease_check(model: ProjectedModel, samples, bypass_projection: bool = False) -> DecreaseReport:
    """max over samples of L_{f+g alpha} V + W.

    ``bypass_projection`` evaluates the raw nominal drift instead, which is
    only useful as a negative control.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    t = model.terms(x, bypass_projection=bypass_projection)
    viol = t.closed_loop_lie + t.W
    i = int(np.argmax(viol))
    return DecreaseReport(len(x), float(viol[i]), [float(v) for v in x[i]])


# ----------------------------------------------------------------------- ROA


@dataclass
class RoaReport:
    """Per-point membership in the error set D and a certified level.

    The certified level is a sampled under-approximation: containment of the
    sub-level set in D is only checked on the dataset points.
    """

    x: np.ndarray
    V: np.ndarray
    error: np.ndarray
    threshold: np.ndarray
    in_D: np.ndarray
    closed_loop_lie_true: np.ndarray
    violations: int
    certified_level: float | None
    certified_count: int
    note: str = "certified level checked on dataset points only (sampled under-approximation)"

    def to_dict(self) -> dict:
        return {
            "check": "roa",
            "points": int(len(self.x)),
            "violations": self.violations,
            "certified_level": self.certified_level,
            "certified_count": self.certified_count,
            "note": self.note,
        }

    def write_csv(self, path) -> None:
        n = self.x.shape[1]
        cols = [f"x{i}" for i in range(1, n + 1)] + ["V", "error", "threshold", "in_D"]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for xi, v, e, th, d in zip(self.x, self.V, self.error, self.threshold, self.in_D):
                nums = [*xi, v, e, th]
                fh.write(",".join(f"{a:.17g}" for a in nums) + f",{int(d)}\n")


def _box_boundary(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(axis=0), x.max(axis=0)
    return np.any((x == lo) | (x == hi), axis=1)


def roa_check(model: ProjectedModel, data: Dataset, margin_rel: float = 1e-6) -> RoaReport:
    """Error-set membership against derivative labels taken as the true drift.

    A point is in D when |xdot - f(x)| < W(x) / (2 eps |x| + weight-norm sum).
    The certified level is the smallest V over violating points and over the
    boundary of the sampled box, shrunk by ``margin_rel``; V is convex, so its
    sub-level sets below the boundary minimum stay inside the box.
    """
    if data.n != model.n:
        raise ValueError(f"dataset has dimension {data.n}, model expects {model.n}")
    x = data.x
    t = model.terms(x)
    error = np.linalg.norm(data.xdot - t.f, axis=1)
    norms = np.linalg.norm(x, axis=1)
    threshold = t.W / gradient_norm_bound(model.lyap, norms)
    in_D = error < threshold
    origin = norms == 0
    violating = ~in_D & ~origin

    true_closed = data.xdot
    if model.mode != "autonomous":
        true_closed = data.xdot + apply_input(t.g, t.alpha).value
    lie_true = np.sum(t.gradV * true_closed, axis=1)

    candidates = t.V[violating | (_box_boundary(x) & ~origin)]
    level = None
    count = 0
    if candidates.size:
        c = float(candidates.min()) * (1.0 - margin_rel)
        if c > 0:
            level = c
            inside = (t.V <= c) & ~origin
            assert np.all(in_D[inside])
            count = int(inside.sum())
    return RoaReport(x, t.V, error, threshold, in_D, lie_true, int(violating.sum()), level, count)


# -------------------------------------------------------------------- H-inf


def hinf_weight_check(spec: HinfComposite, lyap: LyapunovParameters, samples) -> float:
    """max over samples of (|h|^2 + 4 |L_{g_d} V|^2 / gamma^2) - W."""
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    _, grad = lyapunov_value_and_gradient(lyap, x)
    return float(np.max(hinf_rhs(spec, x, grad) - weight_eval(spec, x, lyap)))


# ----------------------------------------------------------- inverse optimal


@dataclass
class InverseOptimalityReport:
    c3: float
    b_grid: list[float]
    max_inequality_violation: list[float] = field(default_factory=list)
    max_deviation: list[float] = field(default_factory=list)
    max_bound_excess: list[float] = field(default_factory=list)
    max_active_deviation: float = 0.0
    active_points: int = 0
    samples: int = 0

    @property
    def passed(self) -> bool:
        return (
            max(self.max_inequality_violation) <= TOL
            and max(self.max_bound_excess) <= TOL
            and self.max_active_deviation == 0.0
        )

    def to_dict(self) -> dict:
        return {
            "check": "invopt",
            "c3": self.c3,
            "b_grid": self.b_grid,
            "samples": self.samples,
            "active_points": self.active_points,
            "max_inequality_violation": self.max_inequality_violation,
            "max_deviation": self.max_deviation,
            "max_bound_excess": self.max_bound_excess,
            "max_active_deviation": self.max_active_deviation,
            "passed": self.passed,
        }


def inverse_optimality_terms(fhat_x, V_x, gradV_x, c3: float, b: float):
    """Inequality slack and deviation |khat - (-grad V / 2r)| for given fields."""
    fhat_x, gradV_x = np.asarray(fhat_x, dtype=float), np.asarray(gradV_x, dtype=float)
    V_x = np.asarray(V_x, dtype=float)
    L = np.sum(gradV_x * fhat_x, axis=-1)
    r, limit = inverse_optimal_weights(L, V_x, gradV_x, c3, b)
    gn2 = np.sum(gradV_x * gradV_x, axis=-1)
    lhs = L - gn2 / (2.0 * r)
    khat = autonomous_correction(fhat_x, V_x, gradV_x, c3)
    deviation = np.linalg.norm(khat - limit, axis=-1)
    return lhs + c3 * V_x, deviation, L + c3 * V_x > 0


def inverse_optimality_check(
    fhat: MlpParameters, lyap: LyapunovParameters, c3: float, b_grid: Sequence[float], samples
) -> InverseOptimalityReport:
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    V, grad = lyapunov_value_and_gradient(lyap, x)
    fx = mlp_forward(fhat, x)
    gnorm = np.linalg.norm(grad, axis=1)
    report = InverseOptimalityReport(c3, [float(b) for b in b_grid], samples=len(x))
    for b in b_grid:
        slack, dev, active = inverse_optimality_terms(fx, V, grad, c3, b)
        report.max_inequality_violation.append(float(np.max(slack)))
        report.max_deviation.append(float(np.max(dev)))
        report.max_bound_excess.append(float(np.max(dev - gnorm / (2.0 * b))))
        if active.any():
            report.max_active_deviation = max(report.max_active_deviation, float(np.max(dev[active])))
        report.active_points = int(active.sum())
    return report
