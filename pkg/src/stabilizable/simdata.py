"""Benchmark systems, datasets, fixed-step integration and the L2-gain experiment."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetFormatError
from .stability import HinfComposite, ProjectedModel, apply_input

Field = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------- systems


def vdp_field(x, mu: float = 0.3) -> np.ndarray:
    """Unforced van der Pol oscillator (x2, -x1 + mu (1 - x2^2) x2)."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, -x1 + mu * (1.0 - x2 * x2) * x2], axis=-1)


@dataclass(frozen=True)
class VanDerPol:
    mu: float = 0.3
    n: int = 2

    def __call__(self, x):
        return vdp_field(x, self.mu)


@dataclass(frozen=True)
class LinearTest:
    A: np.ndarray

    @property
    def n(self) -> int:
        return np.asarray(self.A).shape[0]

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ np.asarray(self.A, dtype=float).T


def vdp_input_map(x) -> np.ndarray:
    """Constant input column (0, 1)^T, shape (..., 2, 1)."""
    x = np.asarray(x, dtype=float)
    g = np.zeros(x.shape[:-1] + (2, 1))
    g[..., 1, 0] = 1.0
    return g


def zero_input_map(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.zeros(x.shape + (1,))


INPUT_MAPS: dict[str, Callable] = {"vdp": vdp_input_map, "zero": zero_input_map}


def identity_cost(x) -> np.ndarray:
    """R(x) = I for a single input."""
    x = np.asarray(x, dtype=float)
    return np.ones(x.shape[:-1] + (1, 1))


COST_MAPS: dict[str, Callable] = {"identity": identity_cost}


def hinf_builtin(name: str, gamma: float, margin: float = 0.0) -> HinfComposite:
    """Named (h, g_d) pairs. ``vdp``: performance output z = x, disturbance through the input channel."""
    if name != "vdp":
        raise ConfigurationError(f"no built-in H-infinity setup named {name!r}")
    return HinfComposite(
        h=lambda x: np.asarray(x, dtype=float),
        g_d=vdp_input_map,
        gamma_hinf=gamma,
        margin=margin,
        h_injective=True,
        name=name,
    )


def resolve(table: dict, name: str, what: str):
    try:
        return table[name]
    except KeyError:
        raise ConfigurationError(f"unknown {what} {name!r}; choose from {sorted(table)}") from None


# ---------------------------------------------------------------- datasets


@dataclass
class Dataset:
    x: np.ndarray
    xdot: np.ndarray
    note: str = ""

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.xdot = np.atleast_2d(np.asarray(self.xdot, dtype=float))
        if self.x.shape != self.xdot.shape:
            raise ValueError(f"state/derivative shapes differ: {self.x.shape} vs {self.xdot.shape}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.xdot))):
            raise ValueError("dataset has non-finite entries")

    @property
    def n(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.x.shape[0]


def grid_dataset(per_axis: int, bounds: Sequence[tuple[float, float]], field: Field) -> Dataset:
    """Row-major Cartesian grid including the endpoints, labelled by ``field``."""
    if per_axis < 2:
        raise ConfigurationError("per_axis must be at least 2")
    axes = []
    for lo, hi in bounds:
        if not lo < hi:
            raise ConfigurationError(f"inverted bounds ({lo}, {hi})")
        axes.append(np.linspace(lo, hi, per_axis))
    mesh = np.meshgrid(*axes, indexing="ij")
    x = np.stack([m.reshape(-1) for m in mesh], axis=1)
    note = f"grid per_axis={per_axis} bounds={[tuple(map(float, b)) for b in bounds]}"
    return Dataset(x, field(x), note)


def write_dataset(data: Dataset, path) -> None:
    n = data.n
    header = [f"x{i}" for i in range(1, n + 1)] + [f"xdot{i}" for i in range(1, n + 1)]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in np.hstack([data.x, data.xdot]):
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) % 2 or not header:
        raise DatasetFormatError(f"{path}: header needs x1..xn,xdot1..xdotn", line=1)
    n = len(header) // 2
    expected = [f"x{i}" for i in range(1, n + 1)] + [f"xdot{i}" for i in range(1, n + 1)]
    if header != expected:
        raise DatasetFormatError(f"{path}: unexpected header {header}", line=1)
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2 * n:
            raise DatasetFormatError(f"{path}: expected {2 * n} columns, got {len(row)}", line=lineno)
        try:
            values.append([float(v) for v in row])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: {exc}", line=lineno) from None
    if not values:
        raise DatasetFormatError(f"{path}: no data rows")
    arr = np.array(values)
    return Dataset(arr[:, :n], arr[:, n:], note=str(path))


# -------------------------------------------------------------- integration


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray | None = None
    values: np.ndarray | None = None
    divergent: bool = False

    def write_csv(self, path) -> None:
        n = self.states.shape[-1]
        cols = ["t"] + [f"x{i}" for i in range(1, n + 1)]
        blocks = [self.times[:, None], self.states]
        if self.inputs is not None:
            cols += [f"u{i}" for i in range(1, self.inputs.shape[-1] + 1)]
            blocks.append(self.inputs)
        if self.values is not None:
            cols.append("V")
            blocks.append(self.values[:, None])
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in np.hstack(blocks):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _rk4_step(fun, t, x, dt):
    k1 = fun(t, x)
    k2 = fun(t + dt / 2, x + dt / 2 * k1)
    k3 = fun(t + dt / 2, x + dt / 2 * k2)
    k4 = fun(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _integrate(fun, x0, dt, t_final):
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    if dt > t_final:
        raise ConfigurationError("dt must not exceed t_final")
    steps = int(round(t_final / dt))
    x = np.array(x0, dtype=float)
    states = np.empty((steps + 1,) + x.shape)
    states[0] = x
    times = dt * np.arange(steps + 1)
    for k in range(steps):
        try:
            with np.errstate(all="ignore"):
                x = _rk4_step(fun, times[k], x, dt)
        except FloatingPointError:
            return times[: k + 1], states[: k + 1], True
        if not np.all(np.isfinite(x)):
            return times[: k + 1], states[: k + 1], True
        states[k + 1] = x
    return times, states, False


def rk4_integrate(field: Field, x0, dt: float = 0.01, t_final: float = 10.0) -> Trajectory:
    """Classical fixed-step RK4. ``x0`` may be one state or a batch of states."""
    times, states, divergent = _integrate(lambda t, x: field(x), x0, dt, t_final)
    return Trajectory(times, states, divergent=divergent)


@dataclass
class ClosedLoop:
    """x -> plant(x) + g(x) u(x), with u one of the model's controllers.

    ``plant=None`` uses the learned projected drift.
    """

    model: ProjectedModel
    controller: str = "learned"
    plant: Field | None = None

    @property
    def n(self) -> int:
        return self.model.n

    def __call__(self, x):
        t = self.model.terms(x)
        drift = t.f if self.plant is None else self.plant(x)
        if self.model.mode == "autonomous":
            return drift
        u = self.model._control_from_terms(t, self.controller)
        return drift + apply_input(t.g, u).value

    def control(self, x):
        return self.model._control_from_terms(self.model.terms(x), self.controller)


def disturbance_experiment(
    field: Field,
    g_d: Callable,
    h: Callable,
    d_signal: Callable[[float], np.ndarray],
    dt: float = 0.01,
    t_final: float = 10.0,
    n: int | None = None,
):
    """Simulate x' = F(x) + g_d(x) d(t) from x(0) = 0.

    Returns ``(z_energy, d_energy, ratio)`` with trapezoid-rule energies of
    z = h(x) and d; the ratio is 0 when the disturbance has no energy.
    """
    n = n if n is not None else getattr(field, "n")
    x0 = np.zeros(n)

    def fun(t, x):
        d = np.atleast_1d(np.asarray(d_signal(t), dtype=float))
        return field(x) + np.asarray(g_d(x), dtype=float) @ d

    times, states, divergent = _integrate(fun, x0, dt, t_final)
    if divergent:
        raise FloatingPointError("disturbance experiment diverged")
    z = np.asarray(h(states), dtype=float).reshape(len(times), -1)
    d = np.array([np.atleast_1d(np.asarray(d_signal(t), dtype=float)) for t in times])
    z_energy = float(np.trapezoid(np.sum(z * z, axis=1), times))
    d_energy = float(np.trapezoid(np.sum(d * d, axis=1), times))
    ratio = z_energy / d_energy if d_energy > 0 else 0.0
    return z_energy, d_energy, ratio
