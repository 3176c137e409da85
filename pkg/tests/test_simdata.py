import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabilizable import simdata
from stabilizable.errors import ConfigurationError, DatasetFormatError

from conftest import random_model


@pytest.mark.parametrize("x, xdot", [((0, 0), (0, 0)), ((1, 0), (0, -1)), ((0, 1), (1, 0))])
def test_vdp_examples(x, xdot):
    np.testing.assert_allclose(simdata.vdp_field(np.array(x, dtype=float)), xdot, atol=1e-15)


def test_grid_small_and_ten_thousand():
    data = simdata.grid_dataset(3, [(-3, 3), (-3, 3)], simdata.VanDerPol())
    expected = [[a, b] for a in (-3, 0, 3) for b in (-3, 0, 3)]
    np.testing.assert_array_equal(data.x, expected)
    assert len(simdata.grid_dataset(100, [(-3, 3), (-3, 3)], simdata.VanDerPol())) == 10_000


def test_grid_labels_match_field():
    data = simdata.grid_dataset(3, [(-1, 1), (-1, 1)], simdata.VanDerPol())
    i = np.flatnonzero((data.x == [1.0, 0.0]).all(axis=1))[0]
    np.testing.assert_allclose(data.xdot[i], [0.0, -1.0])


def test_grid_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        simdata.grid_dataset(1, [(-1, 1)], simdata.VanDerPol())
    with pytest.raises(ConfigurationError):
        simdata.grid_dataset(3, [(1, -1)], simdata.VanDerPol())


def test_dataset_round_trip(tmp_path, rng):
    data = simdata.Dataset(rng.standard_normal((17, 3)), rng.standard_normal((17, 3)))
    path = tmp_path / "d.csv"
    simdata.write_dataset(data, path)
    back = simdata.read_dataset(path)
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.xdot, data.xdot)


@pytest.mark.parametrize(
    "text, line",
    [
        ("", None),
        ("x1,x2,xdot1\n", 1),
        ("x1,x2,xdot1,xdot2\n1,2,3,4\n1,2,3\n", 3),
        ("x1,x2,xdot1,xdot2\n1,2,abc,4\n", 2),
    ],
)
def test_dataset_format_errors(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(DatasetFormatError) as info:
        simdata.read_dataset(path)
    assert info.value.line == line
    if line is not None:
        assert f"line {line}" in str(info.value)


def test_rk4_one_step():
    h = 0.1
    tr = simdata.rk4_integrate(lambda x: -x, np.array([1.0]), h, h)
    # one RK4 step on a linear field is the degree-4 Taylor polynomial of e^{-h}
    taylor = 1 - h + h**2 / 2 - h**3 / 6 + h**4 / 24
    assert tr.states[-1, 0] == pytest.approx(taylor, abs=1e-15)
    assert tr.states[-1, 0] == pytest.approx(np.exp(-h), abs=h**5 / 120 * 1.01)


def test_rk4_constant_field():
    tr = simdata.rk4_integrate(lambda x: np.zeros_like(x), np.array([1.0, -2.0]), 0.1, 1.0)
    np.testing.assert_array_equal(tr.states, np.tile([1.0, -2.0], (11, 1)))


def test_rk4_flags_divergence():
    tr = simdata.rk4_integrate(lambda x: x * x * 1e3, np.array([10.0]), 0.1, 10.0)
    assert tr.divergent
    assert np.all(np.isfinite(tr.states))


def test_rk4_rejects_bad_steps():
    with pytest.raises(ConfigurationError):
        simdata.rk4_integrate(lambda x: x, np.ones(1), 0.0, 1.0)
    with pytest.raises(ConfigurationError):
        simdata.rk4_integrate(lambda x: x, np.ones(1), 2.0, 1.0)


def test_vdp_limit_cycle_amplitude():
    # the damping acts on x2, so averaging gives amplitude 2/sqrt(3) for small mu
    tr = simdata.rk4_integrate(simdata.VanDerPol(0.3), np.array([0.1, 0.0]), 1e-3, 100.0)
    late = tr.states[tr.times >= 80]
    amp = np.max(np.abs(late), axis=0)
    np.testing.assert_allclose(amp, 2 / np.sqrt(3), atol=0.02)


@settings(max_examples=10, deadline=None)
@given(st.floats(-1, 1), st.sampled_from([0.1, 0.05, 0.025]))
def test_rk4_fourth_order(lam, dt):
    x0 = np.array([1.0])
    exact = np.exp(lam * 1.0)
    e1 = abs(simdata.rk4_integrate(lambda x: lam * x, x0, dt, 1.0).states[-1, 0] - exact)
    e2 = abs(simdata.rk4_integrate(lambda x: lam * x, x0, dt / 2, 1.0).states[-1, 0] - exact)
    if e1 > 1e-12:
        assert e1 / e2 >= 15.0


def test_disturbance_zero_signal():
    z, d, ratio = simdata.disturbance_experiment(lambda x: -x, lambda x: np.ones((1, 1)), lambda x: x, lambda t: 0.0, n=1)
    assert (z, d, ratio) == (0.0, 0.0, 0.0)


def test_disturbance_linear_pulse_oracle():
    pulse = lambda t: 1.0 if t <= 1.0 else 0.0
    z, d, ratio = simdata.disturbance_experiment(
        lambda x: -x, lambda x: np.ones((1, 1)), lambda x: x, pulse, dt=1e-3, t_final=20.0, n=1
    )
    # x = 1 - e^{-t} on [0,1], then decays from 1 - 1/e
    a = 1 - np.exp(-1.0)
    exact = (1 - 2 * a + (1 - np.exp(-2.0)) / 2) + a**2 / 2
    assert z == pytest.approx(exact, rel=1e-3)
    assert d == pytest.approx(1.0, abs=2e-3)
    assert ratio < 1.0


def test_closed_loop_v_nonincreasing(rng):
    model = random_model(3)
    x0 = rng.uniform(-2, 2, (4, 2))
    tr = simdata.rk4_integrate(simdata.ClosedLoop(model), x0, 1e-3, 0.5)
    V = np.stack([model.terms(s).V for s in tr.states])
    assert np.all(np.diff(V, axis=0) <= 1e-9)


def test_hinf_builtin():
    spec = simdata.hinf_builtin("vdp", 2.0)
    assert spec.h_injective
    with pytest.raises(ConfigurationError):
        simdata.hinf_builtin("pendulum", 1.0)


def test_hinf_model_respects_gain_bound():
    # W >= |z|^2 + 4 |L_gd V|^2 / gamma^2 gives int |z|^2 <= gamma^2 / 16 int |d|^2
    gamma = 2.0
    model = random_model(5, weight=simdata.hinf_builtin("vdp", gamma))
    spec = model.weight
    for signal in (lambda t: 1.0 if t <= 1.0 else 0.0, lambda t: np.sin(3.0 * t)):
        z, d, ratio = simdata.disturbance_experiment(
            simdata.ClosedLoop(model), spec.g_d, spec.h, signal, dt=2e-3, t_final=3.0, n=2
        )
        assert d > 0
        assert ratio <= gamma**2 / 16 * (1 + 1e-3)
