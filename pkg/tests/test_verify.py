import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabilizable import nets, simdata, verify
from stabilizable.stability import HinfComposite, ProjectedModel, QuadraticState, Zero

from conftest import random_model, tiny_lyapunov


def test_decrease_on_random_model(rng):
    report = verify.decrease_check(random_model(0), rng.uniform(-3, 3, (2000, 2)))
    assert report.passed and report.samples == 2000


def test_decrease_negative_control(rng):
    model = random_model(0)
    # push the nominal drift outward so the raw field increases V
    model.fhat.weights[-1].assign(model.fhat.weights[-1].values * 0 + 50.0)
    report = verify.decrease_check(model, rng.uniform(-3, 3, (500, 2)), bypass_projection=True)
    assert report.max_violation > 0 and not report.passed
    assert verify.decrease_check(model, rng.uniform(-3, 3, (500, 2))).passed


def test_decrease_at_origin_only():
    report = verify.decrease_check(random_model(1), np.zeros((1, 2)))
    assert report.max_violation == 0.0


def perfect_fit_data(model, per_axis=9):
    data = simdata.grid_dataset(per_axis, [(-2, 2), (-2, 2)], lambda x: x * 0)
    return simdata.Dataset(data.x, model.drift(data.x))


def test_roa_perfect_fit():
    model = random_model(2)
    data = perfect_fit_data(model)
    report = verify.roa_check(model, data)
    nonzero = np.linalg.norm(data.x, axis=1) > 0
    assert report.violations == 0
    assert np.all(report.in_D[nonzero])
    boundary = np.any(np.abs(data.x) == 2.0, axis=1)
    assert report.certified_level == pytest.approx(report.V[boundary].min() * (1 - 1e-6))
    assert np.all(report.closed_loop_lie_true[report.in_D & nonzero] < 0)


def test_roa_threshold_arithmetic():
    # error 1, W = 500, bound 3 at |x| = 2 for the tiny net
    lyap = tiny_lyapunov()
    threshold = 500.0 / nets.gradient_norm_bound(lyap, 2.0)
    assert threshold == pytest.approx(166.6667, rel=1e-6)
    assert 1.0 < threshold


def test_roa_counts_bad_labels_and_writes_csv(tmp_path):
    model = random_model(2)
    data = perfect_fit_data(model)
    xdot = data.xdot.copy()
    xdot[10] += 1e6
    report = verify.roa_check(model, simdata.Dataset(data.x, xdot))
    assert report.violations == 1
    assert report.certified_level is None or report.certified_level < report.V[10]
    path = tmp_path / "roa.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,V,error,threshold,in_D"
    assert len(lines) == len(data) + 1


def hinf_spec(margin):
    return HinfComposite(lambda x: x, simdata.vdp_input_map, 2.0, margin=margin, h_injective=True)


@pytest.mark.parametrize("margin", [0.0, 0.1])
def test_hinf_weight_shortfall(margin, rng):
    lyap = random_model(4).lyap
    x = rng.uniform(-3, 3, (300, 2))
    shortfall = verify.hinf_weight_check(hinf_spec(margin), lyap, x)
    if margin == 0:
        assert shortfall == pytest.approx(0.0, abs=1e-12)
    else:
        from stabilizable.stability import hinf_rhs, weight_eval

        _, grad = nets.lyapunov_value_and_gradient(lyap, x)
        per_point = hinf_rhs(hinf_spec(margin), x, grad) - weight_eval(hinf_spec(margin), x, lyap)
        assert np.all(per_point <= -0.1 * np.sum(x * x, axis=1) + 1e-9)


def test_hinf_hand_case():
    spec = HinfComposite(lambda x: x, lambda x: np.ones(x.shape + (1,)), 2.0, h_injective=True)
    lyap = nets.LyapunovParameters(
        nets.IcnnParameters.from_arrays(w=[[[-1.0]]], b=[[0.0]], d=[1.0, 1.0]), 1.0
    )
    # the ICNN term vanishes for x > 0, so V = x^2 and grad V = 2x
    assert verify.hinf_weight_check(spec, lyap, np.array([[1.0]])) == pytest.approx(0.0, abs=1e-15)


def test_inverse_optimality_terms_examples():
    # active branch: deviation is exactly zero
    slack, dev, active = verify.inverse_optimality_terms(np.array([0.5]), 1.0, np.array([2.0]), 1.0, 1e6)
    assert active and dev == 0.0
    # inactive branch: bounded by |grad| / 2b
    slack, dev, active = verify.inverse_optimality_terms(np.array([-1.0]), 0.1, np.array([3.0]), 1.0, 1e6)
    assert not active and dev <= 1.5e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_inverse_optimality_check(seed):
    rng = np.random.default_rng(seed)
    model = random_model(seed % 7)
    report = verify.inverse_optimality_check(
        model.fhat, model.lyap, 1.0, [1e2, 1e4, 1e6], rng.uniform(-3, 3, (100, 2))
    )
    assert report.passed
    assert report.max_deviation == sorted(report.max_deviation, reverse=True)


def test_inverse_optimality_requires_autonomous_pieces():
    model = ProjectedModel(random_model(0).fhat, random_model(0).lyap, QuadraticState(1.0), Zero(), simdata.vdp_input_map)
    report = verify.inverse_optimality_check(model.fhat, model.lyap, 2.0, [10.0], np.zeros((1, 2)))
    assert report.max_inequality_violation == [0.0]
