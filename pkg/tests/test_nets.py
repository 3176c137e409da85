import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stabilizable import diffcore as dc
from stabilizable import nets
from stabilizable.errors import ConfigurationError

from conftest import tiny_lyapunov


@pytest.mark.parametrize(
    "y, d, value, slope",
    [(-1.0, 0.1, 0.0, 0.0), (0.05, 0.1, 0.0125, 0.5), (0.1, 0.1, 0.05, 1.0)],
)
def test_smooth_relu_examples(y, d, value, slope):
    v, s = nets.smooth_relu(y, d)
    assert v == pytest.approx(value, abs=1e-15)
    assert s == pytest.approx(slope, abs=1e-15)


def test_smooth_relu_rejects_nonpositive_d():
    with pytest.raises(ConfigurationError):
        nets.smooth_relu(1.0, 0.0)


def test_mlp_is_pinned_at_origin(rng):
    params = nets.init_mlp("f", [2, 5, 5, 2], rng)
    for b in params.biases:
        b.assign(rng.standard_normal(b.shape))
    np.testing.assert_array_equal(nets.mlp_forward(params, np.zeros(2)), 0.0)


def test_single_linear_layer_pinning_leaves_wx(rng):
    W, b = rng.standard_normal((2, 3)), rng.standard_normal(3)
    params = nets.MlpParameters.from_arrays("f", [W], [b])
    x = rng.standard_normal((4, 2))
    np.testing.assert_allclose(nets.mlp_forward(params, x), x @ W, atol=1e-14)


def test_odd_mlp_zero_bias(rng):
    params = nets.init_mlp("f", [2, 6, 2], rng)
    x = rng.standard_normal((5, 2))
    np.testing.assert_allclose(nets.mlp_forward(params, -x), -nets.mlp_forward(params, x), atol=1e-14)


@pytest.mark.parametrize("x, expected", [(2.0, 1.5), (-2.0, 0.0), (0.5, 0.125)])
def test_tiny_icnn(x, expected):
    lyap = tiny_lyapunov()
    assert nets.icnn_forward(lyap.icnn, [x]) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("x, value, grad", [(0.0, 0.0, 0.0), (2.0, 3.0, 3.0), (-2.0, 2.0, -2.0)])
def test_tiny_lyapunov_value_and_gradient(x, value, grad):
    v, g = nets.lyapunov_value_and_gradient(tiny_lyapunov(), [x])
    assert v == pytest.approx(value, abs=1e-15)
    assert g[0] == pytest.approx(grad, abs=1e-15)


def test_gradient_bound_examples():
    assert nets.gradient_norm_bound(tiny_lyapunov(), 2.0) == pytest.approx(3.0)
    # k=2: |v1|=2, |w0|=1, |w1|=3
    icnn = nets.IcnnParameters.from_arrays(
        w=[[[1.0]], [[3.0]]], b=[[0.0], [0.0]], d=[1.0, 1.0, 1.0], v=[[[2.0]]]
    )
    lyap = nets.LyapunovParameters(icnn, 1.0)
    assert nets.gradient_norm_bound(lyap, 1.0) == pytest.approx(7.0, rel=1e-12)
    assert nets.gradient_norm_bound(lyap, 0.0) == pytest.approx(5.0, rel=1e-12)


def test_init_lyapunov_respects_d_and_shapes(rng):
    lyap = nets.init_lyapunov(3, (4, 5), 0.1, rng, d=0.2)
    assert lyap.icnn.depth == 3
    np.testing.assert_array_equal(lyap.icnn.d.values, 0.2)
    assert not lyap.icnn.d.trainable
    assert all(np.all(v > 0) for v in lyap.icnn.mapped_v())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.05, 0.1, 1.0]))
def test_lyapunov_properties(seed, d):
    rng = np.random.default_rng(seed)
    lyap = nets.init_lyapunov(2, (6, 6), 0.5, rng, d=d)
    for b in lyap.icnn.b:
        b.assign(rng.standard_normal(b.shape))
    x = rng.uniform(-3, 3, (200, 2))
    V, grad = nets.lyapunov_value_and_gradient(lyap, x)
    assert nets.lyapunov_value(lyap, np.zeros(2)) == 0.0
    assert np.all(V >= 0.5 * np.sum(x * x, axis=1) - 1e-12)
    bound = nets.gradient_norm_bound(lyap, np.linalg.norm(x, axis=1))
    assert np.all(np.linalg.norm(grad, axis=1) <= bound * (1 + 1e-12))
    y = rng.uniform(-3, 3, (200, 2))
    gx, gy = nets.icnn_forward(lyap.icnn, x), nets.icnn_forward(lyap.icnn, y)
    gm = nets.icnn_forward(lyap.icnn, (x + y) / 2)
    assert np.all(gm <= (gx + gy) / 2 + 1e-9)


def test_input_gradient_matches_finite_differences(rng):
    lyap = nets.init_lyapunov(2, (5, 5), 0.3, rng)
    for x in rng.uniform(-2, 2, (5, 2)):
        fd = dc.finite_difference_gradient(lambda z: float(nets.lyapunov_value(lyap, z)), x, 1e-6)
        np.testing.assert_allclose(nets.lyapunov_input_gradient(lyap, x), fd, rtol=1e-6, atol=1e-7)
