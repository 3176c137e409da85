import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stabilizable import diffcore as dc
from stabilizable import nets

from conftest import tiny_lyapunov

floats = st.floats(-5, 5, allow_nan=False)


def grad_of(program, **values):
    blocks = [dc.ParameterBlock(k, np.asarray(v, dtype=float)) for k, v in values.items()]
    return dc.value_and_param_grad(lambda leaves, _: program(leaves), blocks)


def test_square_program():
    out = grad_of(lambda p: dc.square(p["w"]), w=3.0)
    assert out.value == 9.0
    assert out.grads["w"] == 6.0


def test_squared_norm_program():
    out = grad_of(lambda p: dc.reduce_sum(dc.square(p["w"])), w=[1.0, 2.0])
    assert out.value == 5.0
    np.testing.assert_array_equal(out.grads["w"], [2.0, 4.0])


def test_smooth_relu_middle_branch():
    out = grad_of(lambda p: dc.smooth_relu(p["w"], 1.0), w=0.5)
    assert out.value == pytest.approx(0.125, abs=1e-15)
    assert out.grads["w"] == pytest.approx(0.5, abs=1e-15)


def test_finite_difference_examples():
    assert dc.finite_difference_gradient(lambda x: float(x[0] ** 2), [1.0], 1e-4)[0] == pytest.approx(2.0, abs=1e-7)
    g = dc.finite_difference_gradient(lambda x: float(np.sum(x**2)), [1.0, 1.0], 1e-4)
    np.testing.assert_allclose(g, [2.0, 2.0], atol=1e-7)
    lyap = tiny_lyapunov()
    g = dc.finite_difference_gradient(lambda x: float(nets.lyapunov_value(lyap, x)), [2.0], 1e-4)
    assert g[0] == pytest.approx(3.0, abs=1e-6)


def test_nonfinite_names_primitive_and_row():
    x = dc.Var(np.array([[1.0], [0.0], [2.0]]))
    with pytest.raises(dc.NonFiniteError) as info:
        dc.sqrt(dc.sub(x, 1.5))
    assert info.value.primitive == "sqrt"
    assert info.value.sample_index == 0


def test_guarded_div_zero_below_tolerance():
    out = dc.guarded_div(np.array([1.0, 2.0]), np.array([1e-13, 4.0])).value
    np.testing.assert_array_equal(out, [0.0, 0.5])


def test_frozen_block_gets_no_gradient():
    blocks = [dc.ParameterBlock("a", np.array(2.0)), dc.ParameterBlock("b", np.array(3.0), trainable=False)]
    out = dc.value_and_param_grad(lambda p, _: dc.mul(p["a"], p["b"]), blocks)
    assert out.grads == {"a": 3.0}


def test_parameter_block_rejects_shape_change():
    block = dc.ParameterBlock("a", np.zeros(3))
    with pytest.raises(ValueError):
        block.assign(np.zeros(4))


@settings(max_examples=30, deadline=None)
@given(
    arrays(float, (3, 2), elements=floats),
    arrays(float, (2, 4), elements=floats),
    arrays(float, (4,), elements=floats),
)
def test_composite_program_matches_finite_differences(x, w, b):
    def program(p):
        h = dc.tanh(dc.add(dc.matmul(x, p["w"]), p["b"]))
        return dc.reduce_sum(dc.mul(dc.softplus(h), dc.square(h)))

    out = grad_of(program, w=w, b=b)
    for name, base in (("w", w), ("b", b)):
        def scalar(v, name=name):
            vals = {"w": w, "b": b, name: v}
            return float(program({k: dc.Var(a) for k, a in vals.items()}).value)

        fd = dc.finite_difference_gradient(scalar, base, 1e-6)
        np.testing.assert_allclose(out.grads[name], fd, rtol=1e-5, atol=1e-7)


@settings(max_examples=50, deadline=None)
@given(arrays(float, (5,), elements=floats), st.floats(0.01, 3))
def test_smooth_relu_is_c1(y, d):
    v, s = nets.smooth_relu(y, d)
    h = 1e-7
    vp, _ = nets.smooth_relu(y + h, d)
    vm, _ = nets.smooth_relu(y - h, d)
    np.testing.assert_allclose((vp - vm) / (2 * h), s, atol=1e-5)
    assert np.all(v >= 0)
