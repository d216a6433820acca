import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tbpinn import autodiff as ad
from tbpinn.errors import DomainError
from tbpinn.network import NetworkConfig, init_network, tape_forward


def dual(tape, value, tangent=1.0):
    return ad.DualVar(tape.param(value), tape.var(tangent))


def test_relu_kills_inactive_tangent():
    tape = ad.Tape()
    y = ad.relu(dual(tape, -2.0, 5.0))
    assert ad._val(y.primal) == 0.0 and ad._val(y.tangent) == 0.0


def test_relu_derivative_at_zero_is_zero():
    tape = ad.Tape()
    (p,) = tape.params_from([0.0])
    assert ad.backward(ad.relu(p), [p])[0] == 0.0


def test_tanh_tangent_at_zero():
    tape = ad.Tape()
    y = ad.tanh(dual(tape, 0.0))
    assert ad._val(y.primal) == 0.0 and ad._val(y.tangent) == 1.0


def test_square_tangent():
    tape = ad.Tape()
    y = ad.square(dual(tape, 3.0))
    assert ad._val(y.primal) == 9.0 and ad._val(y.tangent) == 6.0


def test_product_rule():
    tape = ad.Tape()
    p = tape.params_from([2.0, 3.0])
    np.testing.assert_array_equal(ad.backward(p[0] * p[1]), [3.0, 2.0])


def test_inactive_branch_gradient():
    tape = ad.Tape()
    p = tape.params_from([1.0])
    np.testing.assert_array_equal(ad.backward(ad.relu(-p[0])), [0.0])


def test_non_participating_leaves_get_zero():
    tape = ad.Tape()
    p = tape.params_from([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(ad.backward(p[0] * 4.0), [4.0, 0.0, 0.0])


def test_backward_rejects_dual():
    tape = ad.Tape()
    with pytest.raises(TypeError):
        ad.backward(dual(tape, 1.0))


def test_domain_errors():
    tape = ad.Tape()
    (p,) = tape.params_from([-1.0])
    with pytest.raises(DomainError):
        ad.sqrt(p)
    with pytest.raises(DomainError):
        p / 0.0
    with pytest.raises(DomainError):
        1.0 / (p + 1.0)
    with pytest.raises(DomainError):
        dual(tape, 1.0) / dual(tape, 0.0)


def test_linear_fit_gradient_matches_differences():
    t = [0.0, 0.5, 1.0]
    y = [1.0, 2.0, 2.5]

    def loss(tape, p):
        return ad.mean([ad.square(p[0] * ti + p[1] - yi) for ti, yi in zip(t, y)])

    assert ad.gradient_check(loss, [0.7, -0.2], eps=1e-6) <= 1e-6


def test_gradient_check_quadratic():
    def f(tape, p):
        return 3.0 * p[0] * p[0] + p[0] * p[1] - 2.0 * p[1] * p[1] + p[1]

    assert ad.gradient_check(f, [0.3, -1.7]) <= 1e-9


def test_gradient_check_constant():
    tape = ad.Tape()
    p = tape.params_from([1.0, 2.0])
    np.testing.assert_array_equal(ad.backward(tape.var(5.0) * 1.0, p), [0.0, 0.0])
    assert ad.gradient_check(lambda tape, p: tape.var(5.0), [1.0, 2.0]) == 0.0


def test_gradient_check_eps_range():
    with pytest.raises(ValueError):
        ad.gradient_check(lambda tape, p: p[0], [1.0], eps=1e-3)


def test_network_mae_gradient_check():
    cfg = NetworkConfig("dnn", 3, 8, "tanh", "nar")
    w0 = init_network(cfg, 3).values + 0.05 * np.random.default_rng(0).normal(size=init_network(cfg, 3).values.size)
    rng = np.random.default_rng(1)
    X = np.hstack([rng.uniform(-1, 1, (2, 6)), rng.uniform(0, 2, (2, 1))])
    Y = rng.normal(size=(2, 12))

    def loss(tape, w):
        terms = []
        for x, y in zip(X, Y):
            out = tape_forward(w, cfg, list(x))
            terms.extend(ad.absolute(o - yi) for o, yi in zip(out, y))
        return ad.mean(terms)

    assert ad.gradient_check(loss, w0) <= 1e-5


def test_gelu_matches_formula():
    for x in (-2.0, -0.3, 0.0, 0.8, 3.0):
        expected = 0.5 * x * (1 + math.tanh(ad.GELU_C * (x + ad.GELU_K * x**3)))
        assert ad.gelu(x) == pytest.approx(expected, rel=1e-15, abs=1e-300)


def test_leaky_relu_slope():
    tape = ad.Tape()
    (p,) = tape.params_from([-2.0])
    y = ad.leaky_relu(p)
    assert y.value == pytest.approx(-0.02)
    assert ad.backward(y, [p])[0] == 0.01


def test_min_max_with_constant():
    tape = ad.Tape()
    p = tape.params_from([0.5, 2.0])
    np.testing.assert_array_equal(ad.backward(ad.minimum(p[0], 1.0) + ad.minimum(p[1], 1.0)), [1.0, 0.0])
    np.testing.assert_array_equal(ad.backward(ad.maximum(p[0], 1.0) + ad.maximum(p[1], 1.0)), [0.0, 1.0])


def test_dot_is_one_node():
    tape = ad.Tape()
    w = tape.params_from([1.0, 2.0, 3.0])
    x = [tape.var(v) for v in (4.0, 5.0, 6.0)]
    before = len(tape)
    y = ad.dot(w, x, tape.var(0.5))
    assert len(tape) == before + 2
    assert y.value == 32.5
    np.testing.assert_array_equal(ad.backward(y, w), [4.0, 5.0, 6.0])


_UNARY = [
    lambda x: ad.tanh(x),
    lambda x: ad.gelu(x),
    lambda x: ad.sqrt(ad.square(x) + 1.0),
    lambda x: ad.pow32(ad.square(x) + 0.5),
    lambda x: ad.absolute(x) + x,
    lambda x: ad.leaky_relu(x),
    lambda x: 1.0 / (ad.square(x) + 1.0),
]


def _compose(ops, p):
    x = p[0]
    for k, op in enumerate(ops):
        x = _UNARY[op](x)
        x = x * p[1] + p[2] if k % 2 else x + p[1] * p[2]
    return x


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(0, len(_UNARY) - 1), min_size=1, max_size=6),
    st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3),
)
def test_chain_rule_soundness(ops, values):
    # keep away from the kinks of |x| and leaky relu, where differences straddle two branches
    def kinks(p):
        x = p[0]
        near = abs(ad._val(x))
        for k, op in enumerate(ops):
            near = min(near, abs(ad._val(x)))
            x = _UNARY[op](x)
            x = x * p[1] + p[2] if k % 2 else x + p[1] * p[2]
        return near

    assume(kinks(values) > 1e-3)
    assert ad.gradient_check(lambda tape, p: _compose(ops, p), values, eps=1e-6) <= 1e-5


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-2, 2), st.floats(-2, 2))
def test_tangent_linearity(a, b, x0, w0):
    tape = ad.Tape()
    x = dual(tape, x0)
    w = tape.param(w0)
    f = ad.tanh(x * w)
    g = ad.square(x)
    combo = a * f + b * g
    assert ad._val(combo.tangent) == a * ad._val(f.tangent) + b * ad._val(g.tangent)


@pytest.mark.parametrize("w0,t0", [(0.7, 0.4), (-1.3, 0.9), (0.2, -2.0)])
def test_second_order_path(w0, t0):
    # d/dw of d/dt tanh(w t) = (1 - tanh^2) - 2 w t tanh (1 - tanh^2)
    def tangent_of(w):
        tape = ad.Tape()
        p = tape.param(w)
        out = ad.tanh(p * ad.DualVar(tape.var(t0), 1.0))
        return tape, p, out.tangent

    tape, p, dfdt = tangent_of(w0)
    th = math.tanh(w0 * t0)
    assert ad._val(dfdt) == pytest.approx(w0 * (1 - th * th), rel=1e-14)
    grad = ad.backward(dfdt, [p])[0]
    h = 1e-6

    def analytic_dfdt(w):
        return w * (1 - math.tanh(w * t0) ** 2)

    fd = (analytic_dfdt(w0 + h) - analytic_dfdt(w0 - h)) / (2 * h)
    assert abs(grad - fd) / max(1.0, abs(grad)) <= 1e-4


def test_gradients_are_deterministic():
    cfg = NetworkConfig("resnet", 2, 8, "gelu", "nar")
    w0 = init_network(cfg, 9).values
    x = [0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 1.5]

    def grad():
        tape = ad.Tape()
        w = tape.params_from(w0)
        return ad.backward(ad.vsum(tape_forward(w, cfg, x)), w)

    np.testing.assert_array_equal(grad(), grad())
