import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from itemized_clip import autograd as ag
from itemized_clip.autograd import Tensor

getcontext().prec = 50


def dec_log_sigmoid(x: float) -> float:
    """High-precision -log(1 + e^-x)."""
    return float(-(Decimal(1) + (-Decimal(x)).exp()).ln())


def check_grad(fn, *params, tol=1e-6):
    for p in params:
        p.grad = None
    fn().backward()
    for p in params:
        num = ag.numerical_grad(fn, p)
        assert ag.relative_error(p.grad, num) < tol, p


# -- cosine similarity -----------------------------------------------------

def test_cosine_identity_and_orthogonal():
    a = [3.0, 4.0]
    assert ag.cosine_similarity(a, a).item() == pytest.approx(1.0, abs=1e-15)
    assert ag.cosine_similarity([1.0, 0.0], [0.0, 1.0]).item() == 0.0


def test_cosine_value_against_decimal():
    a, b = [1, 2, 3], [4, 5, 6]
    dot = sum(Decimal(x) * Decimal(y) for x, y in zip(a, b))
    na = sum(Decimal(x) ** 2 for x in a).sqrt()
    nb = sum(Decimal(y) ** 2 for y in b).sqrt()
    expected = float(dot / (na * nb))
    assert ag.cosine_similarity(np.array(a, float), np.array(b, float)).item() == pytest.approx(expected, abs=1e-8)
    assert expected == pytest.approx(0.974631846, abs=1e-8)


def test_cosine_zero_norm_raises():
    with pytest.raises(ValueError):
        ag.cosine_similarity([0.0, 0.0], [1.0, 2.0])


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)),
       arrays(np.float64, 5, elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(a, b, c):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    s1 = ag.cosine_similarity(a, b).item()
    s2 = ag.cosine_similarity(c * a, b).item()
    assert abs(s1 - s2) <= 1e-12
    assert -1 - 1e-12 <= s1 <= 1 + 1e-12


# -- log sigmoid -------------------------------------------------------------

@pytest.mark.parametrize("x", [0.0, 20.0, -20.0, 3.5, -0.25])
def test_log_sigmoid_matches_decimal(x):
    assert ag.log_sigmoid(x).item() == pytest.approx(dec_log_sigmoid(x), rel=1e-12, abs=1e-16)


def test_log_sigmoid_examples():
    assert ag.log_sigmoid(0.0).item() == pytest.approx(-0.6931472, abs=1e-6)
    assert ag.log_sigmoid(20.0).item() == pytest.approx(-2.061e-9, abs=1e-10)
    assert ag.log_sigmoid(-20.0).item() == pytest.approx(-20.0, abs=1e-6)


def test_log_sigmoid_extremes_finite():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        out = ag.log_sigmoid(np.array([1e4, -1e4])).data
    assert np.all(np.isfinite(out))
    assert out[0] == 0.0
    assert out[1] == pytest.approx(-1e4)


@given(st.floats(-500, 500))
def test_log_sigmoid_nonpositive_and_monotone(x):
    a = ag.log_sigmoid(x).item()
    b = ag.log_sigmoid(x + 1.0).item()
    assert a <= 0.0 and b >= a


# -- masked softmax ----------------------------------------------------------------

def test_masked_softmax_examples():
    np.testing.assert_allclose(ag.masked_softmax([1.0, 1.0, 1.0]).data, [1 / 3] * 3, atol=1e-15)
    w = ag.masked_softmax([5.0, 0.0, 0.0], [False, True, True]).data
    assert w[0] == 0.0
    np.testing.assert_allclose(w[1:], [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(ag.masked_softmax([0.0, math.log(3)]).data, [0.25, 0.75], atol=1e-9)


def test_masked_softmax_all_hidden_raises():
    with pytest.raises(ValueError):
        ag.masked_softmax([1.0, 2.0], [False, False])


@given(arrays(np.float64, 6, elements=st.floats(-30, 30)),
       arrays(np.bool_, 6),
       st.floats(-100, 100))
def test_masked_softmax_shift_invariant(x, visible, c):
    if not visible.any():
        visible[0] = True
    w1 = ag.masked_softmax(x, visible).data
    w2 = ag.masked_softmax(np.where(visible, x + c, x), visible).data
    np.testing.assert_allclose(w1, w2, atol=1e-12)
    assert np.all(w1[~visible] == 0.0)
    assert w1.sum() == pytest.approx(1.0, abs=1e-12)


# -- gradients of every primitive --------------------------------------------------

@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_elementwise_grads(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    c = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    check_grad(lambda: (a * b + a / c - b).sum(), a, b, c)
    check_grad(lambda: (ag.exp(a) + ag.log(c) + ag.sqrt(c) + ag.tanh(a) + c ** 1.5).sum(), a, c)
    check_grad(lambda: (1.0 - a).mean() + (2.0 / c).sum(), a, c)


def test_shape_op_grads(rng):
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(4, 3, 2))
    check_grad(lambda: (a.transpose(2, 1, 0) * w).sum(), a)
    check_grad(lambda: (a.reshape(6, 4)[[0, 2, 2, 5], 1:3] ** 2).sum(), a)
    check_grad(lambda: (ag.concatenate([a, b], axis=1) ** 2).sum() + (ag.stack([a, b], 0).sum(axis=0) ** 3).sum(), a, b)
    check_grad(lambda: (a.sum(axis=1, keepdims=True) * b).sum(), a, b)


def test_matmul_and_einsum_grads(rng):
    x = Tensor(rng.normal(size=(2, 5, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    y = Tensor(rng.normal(size=(2, 3, 6)), requires_grad=True)
    check_grad(lambda: (ag.matmul(x, w) ** 2).sum(), x, w)
    check_grad(lambda: (ag.matmul(x, y) ** 2).sum(), x, y)
    check_grad(lambda: (ag.einsum("bij,jk->bik", x, w) ** 2).sum(), x, w)


def test_kernel_grads(rng):
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    g = Tensor(1 + 0.1 * rng.normal(size=6), requires_grad=True)
    b = Tensor(0.1 * rng.normal(size=6), requires_grad=True)
    y = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    visible = rng.random((3, 6)) > 0.4
    visible[:, 0] = True
    coef = rng.normal(size=(3, 6))
    check_grad(lambda: (ag.layer_norm(x, g, b) * coef).sum(), x, g, b)
    check_grad(lambda: (ag.gelu(x) * coef).sum(), x)
    check_grad(lambda: (ag.masked_softmax(x, visible) * coef).sum(), x)
    check_grad(lambda: ag.log_sigmoid(x * 3.0).sum(), x)
    check_grad(lambda: (ag.cosine_similarity(x, y) * coef[:, 0]).sum(), x, y)
    check_grad(lambda: ag.cosine_similarity(x[:, None, :], y[None, :, :]).sum(), x, y)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_composite_grad(seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(2, 3)), requires_grad=True)
    w = Tensor(r.normal(size=(3, 3)), requires_grad=True)
    fn = lambda: ag.log_sigmoid(ag.cosine_similarity(ag.gelu(ag.matmul(a, w)), a)).sum()
    fn().backward()
    for p in (a, w):
        assert ag.relative_error(p.grad, ag.numerical_grad(fn, p)) <= 1e-4


# -- tape behaviour ----------------------------------------------------------------

def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = y + y + y  # y reused: dz/dx = 3 * 2x
    z.sum().backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_deep_chain_no_recursion_limit():
    x = Tensor(np.array([1.0]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    y.sum().backward()
    assert x.grad[0] == 1.0


def test_no_grad_blocks_tracking():
    x = Tensor(np.ones(3), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_finite_result_is_an_error():
    with pytest.raises(FloatingPointError):
        with np.errstate(all="ignore"):
            ag.exp(Tensor(np.array([1000.0])))


def test_linear_matches_matmul_plus_bias(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(5,)), requires_grad=True)
    np.testing.assert_allclose(ag.linear(x, w, b).data, (ag.matmul(x, w) + b).data, atol=1e-14)
    check_grad(lambda: (ag.linear(x, w, b) ** 2).sum(), x, w, b)


def test_overflowing_sum_of_finite_values_is_allowed():
    big = Tensor(np.full(4, 1e308))
    assert np.isfinite((big * 1.0).data).all()
