import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xvpr import autodiff as ad
from xvpr.autodiff import Parameter, Tensor
from xvpr.gradcheck import grad_check

from conftest import naive_conv2d


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# conv2d ---------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    y = ad.conv2d(x, np.ones((1, 1, 1, 1)))
    assert np.array_equal(y.data, x)


def test_conv_all_ones_kernel_sums():
    y = ad.conv2d([[[1.0, 2.0], [3.0, 4.0]]], np.ones((1, 1, 2, 2)))
    assert y.data.tolist() == [[[10.0]]]


def test_conv_matches_loop_oracle_random_shapes():
    rng = np.random.default_rng(0)
    for _ in range(100):
        C, O, k = rng.integers(1, 4), rng.integers(1, 4), int(rng.integers(1, 4))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        H, W = rng.integers(k, 7), rng.integers(k, 7)
        x, w, b = rng.normal(size=(C, H, W)), rng.normal(size=(O, C, k, k)), rng.normal(size=O)
        got = ad.conv2d(x, w, b, stride=stride, pad=pad).data
        assert np.abs(got - naive_conv2d(x, w, b, stride, pad)).max() < 1e-12


def test_conv_output_size_formula():
    y = ad.conv2d(np.zeros((2, 9, 7)), np.zeros((3, 2, 3, 3)), stride=2, pad=1)
    assert y.shape == (3, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(3, 2, 5, 5)), rng.normal(size=(4, 2, 3, 3))
    batched = ad.conv2d(x, w, stride=2, pad=1).data
    for n in range(3):
        assert np.allclose(batched[n], ad.conv2d(x[n], w, stride=2, pad=1).data, atol=1e-13)


@pytest.mark.parametrize("x_shape,w_shape,kw", [
    ((2, 5, 5), (1, 3, 3, 3), {}),           # channel mismatch
    ((1, 2, 2), (1, 1, 3, 3), {}),           # kernel larger than input
    ((5, 5), (1, 1, 3, 3), {}),              # wrong input rank
    ((1, 5, 5), (1, 1, 3, 2), {}),           # non-square kernel
    ((1, 5, 5), (1, 1, 3, 3), {"stride": 0}),
])
def test_conv_rejects_bad_shapes(x_shape, w_shape, kw):
    with pytest.raises(ValueError):
        ad.conv2d(np.zeros(x_shape), np.zeros(w_shape), **kw)


def test_conv_gradient():
    rng = np.random.default_rng(2)
    x, w, b = leaf(rng, 2, 5, 5), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    proj = rng.normal(size=(3, 3, 3))
    f = lambda: ad.tsum(ad.conv2d(x, w, b, stride=2, pad=1) * proj)
    assert grad_check(f, [x, w, b]) < 1e-6


# linear ---------------------------------------------------------------------

def test_linear_identity():
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(ad.linear(x, np.eye(3), np.zeros(3)).data, x)


def test_linear_hand_example():
    assert ad.linear([2.0, 3.0], [[1.0, 1.0]], [0.5]).data.tolist() == [5.5]


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n, m = rng.integers(1, 8, size=2)
        x, W, b = rng.normal(size=n), rng.normal(size=(m, n)), rng.normal(size=m)
        ref = [sum(W[i, j] * x[j] for j in range(n)) + b[i] for i in range(m)]
        assert np.abs(ad.linear(x, W, b).data - ref).max() < 1e-12


def test_linear_dimension_mismatch():
    with pytest.raises(ValueError):
        ad.linear(np.zeros(3), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        ad.linear(np.zeros(4), np.zeros((2, 4)), np.zeros(3))


def test_linear_gradient_batched():
    rng = np.random.default_rng(4)
    x, w, b = leaf(rng, 3, 4), leaf(rng, 2, 4), leaf(rng, 2)
    proj = rng.normal(size=(3, 2))
    assert grad_check(lambda: ad.tsum(ad.linear(x, w, b) * proj), [x, w, b]) < 1e-8


# activations ----------------------------------------------------------------

def test_relu_example():
    assert ad.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]


def test_sigmoid_zero():
    assert ad.sigmoid(0.0).data == 0.5


def test_softmax_uniform():
    assert np.allclose(ad.softmax([7.0, 7.0, 7.0]).data, 1 / 3)


def test_softmax_stable_for_large_logits():
    out = ad.softmax(np.array([[1000.0, 1000.0], [-1000.0, 0.0]]), axis=1).data
    assert np.all(np.isfinite(out))
    assert np.allclose(out.sum(axis=1), 1.0)


@pytest.mark.parametrize("op", [ad.relu, ad.sigmoid, ad.softmax])
def test_activations_reject_non_finite(op):
    with pytest.raises((ValueError, FloatingPointError)):
        op(np.array([0.0, np.nan]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=10))
@settings(max_examples=50, deadline=None)
def test_activation_ranges(values):
    x = np.array(values)
    s = ad.sigmoid(x).data
    assert np.all((s >= 0) & (s <= 1))
    assert abs(ad.softmax(x).data.sum() - 1.0) < 1e-12
    assert np.all(ad.relu(x).data >= 0)


def test_activation_gradients():
    rng = np.random.default_rng(5)
    x = leaf(rng, 3, 4)
    proj = rng.normal(size=(3, 4))
    for op in (ad.sigmoid, lambda t: ad.softmax(t, axis=1), ad.exp, ad.signed_sqrt):
        assert grad_check(lambda: ad.tsum(op(x) * proj), [x]) < 1e-6


# gradient machinery ---------------------------------------------------------

def test_grad_check_quadratic():
    err = grad_check(lambda x: ad.tsum(x * x), Tensor([1.0, 2.0, 3.0], requires_grad=True))
    assert err < 1e-8


def test_grad_check_conv_relu_linear_head():
    rng = np.random.default_rng(6)
    x = leaf(rng, 1, 6, 6)
    w, b = leaf(rng, 2, 1, 3, 3), Tensor(rng.normal(0.3, 0.1, 2), requires_grad=True)
    W2, b2 = leaf(rng, 1, 32), leaf(rng, 1)
    f = lambda: ad.tsum(ad.linear(ad.reshape(ad.relu(ad.conv2d(x, w, b, stride=1, pad=0)), (32,)), W2, b2))
    assert grad_check(f, [x, w, b, W2, b2]) < 1e-4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        grad_check(lambda x: ad.tsum(ad.log(x)), Tensor([-1.0], requires_grad=True))


def test_backward_twice_accumulates_double():
    rng = np.random.default_rng(7)
    x, w = leaf(rng, 4), leaf(rng, 3, 4)
    f = lambda: ad.tsum(ad.sigmoid(ad.linear(x, w)))
    w.zero_grad(); x.zero_grad()
    f().backward()
    once = w.grad.copy()
    w.zero_grad(); x.zero_grad()
    f().backward()
    f().backward()
    assert np.array_equal(w.grad, 2 * once)


def test_same_graph_backward_twice():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.tsum(x * x)
    y.backward()
    y.backward()
    assert x.grad.tolist() == [4.0, 8.0]


def test_parameter_grad_starts_zero_and_resets():
    p = Parameter(np.ones((2, 3)), name="w")
    assert p.grad.shape == p.shape and not p.grad.any()
    ad.tsum(p * 3.0).backward()
    assert np.all(p.grad == 3.0)
    p.zero_grad()
    assert not p.grad.any()


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with ad.no_grad():
        y = ad.tsum(p * 2.0)
    assert y._backward is None
    assert ad.grad_enabled()


def test_no_grad_is_thread_local():
    seen = []
    with ad.no_grad():
        t = threading.Thread(target=lambda: seen.append(ad.grad_enabled()))
        t.start()
        t.join()
    assert seen == [True]


def test_broadcast_gradients():
    rng = np.random.default_rng(8)
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    proj = rng.normal(size=(3, 4))
    assert grad_check(lambda: ad.tsum((a * b + b / (1.5 + a * a)) * proj), [a, b]) < 1e-8


def test_shape_op_gradients():
    rng = np.random.default_rng(9)
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    proj = rng.normal(size=(3, 4))
    f = lambda: ad.tsum(ad.transpose(ad.concat([a, b], axis=0), (1, 0)) * proj) \
        + ad.tsum(ad.stack([a, b])[1, :, 1:]) + ad.tsum(ad.mean(a, axis=1) ** 2)
    assert grad_check(f, [a, b]) < 1e-8


def test_matmul_requires_rank_two():
    with pytest.raises(ValueError):
        ad.matmul(np.ones(3), np.ones((3, 2)))


def test_l2_normalize_zero_vector_stays_zero():
    out = ad.l2_normalize(np.zeros((2, 3)), axis=1).data
    assert not out.any()


def test_l2_normalize_gradient():
    rng = np.random.default_rng(10)
    x = leaf(rng, 3, 5)
    proj = rng.normal(size=(3, 5))
    assert grad_check(lambda: ad.tsum(ad.l2_normalize(x, axis=1) * proj), [x]) < 1e-8


def test_l2_normalize_floor_damps_short_slices():
    x = np.array([[3.0, 4.0], [0.03, 0.04], [0.0, 0.0]])
    out = ad.l2_normalize(x, axis=1, floor=0.1).data
    assert np.allclose(out, [[0.6, 0.8], [0.3, 0.4], [0.0, 0.0]])


def test_l2_normalize_floor_gradient_both_regimes():
    rng = np.random.default_rng(11)
    x = Tensor(np.concatenate([rng.normal(size=(2, 4)), 0.01 * rng.normal(size=(2, 4))]),
               requires_grad=True)
    proj = rng.normal(size=(4, 4))
    assert grad_check(lambda: ad.tsum(ad.l2_normalize(x, axis=1, floor=0.1) * proj), [x]) < 1e-8


def test_sqrt_zero_subgradient():
    x = Tensor([0.0, 4.0], requires_grad=True)
    ad.tsum(ad.sqrt(x)).backward()
    assert x.grad.tolist() == [0.0, 0.25]


def test_forward_backward_finite_on_finite_inputs():
    rng = np.random.default_rng(11)
    x = leaf(rng, 4, 6)
    y = ad.tsum(ad.log(ad.sigmoid(x)) + ad.signed_sqrt(x) + ad.l2_normalize(x, axis=1))
    y.backward()
    assert np.isfinite(y.data) and np.all(np.isfinite(x.grad))
