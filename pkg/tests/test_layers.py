import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wsod.nn import (BatchNorm, batchnorm_forward, conv2d_backward, conv2d_forward, conv2d_naive,
                     finite_difference_check, linear_backward, linear_forward, log_softmax, relu_backward,
                     relu_forward, softmax, softmax_backward, uniform_init)


def test_conv_scalar():
    out = conv2d_forward(np.array([[[5.0]]]), np.array([[[[2.0]]]]))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 10.0


def test_conv_sum_of_ones():
    out = conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9.0


def test_conv_matches_naive_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 8, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    np.testing.assert_allclose(conv2d_forward(x, k), conv2d_naive(x, k), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), k=st.integers(1, 3), stride=st.integers(1, 3),
       pad=st.integers(0, 2), seed=st.integers(0, 2**31))
def test_conv_naive_agreement_property(h, w, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(h, w, 2))
    kern = rng.normal(size=(k, k, 2, 3))
    np.testing.assert_allclose(conv2d_forward(x, kern, stride, pad), conv2d_naive(x, kern, stride, pad),
                               atol=1e-12)


def test_conv_batched_equals_per_image():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    batched = conv2d_forward(x, k, 2, 1)
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d_forward(x[i], k, 2, 1))


def test_conv_channel_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(4, 4, 3\).*\(3, 3, 2, 1\)"):
        conv2d_forward(np.zeros((4, 4, 3)), np.zeros((3, 3, 2, 1)))


def test_conv_backward_bias_is_sum():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 5, 1))
    k = rng.normal(size=(3, 3, 1, 2))
    dout = rng.normal(size=conv2d_forward(x, k).shape)
    _, _, db = conv2d_backward(dout, x, k)
    np.testing.assert_allclose(db, dout.sum(axis=(0, 1, 2)))


def test_softmax_uniform_and_overflow():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3)
    np.testing.assert_array_equal(softmax(np.array([1000.0, 1000.0])), [0.5, 0.5])


def test_softmax_direct_formula():
    z = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(softmax(z), np.exp(z) / np.exp(z).sum(), rtol=1e-12)
    np.testing.assert_allclose(log_softmax(z), np.log(np.exp(z) / np.exp(z).sum()), rtol=1e-12)


def test_softmax_backward_matches_jacobian():
    rng = np.random.default_rng(3)
    z = rng.normal(size=4)
    p = softmax(z)
    jac = np.diag(p) - np.outer(p, p)
    g = rng.normal(size=4)
    np.testing.assert_allclose(softmax_backward(g, p), jac.T @ g, atol=1e-14)


def test_relu_and_linear():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(relu_forward(x), [0, 0, 2])
    np.testing.assert_array_equal(relu_backward(np.ones(3), x), [0, 0, 1])
    w = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(linear_forward(np.ones((1, 3)), w, np.zeros(2)), [[6, 9]])
    dx, dw, db = linear_backward(np.ones((1, 2)), np.ones((1, 3)), w)
    np.testing.assert_array_equal(dx, [[1, 5, 9]])
    np.testing.assert_array_equal(db, [1, 1])
    with pytest.raises(ValueError):
        linear_forward(np.ones((1, 4)), w, np.zeros(2))


def test_batchnorm_constant_channel_is_zero():
    x = np.full((4, 3, 3, 1), 7.0)
    np.testing.assert_array_equal(batchnorm_forward(x), np.zeros_like(x))


def test_batchnorm_two_point():
    x = np.array([[1.0], [3.0]])
    out = batchnorm_forward(x, epsilon=1e-5)
    np.testing.assert_allclose(out[:, 0], [-1, 1], atol=1e-5)


def test_batchnorm_statistics():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 5.0, size=(8, 4, 4, 3))
    out = BatchNorm(3, epsilon=1e-8).forward(x, training=True)
    assert np.all(np.abs(out.mean(axis=(0, 1, 2))) < 1e-10)
    assert np.all(np.abs(out.var(axis=(0, 1, 2)) - 1) < 1e-6)


def test_batchnorm_running_stats_and_inference():
    bn = BatchNorm(2, momentum=0.5)
    x = np.array([[0.0, 10.0], [2.0, 30.0]])
    bn.forward(x, training=True)
    np.testing.assert_allclose(bn.running_mean, [0.5, 10.0])
    out = bn.forward(x, training=False)
    np.testing.assert_allclose(out, (x - bn.running_mean) / np.sqrt(bn.running_var + bn.epsilon))


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3))
    bn = BatchNorm(3)
    bn.gamma = rng.normal(size=3)
    bn.beta = rng.normal(size=3)
    probe = rng.normal(size=x.shape)

    def loss():
        return float(np.sum(probe * bn.forward(x, training=True)))

    loss()
    dx, dgamma, dbeta = bn.backward(probe)
    assert finite_difference_check(loss, x, dx) < 1e-6
    assert finite_difference_check(loss, bn.gamma, dgamma) < 1e-6
    assert finite_difference_check(loss, bn.beta, dbeta) < 1e-6


def test_batchnorm_rejects_bad_input():
    with pytest.raises(ValueError):
        batchnorm_forward(np.zeros((0, 3)))
    with pytest.raises(ValueError):
        batchnorm_forward(np.zeros((2, 3)), epsilon=0)


def test_uniform_init_bounds():
    w = uniform_init(np.random.default_rng(0), (100, 10), 25)
    assert np.all(np.abs(w) <= 0.2) and w.std() > 0.05


def test_gradcheck_quadratic():
    w = np.array([3.0])
    assert finite_difference_check(lambda: float(w[0] ** 2), w, np.array([6.0])) < 1e-8


def test_gradcheck_flags_scaled_gradient():
    w = np.array([3.0])
    err = finite_difference_check(lambda: float(w[0] ** 2), w, np.array([12.0]))
    assert abs(err - 1 / 3) < 1e-6


def test_gradcheck_rejects_nonfinite_loss():
    w = np.array([1.0])
    with pytest.raises(FloatingPointError):
        finite_difference_check(lambda: float("nan"), w, np.array([0.0]))


def test_gradcheck_restores_params():
    w = np.array([1.0, 2.0])
    finite_difference_check(lambda: float(np.sum(w ** 2)), w, 2 * w)
    np.testing.assert_array_equal(w, [1.0, 2.0])
