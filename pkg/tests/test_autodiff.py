import numpy as np
import pytest

from triprobe import autodiff as ad
from triprobe.autodiff import (GraphFreedError, NonFiniteError, ShapeError, Tensor,
                               backward, finite_diff_check)

from helpers import random_scalar_graph


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_sigmoid_symmetry():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_conv2d_identity_scaled_kernel():
    x = Tensor(np.ones((1, 2, 2, 1), np.float32))
    k = Tensor(np.full((1, 1, 1, 1), 2.0, np.float32))
    out = ad.conv2d(x, k)
    assert np.array_equal(out.data, np.full((1, 2, 2, 1), 2.0, np.float32))


def test_backward_linear():
    x = Tensor([1.0, 1.0], requires_grad=True)
    w = Tensor([2.0, -1.0])
    backward(ad.reduce_sum(ad.mul(x, w)))
    assert np.array_equal(x.grad, [2.0, -1.0])


def test_sigmoid_grad_quarter_at_zero():
    x = Tensor([0.0], requires_grad=True)
    backward(ad.reduce_sum(ad.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-7)


def test_two_layer_net_matches_finite_differences():
    rng = np.random.default_rng(11)
    w1, b1 = rng.standard_normal((6, 5)), rng.standard_normal(5)
    w2 = rng.standard_normal((5, 1))

    def f(t):
        h = ad.sigmoid(ad.dense(ad.reshape(t, (1, 6)), Tensor(w1), Tensor(b1)))
        return ad.reduce_sum(ad.matmul(h, Tensor(w2)))

    rep = finite_diff_check(f, rng.standard_normal(6), h=1e-3, tol=1e-4)
    assert rep.passed, rep.max_rel_err


def test_fan_out_accumulates():
    x = Tensor([1.5], requires_grad=True)
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x -> grad 2x + 3
    backward(ad.reduce_sum(y))
    assert x.grad[0] == pytest.approx(2 * 1.5 + 3)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.mul(x, x))


def test_backward_twice_raises():
    x = Tensor([1.0], requires_grad=True)
    out = ad.reduce_sum(ad.mul(x, x))
    backward(out)
    with pytest.raises(GraphFreedError):
        backward(out)


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        ad.mul(Tensor(np.ones((2, 2))), Tensor(np.ones((4,))))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ad.scale(Tensor([np.finfo(np.float32).max]), 4.0)


def test_no_broadcasting_beyond_bias_add():
    x = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones(3))
    assert ad.bias_add(x, b).data.shape == (2, 3)
    with pytest.raises(ShapeError):
        ad.bias_add(x, Tensor(np.ones(2)))


def test_max_pool_forward_and_grad_ties_first():
    x = Tensor(np.array([[[[1.0], [1.0]], [[0.5], [0.2]]]]), requires_grad=True)
    out = ad.max_pool2d(x, 2, 2)
    assert out.data.reshape(()) == 1.0
    backward(ad.reduce_sum(out))
    # tie between the two 1.0 entries resolves to the first in window order
    assert np.array_equal(x.grad.reshape(2, 2), [[1.0, 0.0], [0.0, 0.0]])


def test_reduce_max_gradient_subset():
    x = Tensor(np.array([[0.2, 0.7, 0.4]]), requires_grad=True)
    sub = ad.take(x, [1, 2], axis=1)
    backward(ad.reduce_sum(ad.reduce_max(sub, axis=1)))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_bce_with_logits_values_and_grad():
    z = Tensor(np.zeros((1, 4), np.float64), requires_grad=True)
    t = np.array([[1, 0, 0, 0]])
    loss = ad.reduce_mean(ad.bce_with_logits(z, t))
    assert loss.item() == pytest.approx(np.log(2.0), abs=1e-9)
    backward(loss)
    assert np.allclose(z.grad, (0.5 - t) / 4)
    with pytest.raises(ValueError):
        ad.bce_with_logits(Tensor(np.zeros((1, 2))), np.array([[0.5, 1.0]]))


def test_finite_diff_sum_of_squares():
    def f(t):
        return ad.reduce_sum(ad.mul(t, t))

    rep = finite_diff_check(f, np.array([1.0, 2.0]), h=1e-3, tol=1e-5)
    assert np.allclose(rep.analytic, [2.0, 4.0])
    assert rep.passed


def test_finite_diff_flags_kink():
    def f(t):
        return ad.reduce_sum(ad.relu(t))

    rep = finite_diff_check(f, np.array([0.0, 1.0]), h=1e-3, tol=1e-4)
    assert rep.unreliable[0] and not rep.unreliable[1]
    assert rep.passed  # the kink coordinate is excluded from the verdict


def test_finite_diff_rejects_bad_h():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: ad.reduce_sum(t), np.ones(2), h=0.0)


def test_gradcheck_random_graph_sample():
    rng = np.random.default_rng(202)
    checked = 0
    for _ in range(25):
        f, x0 = random_scalar_graph(rng)
        rep = finite_diff_check(f, x0, h=1e-3, tol=1e-4)
        if rep.unreliable.mean() > 0.2:
            continue
        assert rep.passed, f"rel err {rep.max_rel_err:.2e}"
        checked += 1
    assert checked >= 15


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    f, x0 = random_scalar_graph(rng)

    def run():
        xt = Tensor(x0.copy(), requires_grad=True)
        out = f(xt)
        backward(out)
        return out.data.copy(), xt.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2) and np.array_equal(g1, g2)


def test_backward_linearity():
    rng = np.random.default_rng(17)
    x0 = rng.standard_normal(6)
    w1, w2 = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    a, b = 1.7, -0.6

    def grad_of(builder):
        xt = Tensor(x0.copy(), requires_grad=True)
        backward(builder(xt))
        return xt.grad.copy()

    f = lambda t: ad.reduce_sum(ad.sigmoid(ad.matmul(ad.reshape(t, (1, 6)), Tensor(w1))))
    g = lambda t: ad.reduce_sum(ad.softplus(ad.matmul(ad.reshape(t, (1, 6)), Tensor(w2))))
    combo = lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b))
    lhs = grad_of(combo)
    rhs = a * grad_of(f) + b * grad_of(g)
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_float64_graphs_supported():
    x = Tensor(np.array([0.5, -0.25], dtype=np.float64), requires_grad=True)
    assert x.dtype == np.float64
    out = ad.reduce_sum(ad.softplus(x))
    assert out.dtype == np.float64
    backward(out)
    assert x.grad.dtype == np.float64
