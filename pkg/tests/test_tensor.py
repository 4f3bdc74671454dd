import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sparse_sieve import tensor as T


def grad_of(fn, *values):
    tensors = [T.Tensor(v) for v in values]
    with T.Tape() as tape:
        out = fn(*tensors)
    grads = tape.backward(out)
    return out, [grads[t] for t in tensors]


def central_diff(fn, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        g[i] = (fn(up) - fn(down)) / (2 * h)
    return g


# --- matmul ---


def test_matmul_identity_left():
    out = T.matmul(T.Tensor([[1, 2], [3, 4]]), T.Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_identity_right():
    out = T.matmul(T.Tensor(np.eye(2)), T.Tensor([[5], [7]]))
    np.testing.assert_array_equal(out.data, [[5], [7]])


def test_matmul_hand_value():
    out = T.Tensor([[1, 2], [3, 4]]) @ T.Tensor([[1], [1]])
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


# --- conv2d ---


def test_conv_delta_kernel_is_identity(rng):
    x = rng.uniform(size=(2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv_ones_gives_fours():
    out = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 2, 2))), 1, 0)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_zero_input(rng):
    out = T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(rng.normal(size=(3, 2, 3, 3))), 1, 1)
    assert out.shape == (1, 3, 4, 4)
    assert not out.data.any()


def test_conv_matches_direct_loop(rng):
    x = rng.normal(size=(2, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 2))
    out = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh, ow = (6 + 2 - 3) // 2 + 1, (5 + 2 - 2) // 2 + 1
    ref = np.zeros((2, 3, oh, ow))
    for n in range(2):
        for o in range(3):
            for i in range(oh):
                for j in range(ow):
                    ref[n, o, i, j] = (xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 2] * k[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_gradients_match_finite_differences(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    k = rng.normal(size=(2, 2, 3, 3))
    w = rng.normal(size=(2, 3, 3))
    loss = lambda xa, ka: (T.conv2d(xa, ka, 2, 1) * T.Tensor(w)).sum()
    _, (gx, gk) = grad_of(loss, x, k)
    fx = lambda v: float((T.conv2d(T.Tensor(v), T.Tensor(k), 2, 1).data * w).sum())
    fk = lambda v: float((T.conv2d(T.Tensor(x), T.Tensor(v), 2, 1).data * w).sum())
    np.testing.assert_allclose(gx, central_diff(fx, x), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gk, central_diff(fk, k), rtol=1e-6, atol=1e-8)


def test_max_pool_forward_and_gradient():
    x = np.array([[[[1.0, 5.0, 2.0, 0.0], [3.0, 4.0, 7.0, 1.0]]]])
    _, (g,) = grad_of(lambda t: T.max_pool2d(t).sum(), x)
    np.testing.assert_array_equal(T.max_pool2d(T.Tensor(x)).data, [[[[5.0, 7.0]]]])
    np.testing.assert_array_equal(g, [[[[0, 1, 0, 0], [0, 0, 1, 0]]]])


# --- relu / sign ---


def test_relu_values():
    np.testing.assert_array_equal(T.relu(T.Tensor([-1, 0, 2])).data, [0, 0, 2])
    assert not T.relu(T.Tensor([-3.0, -0.1])).data.any()


def test_relu_subgradient():
    _, (g,) = grad_of(lambda t: T.relu(t).sum(), [-1.0, 2.0])
    np.testing.assert_array_equal(g, [0, 1])
    _, (g0,) = grad_of(lambda t: T.relu(t).sum(), [0.0])
    assert g0[0] == 0.0


def test_sign_values():
    np.testing.assert_array_equal(T.sign(T.Tensor([-0.3, 0, 5])).data, [-1, 0, 1])
    assert not T.sign(T.Tensor(np.zeros(4))).data.any()


# --- cross entropy ---


@pytest.mark.parametrize("k", [2, 3, 10])
def test_cross_entropy_uniform_is_log_k(k):
    loss = T.softmax_cross_entropy(T.Tensor(np.zeros(k)), 0)
    assert loss.item() == pytest.approx(math.log(k), abs=1e-15)


def test_cross_entropy_saturated():
    assert T.softmax_cross_entropy(T.Tensor([1000.0, 0.0]), 0).item() == pytest.approx(0.0, abs=1e-300)


def test_cross_entropy_hand_value():
    # log(e + e^2 + e^3) - 3
    oracle = 0.40760596444438030  # mpmath, 40 digits
    assert T.softmax_cross_entropy(T.Tensor([1.0, 2.0, 3.0]), 2).item() == pytest.approx(oracle, abs=1e-15)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.Tensor([0.0, 1.0]), 2)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = np.array([[0.3, -1.2, 2.0], [1.0, 1.0, 1.0]])
    _, (g,) = grad_of(lambda t: T.softmax_cross_entropy(t, [2, 0], reduction="sum"), z)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[0, 2] -= 1
    p[1, 0] -= 1
    np.testing.assert_allclose(g, p, atol=1e-15)


# --- backward ---


def test_backward_square():
    _, (g,) = grad_of(lambda x: x * x, [3.0])
    assert g[0] == 6.0


def test_backward_dead_relu():
    _, (g,) = grad_of(lambda x: T.relu(-x), [1.0])
    assert g[0] == 0.0


def test_backward_two_layer_mlp_finite_difference(rng):
    x = rng.normal(size=(4, 5))
    w1, b1 = rng.normal(size=(5, 6)), rng.normal(size=6)
    w2, b2 = rng.normal(size=(6, 3)), rng.normal(size=3)
    y = [0, 2, 1, 1]

    def loss(*ts):
        xt, a, b, c, d = ts
        return T.softmax_cross_entropy(T.relu(xt @ a + b) @ c + d, y)

    def numeric(i):
        vals = [x, w1, b1, w2, b2]

        def f(v):
            vs = list(vals)
            vs[i] = v
            return loss(*[T.Tensor(u) for u in vs]).item()

        return central_diff(f, vals[i])

    _, grads = grad_of(loss, x, w1, b1, w2, b2)
    for i, g in enumerate(grads):
        np.testing.assert_allclose(g, numeric(i), rtol=1e-5, atol=1e-8)


def test_tape_single_use():
    x = T.Tensor([1.0])
    with T.Tape() as tape:
        y = x * x
    tape.backward(y)
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_backward_needs_scalar():
    x = T.Tensor([1.0, 2.0])
    with T.Tape() as tape:
        y = x * x
    with pytest.raises(T.TapeError):
        tape.backward(y)


def test_non_finite_rejected():
    with pytest.raises(FloatingPointError):
        T.Tensor([np.nan])


def test_broadcast_add_gradient():
    _, (ga, gb) = grad_of(lambda a, b: (a + b).sum(), np.ones((3, 2)), np.ones(2))
    np.testing.assert_array_equal(ga, np.ones((3, 2)))
    np.testing.assert_array_equal(gb, [3.0, 3.0])


def test_tapes_are_thread_local():
    results = {}

    def work(i):
        x = T.Tensor([float(i)])
        with T.Tape() as tape:
            y = x * x * x
        results[i] = tape.backward(y)[x][0]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(1, 9)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results == {i: 3.0 * i * i for i in range(1, 9)}


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e3, 1e3)))
def test_tensor_keeps_shape_and_finiteness(values):
    t = T.Tensor(values)
    out = T.relu(t) * 2.0 - t
    assert out.shape == values.shape
    assert np.isfinite(out.data).all()


# --- momentum SGD ---


def test_sgd_plain_step():
    state = T.MomentumState(lr=1.0, momentum=0.0)
    np.testing.assert_array_equal(T.sgd_momentum_step(np.array([2.0, -1.0]), np.array([0.5, 0.5]), state), [1.5, -1.5])


def test_sgd_zero_grad_keeps_param():
    state = T.MomentumState(lr=0.1)
    p = np.array([1.0, 2.0])
    np.testing.assert_array_equal(T.sgd_momentum_step(p, np.zeros(2), state), p)


def test_sgd_momentum_recurrence():
    state = T.MomentumState(lr=0.1, momentum=0.9)
    p1 = T.sgd_momentum_step(np.array(0.0), np.array(1.0), state)
    p2 = T.sgd_momentum_step(p1, np.array(1.0), state)
    assert float(p1) == pytest.approx(-0.1, abs=1e-15)
    assert float(p2) == pytest.approx(-0.29, abs=1e-15)


@pytest.mark.parametrize("kwargs", [{"lr": 0.0}, {"lr": 0.1, "momentum": 1.0}, {"lr": 0.1, "momentum": -0.1}])
def test_momentum_state_validation(kwargs):
    with pytest.raises(ValueError):
        T.MomentumState(**kwargs)


def test_sgd_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.sgd_momentum_step(np.zeros(2), np.zeros(3), T.MomentumState(lr=0.1))
