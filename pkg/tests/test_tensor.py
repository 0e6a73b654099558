import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amdim import tensor as T
from amdim.tensor import ShapeError, Tensor

from gradcheck import PRIMITIVES, check_grads
from oracles import adam_scalar, conv2d_loops, matmul_loops, mean_pool_loops


# --- conv2d ---------------------------------------------------------------

def test_conv_sum_of_ones():
    y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), 1)
    np.testing.assert_array_equal(y.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_identity_kernel():
    x = np.random.default_rng(1).standard_normal((2, 1, 4, 5))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), 1)
    np.testing.assert_array_equal(y.data, x)


@pytest.mark.parametrize("seed", range(5))
def test_conv_matches_loops(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    y = T.conv2d(Tensor(x), Tensor(w), 2)
    np.testing.assert_allclose(y.data, conv2d_loops(x, w, 2), rtol=0, atol=1e-12)


def test_conv_rejects_non_integral_extent():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), 2)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 2, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))), 1)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), 1)


# --- mean_pool ------------------------------------------------------------

def test_mean_pool_small():
    y = T.mean_pool(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
    assert y.data.item() == 2.5


def test_mean_pool_constant():
    y = T.mean_pool(Tensor(np.full((2, 3, 6, 6), 0.7)), 3, 1)
    np.testing.assert_allclose(y.data, 0.7, rtol=0, atol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_mean_pool_matches_loops(seed):
    x = np.random.default_rng(seed).standard_normal((1, 1, 6, 6))
    np.testing.assert_allclose(T.mean_pool(Tensor(x), 3, 3).data, mean_pool_loops(x, 3, 3), rtol=0, atol=1e-12)


def test_mean_pool_rejects():
    with pytest.raises(ShapeError):
        T.mean_pool(Tensor(np.zeros((1, 1, 6, 6))), 4, 3)


# --- elementwise / matmul / log_softmax ----------------------------------

def test_elementwise_examples():
    assert T.elementwise("relu", Tensor(np.array(-1.5))).data == 0.0
    assert T.elementwise("tanh", Tensor(np.array(0.0))).data == 0.0
    s = Tensor(np.array(0.0), requires_grad=True)
    y = T.scale(T.tanh(T.scale(s, 1 / 20)), 20)
    y.backward()
    assert s.grad == pytest.approx(1.0, abs=1e-15)


def test_relu_subgradient_at_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    T.sum(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    y = T.add(Tensor(np.zeros((2, 3))), Tensor(np.array(2.0)))
    np.testing.assert_array_equal(y.data, np.full((2, 3), 2.0))
    with pytest.raises(ShapeError):
        T.elementwise("power", Tensor(np.zeros(2)))


def test_matmul_examples():
    a = np.random.default_rng(0).standard_normal((3, 4))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@pytest.mark.parametrize("seed", range(3))
def test_matmul_matches_loops(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((4, 6)), rng.standard_normal((6, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), rtol=0, atol=1e-12)


def test_log_softmax_examples():
    np.testing.assert_allclose(T.log_softmax(Tensor([0.0, 0.0])).data, [-math.log(2)] * 2, rtol=0, atol=1e-15)
    assert T.log_softmax(Tensor([3.0])).data.tolist() == [0.0]
    np.testing.assert_allclose(T.log_softmax(Tensor([1000.0, 1000.0])).data, [-math.log(2)] * 2, rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        T.log_softmax(Tensor([0.0, np.nan]))
    with pytest.raises(ShapeError):
        T.log_softmax(Tensor([0.0, np.inf]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_log_softmax_normalizes(values):
    y = T.log_softmax(Tensor(np.array(values)))
    assert abs(np.exp(y.data).sum() - 1.0) < 1e-12


# --- backward -------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    y = Tensor(np.array(3.0), requires_grad=True)
    T.mul(y, y).backward()
    assert y.grad == 6.0


def test_backward_accumulates_and_rejects_non_scalar():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = T.sum(T.square(x))
    loss.backward()
    loss.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    with pytest.raises(ShapeError):
        T.square(x).backward()


def test_backward_visits_reverse_construction_order():
    visited = []
    x = Tensor(np.array(1.5), requires_grad=True)
    h = x
    for k in range(6):
        h = T.tanh(h) if k % 2 else T.scale(h, 1.1)
        fn = h._node.backward
        h._node.backward = (lambda fn, seq: lambda g: (visited.append(seq), fn(g))[1])(fn, h._node.seq)
    h.backward()
    assert visited == sorted(visited, reverse=True) and len(visited) == 6


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
        y = T.relu(T.conv2d(x, w, 1))
        T.sum(T.tanh(T.mean_pool(y, 2, 2))).backward()
        return x.grad.copy(), w.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(name, seed):
    build, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(1000 + seed)
    arrays = [rng.standard_normal(s) for s in shapes]
    check_grads(build, arrays, seed=seed)


# --- adam -----------------------------------------------------------------

def test_adam_zero_gradient_no_move():
    p = Tensor(np.array([1.0, -2.0]))
    st_ = T.adam_init([p])
    T.adam_step([p], [np.zeros(2)], st_, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr_sign():
    g = np.array([0.3, -5.0, 1e-3])
    p = Tensor(np.zeros(3))
    st_ = T.adam_init([p])
    T.adam_step([p], [g], st_, lr=0.01, beta1=0.8, beta2=0.999, eps=1e-8)
    # closed form: m_hat = g, v_hat = g^2 -> step = lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=0, atol=1e-7)


def test_adam_matches_scalar_reference():
    grads = [0.7, -1.3]
    p = Tensor(np.array([0.25]))
    st_ = T.adam_init([p])
    for g in grads:
        T.adam_step([p], [np.array([g])], st_, lr=2e-4, beta1=0.8, beta2=0.999, eps=1e-8)
    assert abs(p.data[0] - adam_scalar(0.25, grads, 2e-4, 0.8, 0.999, 1e-8)) < 1e-12


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3))
    with pytest.raises(ShapeError):
        T.adam_step([p], [np.zeros(2)], T.adam_init([p]))


def test_float32_mode():
    with T.default_dtype(np.float32):
        x = Tensor(np.ones((1, 1, 3, 3)), requires_grad=True)
        y = T.sum(T.conv2d(x, Tensor(np.ones((1, 1, 2, 2))), 1))
        assert y.dtype == np.float32
        y.backward()
        assert x.grad.dtype == np.float32
    assert T.get_default_dtype() is np.float64
