import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stereolidar import tensor as T
from stereolidar.tensor import NonFiniteError, ShapeError, Tensor


def _fd_grad(f, x: Tensor, eps=1e-5):
    g = np.zeros_like(x.data)
    for idx in np.ndindex(x.shape):
        orig = x.data[idx]
        x.data[idx] = orig + eps
        hi = f().item()
        x.data[idx] = orig - eps
        lo = f().item()
        x.data[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def test_matmul_identity_and_hand_product():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), m).data, m.data)
    assert np.array_equal(T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    f = lambda: T.tsum(T.matmul(a, b))
    T.backward(f())
    assert _rel(a.grad, _fd_grad(f, a)) <= 1e-6


def test_relu_and_sigmoid():
    assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert np.array_equal(T.relu(Tensor([-3.0, -0.1])).data, [0.0, 0.0])
    assert T.sigmoid(Tensor([0.0])).item() == 0.5
    ys = T.sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert np.all(np.diff(ys) >= 0) and ys[-1] > 1 - 1e-12 and ys[-1] <= 1.0


def test_batch_norm_constant_column_is_zero():
    x = Tensor(np.column_stack([np.full(5, 3.0), np.arange(5.0)]))
    y = T.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    assert np.all(y.data[:, 0] == 0.0)
    assert abs(y.data[:, 1].mean()) < 1e-12


def test_batch_norm_needs_two_rows():
    with pytest.raises(ShapeError):
        T.batch_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_max_pool_points():
    assert np.array_equal(T.max_pool_points(Tensor([[1.0, 5.0], [3.0, 2.0]])).data, [[3.0, 5.0]])
    assert np.array_equal(T.max_pool_points(Tensor([[1.0, -2.0]])).data, [[1.0, -2.0]])


def test_elementwise_identities():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)))
    assert np.array_equal(T.mean2(a, a).data, a.data)
    assert np.array_equal(T.mean2(a, b).data, T.mean2(b, a).data)
    assert np.array_equal(T.mul(Tensor(np.ones((4, 3))), b).data, b.data)
    with pytest.raises(ShapeError):
        T.add(a, Tensor(np.ones((3, 4))))
    with pytest.raises(ValueError):
        T.elementwise("div", a, b)


def test_add_gradient_is_pass_through():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    T.backward(T.tsum(T.add(a, b)))
    assert np.array_equal(a.grad, np.ones((2, 2))) and np.array_equal(b.grad, np.ones((2, 2)))


def test_concat_and_slice_round_trip():
    rng = np.random.default_rng(2)
    a, b = Tensor(rng.normal(size=(5, 2))), Tensor(rng.normal(size=(5, 3)))
    assert np.array_equal(T.concat([a], axis=1).data, a.data)
    c = T.concat([a, b], axis=1)
    assert c.shape == (5, 5)
    assert np.array_equal(T.slice_axis(c, 0, 2, axis=1).data, a.data)
    assert np.array_equal(T.slice_axis(c, 2, 5, axis=1).data, b.data)
    with pytest.raises(ShapeError):
        T.concat([a, Tensor(np.ones((4, 3)))], axis=1)
    with pytest.raises(ShapeError):
        T.concat([a, b], axis=2)


def test_backward_sum_and_unreachable_leaf():
    x = Tensor(np.arange(3.0), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    T.backward(T.tsum(x))
    assert np.array_equal(x.grad, np.ones(3))
    assert unused.grad is None
    with pytest.raises(ShapeError):
        T.backward(x)


def test_backward_composite_mlp_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(6, 4)))
    w1 = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    f = lambda: T.tsum(T.matmul(T.relu(T.matmul(x, w1)), w2))
    T.backward(f())
    assert _rel(w1.grad, _fd_grad(f, w1)) <= 1e-5
    assert _rel(w2.grad, _fd_grad(f, w2)) <= 1e-5


def test_sgd_step():
    w = Tensor([1.0], requires_grad=True)
    T.backward(T.tsum(T.mul(w, w)))
    T.sgd_step([w], lr=0.1)
    assert w.data[0] == pytest.approx(0.8, abs=1e-15)
    before = w.data.copy()
    T.sgd_step([w], [np.array([5.0])], lr=0.0)
    assert np.array_equal(w.data, before)
    with pytest.raises(ShapeError):
        T.sgd_step([w], [np.ones(2)], lr=0.1)


def test_sgd_converges_on_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    for _ in range(200):
        T.zero_grad([w])
        d = T.sub(w, Tensor(target))
        T.backward(T.tsum(T.mul(d, d)))
        T.sgd_step([w], lr=0.05)
    assert np.sum((w.data - target) ** 2) < 1e-4


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-10, 10)), arrays(np.float64, (3, 2), elements=st.floats(-10, 10)))
def test_matmul_forward_is_deterministic(a, b):
    first = T.matmul(Tensor(a), Tensor(b)).data
    second = T.matmul(Tensor(a), Tensor(b)).data
    assert first.tobytes() == second.tobytes()
    assert np.allclose(first, a @ b, atol=1e-9)
