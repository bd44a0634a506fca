import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmix import tensor as T
from gmix.errors import GraphConsumedError, ShapeError, ValidationError


def test_matmul_examples():
    b = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(T.matmul(np.eye(2), b).data, b)
    assert np.array_equal(T.matmul([[1.0, 0]], [[2.0], [5.0]]).data, [[2.0]])
    # hand-expanded triple loop
    assert np.array_equal(T.matmul(b, [[5.0, 6], [7, 8]]).data, [[19, 22], [43, 50]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(np.ones((2, 3)), np.ones((2, 2)))


def test_matmul_grads_flow_to_both_inputs():
    a = T.Tensor([[1.0, 2], [3, 4]], requires_grad=True)
    b = T.Tensor([[5.0, 6], [7, 8]], requires_grad=True)
    T.backward(T.tensor_sum(T.matmul(a, b)))
    assert np.array_equal(a.grad, np.ones((2, 2)) @ b.data.T)
    assert np.array_equal(b.grad, a.data.T @ np.ones((2, 2)))


def test_relu_forward_and_subgradient():
    assert np.array_equal(T.relu([-1.0, 0, 2]).data, [0, 0, 2])
    x = np.array([0.5, 3.0])
    assert np.array_equal(T.relu(x).data, x)
    v = T.Tensor([-1.0, 2.0], requires_grad=True)
    T.backward(T.tensor_sum(T.relu(v)))
    assert np.array_equal(v.grad, [0, 1])
    z = T.Tensor([0.0], requires_grad=True)
    T.backward(T.tensor_sum(T.relu(z)))
    assert z.grad[0] == 0.0


def test_cross_entropy_examples():
    ce = T.softmax_cross_entropy
    assert ce([[0.0, 0.0]], [[1.0, 0.0]]).data[0] == pytest.approx(np.log(2), abs=1e-12)
    assert abs(ce([[1000.0, 0.0]], [[1.0, 0.0]]).data[0]) < 1e-12
    # mpmath at 30 digits: -log(e^3 / (e + e^2 + e^3))
    assert ce([[1.0, 2.0, 3.0]], [[0.0, 0.0, 1.0]]).data[0] == pytest.approx(0.40760596444438, abs=1e-12)


def test_cross_entropy_saturated_logits_stay_finite():
    out = T.softmax_cross_entropy([[-1000.0, 1000.0]], [[1.0, 0.0]]).data[0]
    assert out == pytest.approx(2000.0)


def test_cross_entropy_rejects_unnormalized_targets():
    with pytest.raises(ValidationError, match="row 0"):
        T.softmax_cross_entropy([[0.0, 0.0]], [[0.5, 0.4]])
    with pytest.raises(ValidationError):
        T.softmax_cross_entropy([[0.0]], [[1.0]])


def test_cross_entropy_gradient_is_softmax_minus_target():
    z = T.Tensor([[0.3, -1.2, 2.0]], requires_grad=True)
    t = np.array([[0.2, 0.3, 0.5]])
    T.backward(T.tensor_sum(T.softmax_cross_entropy(z, t)))
    p = np.exp(z.data) / np.exp(z.data).sum()
    assert np.allclose(z.grad, p - t, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.floats(-100, 100))
def test_cross_entropy_shift_invariance(row, c):
    z = np.array([row])
    t = np.full_like(z, 1.0 / z.size)
    a = T.softmax_cross_entropy(z, t).data[0]
    b = T.softmax_cross_entropy(z + c, t).data[0]
    assert abs(a - b) < 1e-9


def test_backward_examples():
    x = T.Tensor(3.0, requires_grad=True)
    T.backward(T.mul(x, x))
    assert x.grad == 6.0
    v = T.Tensor([-1.0, 5.0], requires_grad=True)
    T.backward(T.tensor_sum(T.relu(v)))
    assert np.array_equal(v.grad, [0, 1])


def test_backward_errors():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(x, x))
    loss = T.tensor_sum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(GraphConsumedError):
        T.backward(loss)
    y = T.mul(x, 2.0)
    T.backward(T.tensor_sum(y))
    with pytest.raises(GraphConsumedError):
        T.add(y, 1.0)


def test_unreachable_leaf_has_no_gradient_contribution():
    a = T.Tensor([1.0], requires_grad=True)
    b = T.Tensor([2.0], requires_grad=True)
    T.backward(T.tensor_sum(T.mul(a, 3.0)))
    assert a.grad[0] == 3.0 and b.grad is None


def test_gradient_accumulates_across_backward_passes():
    a = T.Tensor([1.0], requires_grad=True)
    T.backward(T.tensor_sum(T.mul(a, 2.0)))
    T.backward(T.tensor_sum(T.mul(a, 5.0)))
    assert a.grad[0] == 7.0


def test_no_grad_records_nothing():
    a = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(a, 2.0)
    assert y.node is None and not y.requires_grad


def test_backward_counter():
    T.backward_counter.reset()
    a = T.Tensor([1.0], requires_grad=True)
    for _ in range(3):
        T.backward(T.tensor_sum(T.mul(a, a)))
    assert T.backward_counter.count == 3


def test_graph_order_is_topological():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    out = T.tensor_sum(T.relu(T.add(T.mul(a, a), a)))
    g = T.Graph.from_output(out)
    pos = {id(t): i for i, t in enumerate(g.tensors)}
    for t in g.tensors:
        for p in t.node.parents:
            if p.node is not None:
                assert pos[id(p)] < pos[id(t)]


def test_grad_check_examples():
    assert T.grad_check(lambda x: T.tensor_sum(T.mul(x, x)), [3.0]) < 1e-8
    w = np.array([0.5, -2.0, 1.5])
    assert T.grad_check(lambda x: T.tensor_sum(T.mul(x, w)), [1.0, 2.0, -1.0]) < 1e-10


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValidationError):
        T.grad_check(lambda x: T.tensor_sum(x), [1.0], h=0.0)


def test_take_rows():
    a = T.Tensor([[1.0, 2], [3, 4], [5, 6]], requires_grad=True)
    T.backward(T.tensor_sum(T.take_rows(a, [2, 0])))
    assert np.array_equal(a.grad, [[1, 1], [0, 0], [1, 1]])
    with pytest.raises(ValidationError):
        T.take_rows(a, [1, 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(seed, ca, cb):
    rng = np.random.default_rng(seed)
    w1, w2 = rng.uniform(-2, 2, size=(4, 3)), rng.uniform(-2, 2, size=(3, 2))
    x = rng.uniform(-2, 2, size=(5, 4))
    t = np.eye(2)[rng.integers(2, size=5)]

    def f(v):
        return T.mean(T.softmax_cross_entropy(T.matmul(T.relu(T.matmul(x, v)), w2), t))

    def g(v):
        return T.tensor_sum(T.mul(T.matmul(x, v), T.matmul(x, v)))

    def grad(fn):
        v = T.Tensor(w1, requires_grad=True)
        T.backward(fn(v))
        return v.grad

    v = T.Tensor(w1, requires_grad=True)
    T.backward(T.add(T.mul(f(v), ca), T.mul(g(v), cb)))
    assert np.allclose(v.grad, ca * grad(f) + cb * grad(g), rtol=0, atol=1e-10 * max(1.0, np.abs(v.grad).max()))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_composed_ops_pass_grad_check(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(3, 4))
    t = rng.dirichlet(np.ones(3), size=3)
    c = rng.uniform(-2, 2, size=4)

    def f(v):
        h = T.add(T.mul(x, v), c)            # (3, 4) broadcast
        z = T.matmul(T.relu(h), rng_w)
        return T.add(T.mean(T.softmax_cross_entropy(z, t)), T.tensor_sum(T.mul(v, v)))

    rng_w = rng.uniform(-2, 2, size=(4, 3))
    assert T.grad_check(f, rng.uniform(-2, 2, size=4)) < 1e-4


def test_determinism_bit_identical():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(6, 3)), rng.normal(size=(3, 2))
    outs = []
    for _ in range(2):
        v = T.Tensor(w, requires_grad=True)
        loss = T.mean(T.softmax_cross_entropy(T.matmul(x, v), np.eye(2)[[0, 1, 0, 1, 1, 0]]))
        T.backward(loss)
        outs.append((loss.data.tobytes(), v.grad.tobytes()))
    assert outs[0] == outs[1]
