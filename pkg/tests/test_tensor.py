import numpy as np
import pytest

from facemetric.functional import dense, euclidean_distance, row_distances
from facemetric.gradcheck import finite_diff_check
from facemetric.tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    concat_channels,
    flatten,
    mean,
    mul,
    relu,
    sigmoid,
    stack,
    tanh,
    tsum,
)


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


def test_sum_gradient_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_zero_times_function_gives_zero_grad():
    x = leaf([1.0, -2.0, 3.0])
    backward(tsum(tanh(x) * 0.0))
    np.testing.assert_array_equal(x.grad, np.zeros(3))


def test_non_scalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_grads_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    backward(tsum(x))
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    backward(tsum(x))
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_intermediate_grads_only_when_retained():
    x = leaf([1.0, 2.0])
    y = x * 3.0
    z = (x * 2.0).retain_grad()
    backward(tsum(y) + tsum(z))
    assert y.grad is None
    np.testing.assert_array_equal(z.grad, [1.0, 1.0])
    np.testing.assert_array_equal(x.grad, [5.0, 5.0])


def test_tape_is_topological():
    x = leaf([1.0, 2.0])
    a = x * 2.0
    b = tanh(a)
    c = a + b
    loss = tsum(c)
    tape = Tape.record(loss)
    pos = {id(t): k for k, t in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node._parents:
            if parent.requires_grad:
                assert pos[id(parent)] < pos[id(node)]
    assert tape.nodes[-1] is loss


def test_shared_subexpression_gradient():
    # d/dx sum(x*x + x) = 2x + 1 with x used three times
    x = leaf([1.0, -2.0, 0.5])
    backward(tsum(mul(x, x) + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_broadcasting_between_tensors():
    with pytest.raises(ShapeError):
        leaf([1.0, 2.0]) + leaf([[1.0, 2.0]])


def test_non_finite_forward_detected():
    with pytest.raises(NonFiniteError):
        leaf([0.0]) ** -1.0


def test_backward_is_linear_in_the_loss():
    rng = np.random.default_rng(0)
    x = leaf(rng.normal(size=5))
    f1 = lambda t: tsum(tanh(t))
    f2 = lambda t: mean(mul(t, t))
    backward(f1(x) + f2(x))
    joint = x.grad.copy()
    x.zero_grad()
    backward(f1(x))
    g1 = x.grad.copy()
    x.zero_grad()
    backward(f2(x))
    np.testing.assert_allclose(joint, g1 + x.grad, rtol=0, atol=1e-15)


def test_finite_diff_square():
    x = leaf([3.0])
    assert finite_diff_check(lambda t: tsum(t * t), x) < 1e-8


def test_finite_diff_linear_machine_precision():
    x = leaf(np.linspace(-1, 1, 7))
    assert finite_diff_check(lambda t: tsum(t * 2.5 + 1.0), x) < 1e-9


@pytest.mark.parametrize("op", [relu, sigmoid, tanh])
def test_activation_gradients(op):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        data = rng.normal(size=(3, 4))
        data[np.abs(data) < 1e-3] = 0.5  # keep away from the relu kink
        w = Tensor(rng.normal(size=(3, 4)))
        assert finite_diff_check(lambda t: tsum(mul(op(t), w)), leaf(data)) < 1e-6


def test_structural_op_gradients():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 5, 4)))
    w = Tensor(rng.normal(size=(2, 8, 4)))
    f = lambda ts: tsum(mul(concat_channels(ts), w))
    assert finite_diff_check(f, [a, b]) < 1e-8
    c = leaf(rng.normal(size=(3, 4)))
    v = Tensor(rng.normal(size=(2, 3, 4)))
    assert finite_diff_check(lambda ts: tsum(mul(stack([ts[0], ts[0] * 2.0]), v)), [c]) < 1e-8


def test_getitem_with_repeated_indices_accumulates():
    x = leaf([1.0, 2.0, 3.0])
    backward(tsum(x[np.array([0, 0, 2])]))
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_concat_channels_counts():
    a, b = Tensor(np.zeros((4, 2, 5, 5))), Tensor(np.zeros((4, 3, 5, 5)))
    assert concat_channels([a, b]).shape == (4, 5, 5, 5)
    assert concat_channels([Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((3, 5, 5)))], batched=False).shape == (5, 5, 5)
    with pytest.raises(ShapeError):
        concat([a, Tensor(np.zeros((4, 3, 6, 5)))], axis=1)


def test_flatten_keeps_batch():
    assert flatten(Tensor(np.zeros((3, 2, 4, 5)))).shape == (3, 40)


def test_euclidean_distance_345():
    assert euclidean_distance(Tensor([0.0, 0.0]), Tensor([3.0, 4.0])).item() == 5.0


def test_distance_to_self_is_zero_with_zero_gradient():
    u = leaf([1.0, 2.0])
    v = leaf([1.0, 2.0])
    d = euclidean_distance(u, v)
    assert d.item() == 0.0
    backward(d)
    np.testing.assert_array_equal(u.grad, [0.0, 0.0])


def test_row_distance_gradient():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.normal(size=(4, 3))), leaf(rng.normal(size=(4, 3)))
    assert finite_diff_check(lambda ts: tsum(row_distances(ts[0], ts[1])), [a, b]) < 1e-8


def test_dense_identity_and_constant():
    x = Tensor([1.0, -2.0, 3.0])
    y = dense(x, Tensor(np.eye(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(y.data, x.data)
    c = np.array([0.5, -0.5])
    for act, fn in (("relu", lambda v: np.maximum(v, 0)), ("tanh", np.tanh), ("linear", lambda v: v)):
        out = dense(x, Tensor(np.zeros((2, 3))), Tensor(c), act)
        np.testing.assert_allclose(out.data, fn(c))
