import numpy as np
import pytest

from facemetric.functional import batchnorm, conv2d, conv3d, dense, maxpool, maxpool2d, maxpool3d, output_extent
from facemetric.gradcheck import finite_diff_check
from facemetric.tensor import ShapeError, Tensor, backward, mul, tsum

from oracles import naive_conv2d, naive_conv3d, naive_dense, naive_maxpool


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


def weighted_sum(out_shape, seed):
    w = Tensor(np.random.default_rng(seed).normal(size=out_shape))
    return lambda t: tsum(mul(t, w))


# -- shapes and worked examples -----------------------------------------------

def test_conv2d_ones_valid():
    out = conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]), padding="valid")
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 4.0))


def test_conv2d_same_shape():
    x = Tensor(np.zeros((3, 100, 100)))
    assert conv2d(x, Tensor(np.zeros((16, 3, 3, 3))), Tensor(np.zeros(16))).shape == (16, 100, 100)


def test_conv3d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 4, 5, 6))
    out = conv3d(Tensor(x), Tensor(np.ones((1, 1, 1, 1, 1))), Tensor([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv3d_same_shape():
    out = conv3d(Tensor(np.zeros((3, 8, 16, 16))), Tensor(np.zeros((8, 3, 3, 3, 3))), Tensor(np.zeros(8)))
    assert out.shape == (8, 8, 16, 16)


@pytest.mark.parametrize("size,k,stride", [(7, 3, 1), (7, 3, 2), (8, 2, 3), (5, 5, 1), (4, 1, 2)])
def test_extent_formulas(size, k, stride):
    assert output_extent(size, k, stride, "valid")[0] == (size - k) // stride + 1
    assert output_extent(size, k, stride, "same")[0] == -(-size // stride)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), padding="valid")
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


def test_maxpool_examples():
    assert maxpool2d(Tensor([[[1.0, 2.0], [3.0, 4.0]]])).data.item() == 4.0
    x = leaf(np.full((1, 2, 2), 7.0))
    out = maxpool2d(x)
    backward(tsum(out))
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_window_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 3))), (2, 2))


# -- naive-loop oracles (DERIVED) --------------------------------------------

def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(42)
    x, w, b = rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    for padding in ("valid", "same"):
        for stride in ((1, 1), (2, 1), (2, 2)):
            out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
            np.testing.assert_allclose(out, naive_conv2d(x, w, b, stride, padding), rtol=0, atol=1e-12)


def test_conv3d_matches_loop_oracle():
    rng = np.random.default_rng(7)
    x, w, b = rng.normal(size=(1, 4, 4, 4)), rng.normal(size=(2, 1, 2, 2, 2)), rng.normal(size=2)
    for padding in ("valid", "same"):
        out = conv3d(Tensor(x), Tensor(w), Tensor(b), padding=padding).data
        np.testing.assert_allclose(out, naive_conv3d(x, w, b, padding), rtol=0, atol=1e-12)


def test_maxpool3d_matches_loop_oracle():
    x = np.random.default_rng(3).normal(size=(1, 2, 6, 6))
    np.testing.assert_array_equal(maxpool3d(Tensor(x)).data, naive_maxpool(x, (2, 2, 2)))


def test_batched_equals_per_sample():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(3, 2, 6, 6)), rng.normal(size=(4, 2, 3, 3))
    batched = conv2d(Tensor(x), Tensor(w), None).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d(Tensor(x[i]), Tensor(w), None).data, atol=1e-13)


def test_dense_matches_loop_oracle():
    rng = np.random.default_rng(8)
    x, w, b = rng.normal(size=8), rng.normal(size=(4, 8)), rng.normal(size=4)
    np.testing.assert_allclose(dense(Tensor(x), Tensor(w), Tensor(b)).data, naive_dense(x, w, b), atol=1e-12)


# -- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng.normal(size=(2, 3, 6, 5))), leaf(rng.normal(size=(4, 3, 3, 2))), leaf(rng.normal(size=4))
    stride = (1, 1) if seed % 2 == 0 else (2, 1)
    padding = "same" if seed < 3 else "valid"
    shape = conv2d(x, w, b, stride, padding).shape
    f = weighted_sum(shape, seed + 100)
    assert finite_diff_check(lambda ts: f(conv2d(ts[0], ts[1], ts[2], stride, padding)), [x, w, b]) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_conv3d_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng.normal(size=(2, 2, 4, 4, 3))), leaf(rng.normal(size=(3, 2, 3, 3, 3))), leaf(rng.normal(size=3))
    f = weighted_sum(conv3d(x, w, b).shape, seed + 200)
    assert finite_diff_check(lambda ts: f(conv3d(ts[0], ts[1], ts[2])), [x, w, b], max_coords=40, seed=seed) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_maxpool_gradients(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(2, 3, 4, 6, 6)))  # distinct values: no ties
    window = (1, 2, 2) if seed % 2 else (2, 2, 2)
    padding = "same" if seed == 4 else "valid"
    f = weighted_sum(maxpool(x, window, padding=padding).shape, seed)
    assert finite_diff_check(lambda t: f(maxpool(t, window, padding=padding)), x) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_dense_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=4))
    act = ("linear", "relu", "tanh", "sigmoid", "relu")[seed]
    f = weighted_sum((3, 4), seed)
    assert finite_diff_check(lambda ts: f(dense(ts[0], ts[1], ts[2], act)), [x, w, b]) < 1e-6


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    x = leaf(rng.normal(size=(4, 3, 2, 5)))
    gamma, beta = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)
    f = weighted_sum(x.shape, seed)

    def g(ts):
        # fresh copies so buffer updates never leak between evaluations
        return f(batchnorm(ts[0], ts[1], ts[2], rm.copy(), rv.copy(), training))

    assert finite_diff_check(g, [x, gamma, beta]) < 1e-6


def test_batchnorm_zero_variance_channel_is_finite():
    x = np.random.default_rng(0).normal(size=(4, 2, 3))
    x[:, 1] = 5.0
    out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2), True)
    assert np.isfinite(out.data).all()
    np.testing.assert_array_equal(out.data[:, 1], 0.0)


def test_batchnorm_running_statistics():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(16, 2, 4))
    rm, rv = np.zeros(2), np.ones(2)
    batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, True, momentum=0.9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2)))
    out = batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False)
    expect = (x - rm[None, :, None]) / np.sqrt(rv[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.data, expect)
