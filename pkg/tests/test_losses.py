import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from facemetric.gradcheck import finite_diff_check
from facemetric.losses import (
    Margin,
    PairExample,
    TripletExample,
    batch_loss,
    contrastive_loss,
    triplet_loss,
)
from facemetric.tensor import ShapeError, Tensor, backward

from oracles import contrastive_formula, triplet_formula


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=float), requires_grad=True)


@pytest.mark.parametrize(
    "a,p,n,m,expected",
    [
        ((0, 0), (0, 0), (1, 0), 0.5, 0.0),
        ((2, 3), (2, 3), (2, 3), 0.7, 0.7),
        ((0, 0), (1, 0), (0.5, 0), 1.25, 1.75),
    ],
)
def test_triplet_examples(a, p, n, m, expected):
    assert triplet_loss([a], [p], [n], m).data[0] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize(
    "u,v,y,m,expected",
    [
        ((0.0, 0.0), (0.5, 0.0), 0, 1.0, 0.125),
        ((1.0, 1.0), (1.0, 1.0), 1, 1.0, 0.5),
        ((0.0, 0.0), (2.0, 0.0), 1, 1.0, 0.0),
    ],
)
def test_contrastive_examples(u, v, y, m, expected):
    assert contrastive_loss([u], [v], y, m).data[0] == pytest.approx(expected, abs=1e-12)


def test_errors():
    with pytest.raises(ShapeError):
        triplet_loss([[0.0, 0.0]], [[0.0, 0.0]], [[0.0, 0.0, 0.0]], 1.0)
    with pytest.raises(ValueError):
        contrastive_loss([[0.0]], [[1.0]], 2, 1.0)
    with pytest.raises(ValueError):
        batch_loss(Tensor(np.zeros((2, 2))), [], 1.0)
    with pytest.raises(IndexError):
        batch_loss(Tensor(np.zeros((2, 2))), [TripletExample(0, 1, 2)], 1.0)


@pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
def test_margin_validation(bad):
    with pytest.raises(ValueError):
        Margin(bad)


def test_batch_of_inactive_hinges_has_zero_loss_and_grad():
    emb = leaf([[0.0, 0.0], [0.0, 0.1], [5.0, 0.0], [0.0, 5.0]])
    loss = batch_loss(emb, [TripletExample(0, 1, 2), TripletExample(1, 0, 3)], 1.0)
    backward(loss)
    assert loss.item() == 0.0
    np.testing.assert_array_equal(emb.grad, 0.0)


def test_single_example_equals_scalar_op():
    rng = np.random.default_rng(0)
    e = rng.normal(size=(3, 4))
    batch = batch_loss(Tensor(e), [TripletExample(0, 1, 2)], 0.3).item()
    assert batch == triplet_loss(e[:1], e[1:2], e[2:3], 0.3).data[0]


def test_batch_of_16_triplets_matches_per_example_oracle():
    rng = np.random.default_rng(11)
    e = rng.normal(size=(32, 8))
    idx = rng.integers(0, 32, size=(16, 3))
    examples = [TripletExample(*map(int, r)) for r in idx]
    expected = np.mean([triplet_formula(e[a], e[p], e[n], 1.25) for a, p, n in idx])
    assert abs(batch_loss(Tensor(e), examples, 1.25).item() - expected) < 1e-12


def test_batch_of_pairs_matches_per_example_oracle():
    rng = np.random.default_rng(12)
    e = rng.normal(size=(32, 8)) * 0.2
    rows = [(int(i), int(j), int(y)) for i, j, y in zip(rng.integers(0, 32, 32), rng.integers(0, 32, 32), rng.integers(0, 2, 32))]
    expected = np.mean([contrastive_formula(e[i], e[j], y, 1.0) for i, j, y in rows])
    got = batch_loss(Tensor(e), [PairExample(*r) for r in rows], 1.0).item()
    assert abs(got - expected) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    emb = leaf(rng.normal(size=(8, 5)) * 0.3)
    triplets = [TripletExample(*map(int, rng.choice(8, 3, replace=False))) for _ in range(6)]
    pairs = [PairExample(int(i), int(j), int(rng.integers(0, 2))) for i, j in (rng.choice(8, 2, replace=False) for _ in range(6))]
    assert finite_diff_check(lambda t: batch_loss(t, triplets, 1.0), emb) < 1e-4
    assert finite_diff_check(lambda t: batch_loss(t, pairs, 1.0), emb) < 1e-4


def test_zero_distance_subgradient_is_zero():
    e = leaf([[1.0, 2.0], [1.0, 2.0]])
    backward(batch_loss(e, [PairExample(0, 1, 1)], 1.0))
    np.testing.assert_array_equal(e.grad, 0.0)


vecs = arrays(np.float64, (3, 4), elements=st.floats(-10, 10))
margins = st.floats(0, 5)


@settings(max_examples=60, deadline=None)
@given(vecs, margins, arrays(np.float64, 4, elements=st.floats(-50, 50)))
def test_triplet_properties(e, m, shift):
    loss = triplet_loss(e[:1], e[1:2], e[2:3], m).data[0]
    assert loss >= 0
    assert loss == pytest.approx(triplet_formula(e[0], e[1], e[2], m), abs=1e-9)
    moved = triplet_loss(e[:1] + shift, e[1:2] + shift, e[2:3] + shift, m).data[0]
    assert moved == pytest.approx(loss, abs=1e-7)
    d_ap, d_an = np.linalg.norm(e[0] - e[1]), np.linalg.norm(e[0] - e[2])
    if d_ap + m < d_an - 1e-9:
        assert loss == 0.0
    if d_ap + m > d_an + 1e-9:
        assert loss > 0.0


@settings(max_examples=60, deadline=None)
@given(margins, st.floats(0, 10), st.floats(0, 10), arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_contrastive_monotonicity(m, d1, d2, shift):
    lo, hi = sorted((d1, d2))
    pair = lambda d, y: contrastive_loss([shift], [shift + np.array([d, 0.0, 0.0])], y, m).data[0]
    assert 0 <= pair(lo, 0) <= pair(hi, 0) + 1e-12
    assert pair(lo, 1) + 1e-12 >= pair(hi, 1) >= 0
    # the zero region is decided by the distance the loss actually sees after the shift rounds
    if abs((shift[0] + hi) - shift[0]) >= m:
        assert pair(hi, 1) == 0.0
