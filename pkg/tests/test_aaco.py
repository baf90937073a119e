import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afabench.policies.aaco import (
    AacoPolicy,
    KnnIndex,
    aaco_objective,
    aaco_select,
    candidate_subsets,
)
from afabench.policies.base import NoLegalFeature

from helpers import copy_dataset
from oracles import brute_force_select, empirical_expectation, knn_rows, linear_softmax


def toy(d=3, n=30, seed=0, c=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.integers(0, c, n)


def test_empty_subset_is_current_prediction_loss():
    x, y = toy()
    f = linear_softmax(3, 2, 0)
    knn = KnnIndex(x, y, k=5)
    values, mask = np.array([0.3, 0.0, 0.0]), np.array([1.0, 0.0, 0.0])
    rows = knn.neighbors(values, mask)
    p = f(values[None], mask[None])[0]
    want = np.mean([-np.log(p[y[j]]) for j in rows])
    assert aaco_objective(values, mask, (), knn, f, alpha=3.0) == pytest.approx(want, abs=1e-12)


def test_exact_expectation_with_all_rows():
    x, y = toy(d=3, n=25)
    f = linear_softmax(3, 2, 1)
    knn = KnnIndex(x, y, k=25)
    for values, mask, subset in [(np.zeros(3), np.zeros(3), (0, 2)),
                                 (np.array([0.0, 1.1, 0.0]), np.array([0, 1, 0.]), (2,))]:
        got = aaco_objective(values, mask, subset, knn, f)
        want = empirical_expectation(x, y, values, mask, subset, f)
        assert abs(got - want) <= 1e-9


def test_large_alpha_prefers_smallest_subset():
    x, y = toy(d=4)
    f = linear_softmax(4, 2, 2)
    knn = KnnIndex(x, y, k=10)
    _, cand = aaco_select(np.zeros(4), np.zeros(4), knn, f, alpha=1e6, exhaustive=True,
                          return_subset=True)
    assert len(cand.features) == 1


def test_remaining_one_is_singleton_lookahead():
    x, y = toy(d=5, n=40)
    f = linear_softmax(5, 2, 3)
    knn = KnnIndex(x, y, k=7)
    values, mask = np.array([0.5, 0, 0, 0, 0]), np.array([1.0, 0, 0, 0, 0])
    got = aaco_select(values, mask, knn, f, remaining=1)
    objs = [aaco_objective(values, mask, (i,), knn, f) for i in range(1, 5)]
    assert got == 1 + int(np.argmin(objs))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), d=st.integers(2, 6))
def test_matches_brute_force(seed, d):
    x, y = toy(d=d, n=20, seed=seed, c=3)
    f = linear_softmax(d, 3, seed)
    rng = np.random.default_rng(seed)
    mask = (rng.random(d) < 0.3).astype(float)
    if mask.sum() == d:
        mask[0] = 0
    values = rng.normal(size=d) * mask
    k, remaining = 6, int(rng.integers(1, d + 1))
    knn = KnnIndex(x, y, k=k)
    got = aaco_select(values, mask, knn, f, remaining=remaining, exhaustive=True)
    want, _, _ = brute_force_select(x, y, values, mask, f, k, remaining)
    assert got == want


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_knn_matches_reference(seed):
    x, y = toy(d=4, n=30, seed=seed)
    rng = np.random.default_rng(seed)
    mask = (rng.random(4) < 0.5).astype(float)
    values = rng.normal(size=4) * mask
    got = KnnIndex(x, y, k=8).neighbors(values, mask)
    want = knn_rows(x, values, mask, 8)
    if mask.sum():
        d = KnnIndex(x, y, k=8).distances(values, mask)
        # compare as sets of distances to stay robust to exact ties
        np.testing.assert_allclose(np.sort(d[got]), np.sort(d[want]))
    else:
        assert list(got) == want


def test_row_order_invariance_with_full_k():
    x, y = toy(d=3, n=20, seed=4)
    f = linear_softmax(3, 2, 4)
    perm = np.random.default_rng(0).permutation(20)
    values, mask = np.array([0, 0.7, 0]), np.array([0, 1.0, 0])
    a = aaco_objective(values, mask, (0, 2), KnnIndex(x, y, k=20), f)
    b = aaco_objective(values, mask, (0, 2), KnnIndex(x[perm], y[perm], k=20), f)
    assert a == pytest.approx(b, abs=1e-12)


def test_candidates_disjoint_from_observed():
    subs = candidate_subsets([1, 3, 4], 2, 50, np.random.default_rng(0))
    assert all(set(s) <= {1, 3, 4} for s in subs)
    assert {(1,), (3,), (4,)} <= set(subs)
    assert len(set(subs)) == len(subs)


def test_overlapping_subset_rejected():
    x, y = toy()
    with pytest.raises(ValueError):
        aaco_objective(np.zeros(3), np.array([1.0, 0, 0]), (0,), KnnIndex(x, y, 3),
                       linear_softmax(3, 2, 0))


def test_no_legal_feature():
    x, y = toy()
    with pytest.raises(NoLegalFeature):
        aaco_select(np.zeros(3), np.ones(3), KnnIndex(x, y, 3), linear_softmax(3, 2, 0))


def test_k_bounds():
    x, y = toy(n=5)
    with pytest.raises(ValueError):
        KnnIndex(x, y, k=6)


def test_single_informative_feature_first():
    from afabench.predictor import pretrain_shared

    b = copy_dataset(n=600, n_noise=3, seed=0, copy_index=2)
    pred = pretrain_shared(b, seed=0)
    pol = AacoPolicy(KnnIndex(b.train.features, b.train.labels), pred, budget=2, n_samples=50)
    x = b.test.features[:40]
    first = pol.select(np.zeros_like(x), np.zeros_like(x))
    assert (first == 2).mean() >= 0.95
