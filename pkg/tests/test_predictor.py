import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from afabench.datasets import CubeSpec, DatasetBundle, TabularDataset
from afabench.nnkit import DimensionError, TrainConfig
from afabench.predictor import (
    MaskedInput,
    SharedPredictor,
    encode,
    mc_dropout_batch,
    mc_dropout_certainty,
    predict,
    pretrain_shared,
)


def cube_bayes(x, mask, spec=CubeSpec()):
    """Posterior argmax under the known CUBE generative model (uniform prior)."""
    ll = np.zeros((len(x), spec.n_classes))
    for k in range(spec.n_classes):
        mu = np.full(spec.n_features, spec.noise_mean)
        sd = np.full(spec.n_features, spec.noise_sigma)
        mu[k:k + 3] = [(k >> j) & 1 for j in range(3)]
        sd[k:k + 3] = spec.informative_sigma
        ll[:, k] = ((-0.5 * ((x - mu) / sd) ** 2 - np.log(sd)) * mask).sum(1)
    return ll.argmax(1)


def informative_mask(y, d):
    m = np.zeros((len(y), d))
    for i, k in enumerate(y):
        m[i, k:k + 3] = 1
    return m


def test_encode_concatenates_masked_values():
    e = encode(np.array([[2.0, 3.0]]), np.array([[1.0, 0.0]]))
    torch.testing.assert_close(e, torch.tensor([[2.0, 0.0, 1.0, 0.0]]))


def test_masked_input_zeroes_unobserved():
    m = MaskedInput([1.0, 2.0, 3.0], [0, 1, 0])
    np.testing.assert_array_equal(m.values, [0, 2, 0])


def test_full_feature_accuracy_near_bayes(cube, cube_predictor):
    x, y = cube.test.features, cube.test.labels
    full = np.ones_like(x)
    bayes = (cube_bayes(x, full) == y).mean()
    acc = (cube_predictor(x, full).argmax(1) == y).mean()
    assert acc >= bayes - 0.03


def test_true_informative_features_near_bayes(cube, cube_predictor):
    x, y = cube.test.features, cube.test.labels
    m = informative_mask(y, cube.d)
    bayes = (cube_bayes(x, m) == y).mean()
    acc = (cube_predictor(x, m).argmax(1) == y).mean()
    assert bayes > 0.8
    assert acc >= bayes - 0.03


def test_no_features_gives_weighted_prior(cube, cube_predictor):
    # inverse-frequency weights make the optimal constant prediction uniform
    p = cube_predictor(np.zeros((1, cube.d)), np.zeros((1, cube.d)))[0]
    assert 0.5 * np.abs(p - 1 / 8).sum() < 0.05


def test_no_features_unweighted_gives_class_prior():
    rng = np.random.default_rng(0)
    y = rng.choice(3, size=1000, p=[0.6, 0.3, 0.1])
    x = np.zeros((1000, 4))  # features carry nothing, so the fit is the prior
    parts = [TabularDataset(x[s], y[s], 3, t, "prior") for s, t in
             ((slice(0, 700), "train"), (slice(700, 850), "val"), (slice(850, None), "test"))]
    bundle = DatasetBundle("prior", *parts, num_classes=3, seed=0)
    pred = pretrain_shared(bundle, cfg=TrainConfig(learning_rate=1e-2, max_epochs=40, early_stop_patience=40,
                                                       class_weights=[1.0, 1.0, 1.0]),
                           hidden=(16,), seed=0)
    p = pred(np.zeros((1, 4)), np.zeros((1, 4)))[0]
    prior = np.bincount(y[:700], minlength=3) / 700
    assert 0.5 * np.abs(p - prior).sum() < 0.05


def test_single_class_dataset_is_trivial():
    x = np.random.default_rng(0).normal(size=(40, 3))
    y = np.zeros(40, dtype=int)
    parts = [TabularDataset(x[s], y[s], 1, t, "one") for s, t in
             ((slice(0, 28), "train"), (slice(28, 34), "val"), (slice(34, None), "test"))]
    pred = pretrain_shared(DatasetBundle("one", *parts, num_classes=1, seed=0),
                           cfg=TrainConfig(max_epochs=3), hidden=(8,))
    assert np.all(pred(parts[2].features, np.ones((6, 3))).argmax(1) == 0)


def test_predict_deterministic_and_normalised(cube, cube_predictor):
    m = MaskedInput(cube.test.features[0], (np.arange(cube.d) % 2).astype(float))
    a, b = predict(cube_predictor, m), predict(cube_predictor, m)
    np.testing.assert_array_equal(a, b)
    assert a.sum() == pytest.approx(1.0, abs=1e-6)


def test_predict_dimension_check(cube_predictor):
    with pytest.raises(DimensionError):
        cube_predictor.predict_proba(np.zeros((1, 3)), np.ones((1, 3)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_probabilities_sum_to_one(cube_predictor, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 20)) * 3
    m = (rng.random((4, 20)) < rng.random()).astype(float)
    p = cube_predictor(x, m)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)


def test_unobserved_values_are_ignored(cube_predictor):
    rng = np.random.default_rng(0)
    m = (rng.random((5, 20)) < 0.5).astype(float)
    x1, x2 = rng.normal(size=(5, 20)), rng.normal(size=(5, 20))
    x2 = np.where(m > 0, x1, x2)
    np.testing.assert_array_equal(cube_predictor(x1, m), cube_predictor(x2, m))


def test_mc_dropout_single_pass_no_dropout_equals_predict(cube):
    pred = pretrain_shared(cube, cfg=TrainConfig(max_epochs=2), dropout=0.0, hidden=(16,))
    m = MaskedInput(cube.test.features[:3], np.ones((3, cube.d)))
    np.testing.assert_allclose(mc_dropout_certainty(pred, m, passes=1, seed=0),
                               pred.predict_proba(m.values, m.mask), atol=1e-6)


def test_mc_dropout_seeded(cube_predictor):
    x, m = np.ones((2, 20)), np.ones((2, 20))
    a = mc_dropout_batch(cube_predictor.mlp, x, m, 10, seed=4)
    b = mc_dropout_batch(cube_predictor.mlp, x, m, 10, seed=4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a.sum(1), 1.0, atol=1e-9)
    with pytest.raises(ValueError):
        mc_dropout_batch(cube_predictor.mlp, x, m, 0)


def test_checkpoint_round_trip_bitwise(tmp_path, cube, cube_predictor):
    cube_predictor.save(tmp_path / "p.json")
    back = SharedPredictor.load(tmp_path / "p.json")
    x, m = cube.test.features, np.ones_like(cube.test.features)
    np.testing.assert_array_equal(back(x, m), cube_predictor(x, m))
    assert back.fingerprint == cube_predictor.fingerprint
