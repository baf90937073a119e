import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from afabench.env import reset
from afabench.policies.rl import (
    ActorCritic,
    DqnConfig,
    EpisodeReplay,
    PpoPolicy,
    SetEncoder,
    elements_from_list,
    epsilon_at,
    gae,
    lambda_return,
    lambda_return_torch,
    n_step_weight,
)


def lambda_return_by_definition(r, v, lam, gamma=1.0):
    """(1 - lam) sum_n lam^(n-1) G^(n), the remaining weight on the Monte-Carlo return."""
    T = len(r)
    out = []
    for t in range(T):
        horizon = T - t
        g = []
        for n in range(1, horizon + 1):
            ret = sum(gamma ** k * r[t + k] for k in range(n))
            if n < horizon:
                ret += gamma ** n * v[t + n - 1]
            g.append(ret)
        total = sum((1 - lam) * lam ** (n - 1) * g[n - 1] for n in range(1, horizon))
        out.append(total + lam ** (horizon - 1) * g[-1])
    return np.array(out)


floats = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=60)
@given(data=st.data(), T=st.integers(1, 7), lam=st.floats(0, 1), gamma=st.floats(0.5, 1))
def test_lambda_return_matches_definition(data, T, lam, gamma):
    r = np.array(data.draw(st.lists(floats, min_size=T, max_size=T)))
    v = np.array(data.draw(st.lists(floats, min_size=T, max_size=T)))
    np.testing.assert_allclose(lambda_return(r, v, lam, gamma),
                               lambda_return_by_definition(r, v, lam, gamma), atol=1e-9)


def test_lambda_zero_is_one_step_td():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([10.0, 20.0, 30.0])
    np.testing.assert_allclose(lambda_return(r, v, 0.0), [11.0, 22.0, 3.0])


def test_lambda_one_is_monte_carlo():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([10.0, 20.0, 30.0])
    np.testing.assert_allclose(lambda_return(r, v, 1.0), [6.0, 5.0, 3.0])


def test_lambda_return_validation():
    with pytest.raises(ValueError):
        lambda_return([1.0], [1.0], 1.5)
    with pytest.raises(ValueError):
        lambda_return([1.0, 2.0], [1.0], 0.5)


def test_torch_lambda_return_agrees():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    got = lambda_return_torch(torch.tensor(r), torch.tensor(v), 0.75).numpy()
    want = np.stack([lambda_return(r[i], v[i], 0.75) for i in range(4)])
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_n_step_weights_sum_to_one():
    lam = 0.75
    assert sum(n_step_weight(n, lam) for n in range(1, 400)) == pytest.approx(1.0)


def test_gae_lambda_one_is_return_minus_value():
    r = torch.tensor([[1.0], [2.0], [3.0]])
    v = torch.tensor([[0.5], [0.2], [0.1]])
    nv = torch.tensor([[0.2], [0.1], [0.0]])
    dones = torch.tensor([[0.0], [0.0], [1.0]])
    adv = gae(r, v, nv, dones, gamma=1.0, lam=1.0)
    torch.testing.assert_close(adv[:, 0], torch.tensor([6.0, 5.0, 3.0]) - v[:, 0])


def test_epsilon_schedule():
    cfg = DqnConfig(n_batches=100, epsilon_start=1.0, epsilon_min=0.05)
    assert epsilon_at(0, cfg) == 1.0
    assert epsilon_at(25, cfg) == pytest.approx(0.525)
    assert epsilon_at(50, cfg) == pytest.approx(0.05)
    assert all(0.05 <= epsilon_at(t, cfg) <= 1.0 for t in range(101))


def test_set_encoder_permutation_invariant():
    enc = SetEncoder(6, seed=0)
    idx, vals = [4, 0, 2, 5], [0.3, -1.2, 2.0, 0.7]
    with torch.no_grad():
        ref = enc.forward_elements(*elements_from_list(idx, vals, 6))
        for perm in itertools.permutations(range(4)):
            out = enc.forward_elements(*elements_from_list([idx[p] for p in perm],
                                                           [vals[p] for p in perm], 6))
            torch.testing.assert_close(out, ref, atol=1e-5, rtol=1e-5)


def test_set_encoder_dense_matches_list():
    enc = SetEncoder(5, seed=1)
    values = torch.tensor([[0.0, 1.5, 0.0, -0.5, 0.0]])
    mask = torch.tensor([[0.0, 1.0, 0.0, 1.0, 0.0]])
    with torch.no_grad():
        dense = enc(values, mask)
        listed = enc.forward_elements(*elements_from_list([3, 1], [-0.5, 1.5], 5))
    torch.testing.assert_close(dense, listed, atol=1e-5, rtol=1e-5)


def test_set_encoder_ignores_unobserved_values():
    enc = SetEncoder(3, seed=2)
    m = torch.tensor([[1.0, 0.0, 0.0]])
    with torch.no_grad():
        a = enc(torch.tensor([[1.0, 5.0, -3.0]]), m)
        b = enc(torch.tensor([[1.0, 0.0, 9.0]]), m)
    torch.testing.assert_close(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), k=st.integers(0, 5))
def test_ppo_illegal_actions_have_zero_probability(seed, k):
    d = 6
    rng = np.random.default_rng(seed)
    mask = np.zeros((3, d))
    for row in mask:
        row[rng.choice(d, size=k, replace=False)] = 1
    pol = PpoPolicy("odin", ActorCritic(d, seed=seed))
    p = pol.probabilities(rng.normal(size=(3, d)) * mask, mask)
    assert np.all(p[mask > 0] == 0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-6)
    a = pol.select(np.zeros((3, d)), mask)
    assert np.all(mask[np.arange(3), a] == 0)


def test_replay_is_fifo():
    rep = EpisodeReplay(2, budget=1, d=2, seed=0)
    for lab in (0, 1, 2):
        rep.add(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((1, 1)), np.zeros((1, 1)), [lab])
    assert rep.size == 2 and sorted(rep.labels.tolist()) == [1, 2]
    *_, labels = rep.sample(50)
    assert set(labels.tolist()) <= {1, 2}


def test_toy_state_shapes():
    s = reset(np.zeros((128, 2)), 1)
    assert s.batch_size == 128 and not s.done
