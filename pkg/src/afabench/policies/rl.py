"""Non-greedy acquisition policies trained on the hard-budget MDP.

* JAFA: DQN over an order-invariant set encoding, sparse terminal reward,
  TD(lambda) targets and a jointly trained classifier.
* OL: DQN with the label-free certainty reward and a coupled P/Q network.
* ODIN: PPO with the dense negative-loss reward; the model-based variant
  replaces revealed values during training with PVAE samples.

Experience is collected by ``n_agents`` parallel rows of a :class:`BatchEnv`;
one "batch" is ``frames_per_batch`` transitions followed by one update.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..datasets import DatasetBundle, MaskingDistribution, masking_preset, sample_mask
from ..env import AcquisitionState, BatchEnv, RewardKind, acquire, classification_loss
from ..nnkit import (
    Mlp,
    MlpConfig,
    TrainConfig,
    check_finite,
    class_weights,
    fit_supervised,
    make_adam,
    polyak_update,
    wce_loss,
)
from ..predictor import SharedPredictor, encode, mc_dropout_batch
from .base import greedy_select, mask_observed

log = logging.getLogger(__name__)


# -- TD(lambda) ---------------------------------------------------------------

def n_step_weight(n: int, lam: float) -> float:
    """Weight of the n-step return inside the lambda-return: ``(1-lam) lam^(n-1)``."""
    return (1.0 - lam) * lam ** (n - 1)


def lambda_return(rewards, bootstrap, lam: float, gamma: float = 1.0,
                  terminal: bool = True) -> np.ndarray:
    """Truncated lambda-returns for one episode (or a batch along axis 0).

    ``rewards[t]`` follows action ``t``; ``bootstrap[t]`` is the value of the
    state reached by it. With ``terminal`` the return after the last step is
    zero, otherwise ``bootstrap[-1]`` closes the sum.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(bootstrap, dtype=np.float64)
    if r.shape != v.shape:
        raise ValueError("rewards and bootstrap values differ in length")
    out = np.empty_like(r)
    nxt = np.zeros(r.shape[1:]) if terminal else v[-1]
    for t in range(r.shape[0] - 1, -1, -1):
        if t == r.shape[0] - 1:
            out[t] = r[t] + gamma * nxt
        else:
            out[t] = r[t] + gamma * ((1 - lam) * v[t] + lam * out[t + 1])
    return out


def lambda_return_torch(rewards: torch.Tensor, bootstrap: torch.Tensor, lam: float,
                        gamma: float = 1.0) -> torch.Tensor:
    """Batched terminal-episode version; time is the last axis."""
    T = rewards.shape[-1]
    out = torch.empty_like(rewards)
    acc = torch.zeros_like(rewards[..., 0])
    for t in range(T - 1, -1, -1):
        if t == T - 1:
            acc = rewards[..., t]
        else:
            acc = rewards[..., t] + gamma * ((1 - lam) * bootstrap[..., t] + lam * acc)
        out[..., t] = acc
    return out


def gae(rewards, values, next_values, dones, gamma: float = 1.0, lam: float = 0.95):
    """Generalised advantage estimates over a ``T x B`` rollout."""
    T = rewards.shape[0]
    adv = torch.zeros_like(rewards)
    last = torch.zeros_like(rewards[0])
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv


# -- set encoder --------------------------------------------------------------

class SetEncoder(nn.Module):
    """Read-process-write set encoder with attention pooling.

    Elements are ``(one-hot index, value)`` rows; ``pad`` marks real elements.
    The process block runs ``steps`` LSTM updates, each attending over the
    memories, so the result does not depend on element order.
    """

    def __init__(self, d: int, hidden: tuple[int, ...] = (32, 32), steps: int = 5, seed: int = 0):
        super().__init__()
        self.d = d
        self.steps = steps
        self.mem_dim = hidden[-1]
        self.read = Mlp(MlpConfig(d + 1, hidden[:-1] or (hidden[-1],), self.mem_dim), seed=seed)
        self.cell = nn.LSTMCell(2 * self.mem_dim, self.mem_dim)

    @property
    def out_dim(self) -> int:
        return 2 * self.mem_dim

    def forward_elements(self, elements: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        b = elements.shape[0]
        mem = torch.relu(self.read(elements))  # B x K x h
        valid = pad > 0
        any_valid = valid.any(-1, keepdim=True)
        q_star = torch.zeros(b, 2 * self.mem_dim)
        h = torch.zeros(b, self.mem_dim)
        c = torch.zeros(b, self.mem_dim)
        for _ in range(self.steps):
            h, c = self.cell(q_star, (h, c))
            e = (mem * h[:, None, :]).sum(-1).masked_fill(~valid, -1e9)
            a = torch.softmax(e, -1) * valid
            a = torch.where(any_valid, a, torch.zeros_like(a))
            r = (a[..., None] * mem).sum(1)
            q_star = torch.cat([h, r], -1)
        return q_star

    def forward(self, values, mask) -> torch.Tensor:
        """Encode dense ``(values, mask)`` batches (elements in index order)."""
        v = torch.as_tensor(values, dtype=torch.float32)
        m = torch.as_tensor(mask, dtype=torch.float32)
        return self.forward_elements(*dense_to_elements(v, m))


def dense_to_elements(values: torch.Tensor, mask: torch.Tensor):
    b, d = mask.shape
    eye = torch.eye(d).expand(b, d, d)
    elements = torch.cat([eye, (values * mask)[..., None]], -1)
    return elements, mask


def elements_from_list(indices, vals, d: int):
    """Element tensor for one instance given an ordered list of observations."""
    k = len(indices)
    el = torch.zeros(1, k, d + 1)
    for j, (i, v) in enumerate(zip(indices, vals)):
        el[0, j, i] = 1.0
        el[0, j, d] = float(v)
    return el, torch.ones(1, k)


# -- common DQN machinery -------------------------------------------------------

@dataclass
class DqnConfig:
    n_batches: int = 10_000
    n_agents: int = 128
    frames_per_batch: int = 512
    learning_rate: float = 1e-3
    tau: float = 0.005
    epsilon_start: float = 1.0
    epsilon_min: float = 0.05
    td_lambda: float = 0.75
    replay_capacity: int | None = None
    pretrain_epochs: int = 250
    pretrain_patience: int = 10
    classifier_hidden: tuple[int, ...] = (32, 32)
    classifier_lr: float = 1e-3
    min_replay_episodes: int = 16
    updates_per_batch: int = 1
    huber: bool = True


def epsilon_at(batch: int, cfg: DqnConfig) -> float:
    """Linear decay from ``epsilon_start`` to ``epsilon_min`` over the first half."""
    half = max(1, cfg.n_batches // 2)
    frac = min(1.0, batch / half)
    return cfg.epsilon_start + frac * (cfg.epsilon_min - cfg.epsilon_start)


class EpisodeReplay:
    """FIFO store of complete fixed-length episodes."""

    def __init__(self, capacity_episodes: int, budget: int, d: int, seed: int = 0):
        self.cap = max(1, capacity_episodes)
        self.b = budget
        self.values = np.zeros((self.cap, budget + 1, d), dtype=np.float32)
        self.masks = np.zeros((self.cap, budget + 1, d), dtype=np.float32)
        self.actions = np.zeros((self.cap, budget), dtype=np.int64)
        self.rewards = np.zeros((self.cap, budget), dtype=np.float32)
        self.labels = np.zeros(self.cap, dtype=np.int64)
        self.size = 0
        self.ptr = 0
        self.rng = np.random.default_rng(seed)

    def add(self, values, masks, actions, rewards, labels) -> None:
        for i in range(len(labels)):
            p = self.ptr
            self.values[p], self.masks[p] = values[i], masks[i]
            self.actions[p], self.rewards[p], self.labels[p] = actions[i], rewards[i], labels[i]
            self.ptr = (p + 1) % self.cap
            self.size = min(self.size + 1, self.cap)

    def sample(self, n: int):
        idx = self.rng.integers(0, self.size, size=n)
        return (torch.from_numpy(self.values[idx]), torch.from_numpy(self.masks[idx]),
                torch.from_numpy(self.actions[idx]), torch.from_numpy(self.rewards[idx]),
                torch.from_numpy(self.labels[idx]))


class EpisodeCollector:
    """Runs ``n_agents`` lockstep episodes, resetting rows as they finish."""

    def __init__(self, env: BatchEnv, n_agents: int):
        self.env = env
        self.n = n_agents
        self.state, self.labels = env.reset(n_agents)
        b, d = env.budget, env.d
        self.buf_values = np.zeros((n_agents, b + 1, d), dtype=np.float32)
        self.buf_masks = np.zeros((n_agents, b + 1, d), dtype=np.float32)
        self.buf_actions = np.zeros((n_agents, b), dtype=np.int64)
        self.buf_rewards = np.zeros((n_agents, b), dtype=np.float32)

    def step(self, choose) -> list:
        """Advance every agent once; returns finished-episode arrays (possibly empty)."""
        s = self.state
        t = s.step
        actions = choose(s)
        tr = self.env.step(s, actions, self.labels)
        self.buf_values[:, t], self.buf_masks[:, t] = s.values, s.mask
        self.buf_actions[:, t] = tr.action
        self.buf_rewards[:, t] = tr.reward
        if tr.done:
            nxt = tr.next_state
            self.buf_values[:, t + 1], self.buf_masks[:, t + 1] = nxt.values, nxt.mask
            finished = (self.buf_values.copy(), self.buf_masks.copy(), self.buf_actions.copy(),
                        self.buf_rewards.copy(), self.labels.copy())
            self.state, self.labels = self.env.reset(self.n)
            return [finished]
        self.state = tr.next_state
        return []


def _masked_argmax(q: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return q.masked_fill(mask > 0, -np.inf).argmax(-1)


def _eps_greedy(q: torch.Tensor, mask: torch.Tensor, eps: float, rng: np.random.Generator):
    greedy = _masked_argmax(q, mask).numpy()
    u = rng.random(mask.shape)
    rand = greedy_select(np.where(mask.numpy() > 0, -np.inf, u))
    explore = rng.random(len(greedy)) < eps
    return np.where(explore, rand, greedy)


# -- JAFA -----------------------------------------------------------------------

class JafaNet(nn.Module):
    """Q head and classifier head, each over its own set encoder.

    Separate encoders keep Q-learning gradients from disturbing the
    pretrained classifier before joint training starts.
    """

    def __init__(self, d: int, num_classes: int, hidden=(32, 32), classifier_hidden=(32, 32),
                 steps: int = 5, seed: int = 0):
        super().__init__()
        self.encoder = SetEncoder(d, hidden, steps, seed)
        self.cls_encoder = SetEncoder(d, hidden, steps, seed + 3)
        self.q_head = Mlp(MlpConfig(self.encoder.out_dim, hidden, d), seed=seed + 1)
        self.cls_head = Mlp(MlpConfig(self.cls_encoder.out_dim, classifier_hidden, num_classes),
                            seed=seed + 2)

    def q_parameters(self):
        return list(self.encoder.parameters()) + list(self.q_head.parameters())

    def classifier_parameters(self):
        return list(self.cls_encoder.parameters()) + list(self.cls_head.parameters())

    def q_values(self, values, mask):
        return self.q_head(self.encoder(values, mask))

    def logits(self, values, mask):
        return self.cls_head(self.cls_encoder(values, mask))


class DqnPolicy:
    """Greedy (epsilon = 0) evaluation-time policy around a Q function."""

    def __init__(self, name: str, q_fn, builtin=None, history=None):
        self.name = name
        self.q_fn = q_fn
        self.builtin = builtin
        self.history = history or []

    def q_values(self, values, mask) -> np.ndarray:
        with torch.no_grad():
            q = self.q_fn(np.atleast_2d(values), np.atleast_2d(mask)).double().numpy()
        return mask_observed(q, np.atleast_2d(mask))

    def select(self, values, mask):
        return greedy_select(self.q_values(values, mask))


class _Proba:
    def __init__(self, logits_fn, modules):
        self.logits_fn = logits_fn
        self.modules = modules

    def __call__(self, values, mask):
        for m in self.modules:
            m.eval()
        with torch.no_grad():
            return torch.softmax(self.logits_fn(np.atleast_2d(values), np.atleast_2d(mask)).double(),
                                 -1).numpy()


def _pretrain_masked(logits_fn, params, module, bundle, masking, epochs, patience, lr, seed, w):
    rng = np.random.default_rng(seed)
    d = bundle.d
    xtr, ytr = bundle.train.features, bundle.train.labels
    val_mask = sample_mask(bundle.val.n, d, MaskingDistribution(masking.low, masking.low),
                           np.random.default_rng(seed + 1))

    def step(idx, rng):
        m = sample_mask(len(idx), d, masking, rng)
        return wce_loss(logits_fn(xtr[idx] * m, m), torch.as_tensor(ytr[idx]), w)

    def val():
        return wce_loss(logits_fn(bundle.val.features * val_mask, val_mask),
                        torch.as_tensor(bundle.val.labels), w).item()

    cfg = TrainConfig(lr, 128, epochs, patience)
    fit_supervised(module, step, val, len(ytr), cfg, rng, params=params)


def _dqn_update(q_online, q_target, batch, lam: float, budget: int, rewards: torch.Tensor,
                huber: bool) -> torch.Tensor:
    values, masks, actions, _, _ = batch
    n, T1, d = values.shape
    flat_v = values.reshape(-1, d)
    flat_m = masks.reshape(-1, d)
    with torch.no_grad():
        qt = q_target(flat_v, flat_m).reshape(n, T1, d)
        boot = qt.masked_fill(masks > 0, -np.inf).max(-1).values
        boot = torch.nan_to_num(boot[:, 1:], neginf=0.0)  # V(s_{t+1}); last is terminal
        targets = lambda_return_torch(rewards, boot, lam)
    q = q_online(values[:, :-1].reshape(-1, d), masks[:, :-1].reshape(-1, d)).reshape(n, budget, d)
    q_sa = q.gather(-1, actions[..., None]).squeeze(-1)
    if huber:
        return nn.functional.smooth_l1_loss(q_sa, targets)
    return ((q_sa - targets) ** 2).mean()


def train_jafa(bundle: DatasetBundle, budget: int, cfg: DqnConfig | None = None, seed: int = 0,
               masking: MaskingDistribution | None = None) -> DqnPolicy:
    """DQN on the sparse terminal-loss reward with a jointly trained classifier.

    Terminal rewards are recomputed with the current classifier when a batch
    is replayed; joint classifier updates start once epsilon reaches its
    minimum.
    """
    cfg = cfg or DqnConfig()
    if budget > bundle.d:
        raise ValueError("budget exceeds feature count")
    masking = masking or masking_preset(bundle.name)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    d, C = bundle.d, bundle.num_classes
    net = JafaNet(d, C, classifier_hidden=cfg.classifier_hidden, seed=seed)
    w = torch.as_tensor(class_weights(bundle.train.labels, C), dtype=torch.float32)
    _pretrain_masked(net.logits, net.classifier_parameters(), net, bundle, masking, cfg.pretrain_epochs, cfg.pretrain_patience,
                     cfg.classifier_lr, seed, w)
    target = copy.deepcopy(net)
    proba = _Proba(net.logits, [net])
    env = BatchEnv(bundle.train.features, bundle.train.labels, budget,
                   RewardKind.SPARSE_TERMINAL_LOSS, proba, seed=seed)
    collector = EpisodeCollector(env, cfg.n_agents)
    cap = cfg.replay_capacity or 1000 * d
    replay = EpisodeReplay(max(1, cap // budget), budget, d, seed)
    q_opt = make_adam(net.q_parameters(), cfg.learning_rate)
    c_opt = make_adam(net.classifier_parameters(), cfg.classifier_lr)
    steps_per_batch = max(1, cfg.frames_per_batch // cfg.n_agents)
    ep_per_update = max(1, cfg.frames_per_batch // budget)
    history = []
    for it in range(cfg.n_batches):
        eps = epsilon_at(it, cfg)
        net.eval()

        def choose(s: AcquisitionState):
            with torch.no_grad():
                q = net.q_values(s.values, s.mask)
            return _eps_greedy(q, torch.as_tensor(s.mask), eps, rng)

        for _ in range(steps_per_batch):
            for ep in collector.step(choose):
                replay.add(*ep)
        if replay.size < cfg.min_replay_episodes:
            continue
        for _ in range(cfg.updates_per_batch):
            batch = replay.sample(ep_per_update)
            values, masks, actions, _, labels = batch
            net.train()
            with torch.no_grad():
                final = net.logits(values[:, -1], masks[:, -1])
                term = -wce_loss(final, labels, reduction="none")
            rewards = torch.zeros(len(labels), budget)
            rewards[:, -1] = term
            loss = _dqn_update(net.q_values, target.q_values, batch, cfg.td_lambda, budget, rewards,
                               cfg.huber)
            check_finite(loss, "JAFA Q update")
            q_opt.zero_grad()
            loss.backward()
            q_opt.step()
            if eps <= cfg.epsilon_min + 1e-12:
                v = values[:, 1:].reshape(-1, d)
                m = masks[:, 1:].reshape(-1, d)
                closs = wce_loss(net.logits(v, m), labels.repeat_interleave(budget), w)
                check_finite(closs, "JAFA classifier update")
                c_opt.zero_grad()
                closs.backward()
                c_opt.step()
            polyak_update(target, net, cfg.tau)
        if it % 100 == 0:
            history.append({"batch": it, "epsilon": eps, "mean_return": float(term.mean()),
                            "loss": float(loss.detach())})
    net.eval()
    return DqnPolicy("jafa_mfrl", net.q_values, _Proba(net.logits, [net]), history)


# -- OL ---------------------------------------------------------------------------

@dataclass
class OlConfig(DqnConfig):
    td_lambda: float = 0.0
    p_hidden: tuple[int, ...] = (64, 32, 16)
    q_hidden: tuple[int, ...] = (64, 32, 16)
    p_dropout: float = 0.1
    mc_passes: int = 10


class PqNet(nn.Module):
    """P-network (classifier) whose hidden code and output feed the Q-network."""

    def __init__(self, d: int, num_classes: int, cfg: OlConfig, seed: int = 0):
        super().__init__()
        self.p = Mlp(MlpConfig(2 * d, cfg.p_hidden, num_classes, cfg.p_dropout), seed=seed)
        q_in = 2 * d + cfg.p_hidden[-1] + num_classes
        self.q = Mlp(MlpConfig(q_in, cfg.q_hidden, d), seed=seed + 1)

    def logits(self, values, mask):
        return self.p(encode(values, mask))

    def q_values(self, values, mask):
        x = encode(values, mask)
        was = self.p.training
        self.p.eval()
        with torch.no_grad():
            h = self.p.hidden(x)
            probs = torch.softmax(self.p(x), -1)
        self.p.train(was)
        return self.q(torch.cat([x, h, probs], -1))


def train_ol(bundle: DatasetBundle, budget: int, cfg: OlConfig | None = None, seed: int = 0,
             masking: MaskingDistribution | None = None) -> DqnPolicy:
    """DQN on the certainty-change reward with a pretrained, jointly updated P-network."""
    cfg = cfg or OlConfig()
    if budget > bundle.d:
        raise ValueError("budget exceeds feature count")
    masking = masking or masking_preset(bundle.name)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    d, C = bundle.d, bundle.num_classes
    net = PqNet(d, C, cfg, seed)
    w = torch.as_tensor(class_weights(bundle.train.labels, C), dtype=torch.float32)
    _pretrain_masked(net.logits, list(net.p.parameters()), net.p, bundle, masking,
                     cfg.pretrain_epochs, cfg.pretrain_patience, cfg.classifier_lr, seed, w)
    target = copy.deepcopy(net)

    def certainty(values, mask, s):
        return mc_dropout_batch(net.p, values, mask, cfg.mc_passes, seed=seed * 7919 + s)

    env = BatchEnv(bundle.train.features, bundle.train.labels, budget,
                   RewardKind.CERTAINTY_DELTA, None, certainty=certainty, seed=seed)
    collector = EpisodeCollector(env, cfg.n_agents)
    cap = cfg.replay_capacity or 1000 * d
    replay = EpisodeReplay(max(1, cap // budget), budget, d, seed)
    q_opt = make_adam(net.q.parameters(), cfg.learning_rate)
    p_opt = make_adam(net.p.parameters(), cfg.classifier_lr)
    steps_per_batch = max(1, cfg.frames_per_batch // cfg.n_agents)
    ep_per_update = max(1, cfg.frames_per_batch // budget)
    history = []
    for it in range(cfg.n_batches):
        eps = epsilon_at(it, cfg)
        net.eval()

        def choose(s: AcquisitionState):
            with torch.no_grad():
                q = net.q_values(s.values, s.mask)
            return _eps_greedy(q, torch.as_tensor(s.mask), eps, rng)

        for _ in range(steps_per_batch):
            for ep in collector.step(choose):
                replay.add(*ep)
        if replay.size < cfg.min_replay_episodes:
            continue
        for _ in range(cfg.updates_per_batch):
            batch = replay.sample(ep_per_update)
            values, masks, actions, rewards, labels = batch
            net.q.train()
            loss = _dqn_update(net.q_values, target.q_values, batch, cfg.td_lambda, budget, rewards,
                               cfg.huber)
            check_finite(loss, "OL Q update")
            q_opt.zero_grad()
            loss.backward()
            q_opt.step()
            net.p.train()
            v = values[:, 1:].reshape(-1, d)
            m = masks[:, 1:].reshape(-1, d)
            ploss = wce_loss(net.logits(v, m), labels.repeat_interleave(budget), w)
            check_finite(ploss, "OL P update")
            p_opt.zero_grad()
            ploss.backward()
            p_opt.step()
            polyak_update(target, net, cfg.tau)
        if it % 100 == 0:
            history.append({"batch": it, "epsilon": eps, "mean_return": float(rewards.sum(1).mean()),
                            "loss": float(loss.detach())})
    net.eval()
    return DqnPolicy("ol_mfrl", net.q_values, _Proba(net.logits, [net.p]), history)


# -- ODIN (PPO) ---------------------------------------------------------------------

@dataclass
class PpoConfig:
    n_batches: int = 10_000
    n_agents: int = 128
    frames_per_batch: int = 512
    hidden: tuple[int, ...] = (32, 32)
    learning_rate: float = 1e-3
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    gae_lambda: float = 0.95
    max_grad_norm: float = 1.0
    minibatches: int = 1
    normalize_advantage: bool = False


class ActorCritic(nn.Module):
    def __init__(self, d: int, hidden=(32, 32), seed: int = 0):
        super().__init__()
        self.policy = Mlp(MlpConfig(2 * d, hidden, d), seed=seed)
        self.value = Mlp(MlpConfig(2 * d, hidden, 1), seed=seed + 1)

    @staticmethod
    def state(values, mask) -> torch.Tensor:
        m = torch.as_tensor(mask, dtype=torch.float32)
        v = torch.as_tensor(values, dtype=torch.float32)
        return torch.cat([m, v * m], -1)

    def masked_logits(self, values, mask) -> torch.Tensor:
        m = torch.as_tensor(mask, dtype=torch.float32)
        return self.policy(self.state(values, mask)).masked_fill(m > 0, -np.inf)

    def dist(self, values, mask) -> torch.distributions.Categorical:
        return torch.distributions.Categorical(logits=self.masked_logits(values, mask))


class PpoPolicy:
    def __init__(self, name: str, model: ActorCritic, builtin=None, history=None):
        self.name = name
        self.model = model
        self.builtin = builtin
        self.history = history or []

    def probabilities(self, values, mask) -> np.ndarray:
        with torch.no_grad():
            return self.model.dist(np.atleast_2d(values), np.atleast_2d(mask)).probs.double().numpy()

    def select(self, values, mask):
        with torch.no_grad():
            logits = self.model.masked_logits(np.atleast_2d(values), np.atleast_2d(mask))
        return greedy_select(logits.double().numpy())


def pvae_reveal(pvae, seed: int = 0):
    """Reveal function answering acquisitions with PVAE samples of ``p(x_a | x_S)``."""
    gen = torch.Generator().manual_seed(seed)

    def reveal(state: AcquisitionState, actions):
        x = pvae.sample_features(state.values, state.mask, 1, gen)[0].double().numpy()
        return x[np.arange(len(actions)), actions]

    return reveal


def train_odin(bundle: DatasetBundle, budget: int, predictor: SharedPredictor,
               cfg: PpoConfig | None = None, seed: int = 0, model_based: bool = False,
               pvae=None) -> PpoPolicy:
    """PPO on the dense negative-loss reward, one optimisation pass per batch."""
    cfg = cfg or PpoConfig()
    if model_based and pvae is None:
        raise ValueError("the model-based variant needs a PVAE")
    if budget > bundle.d:
        raise ValueError("budget exceeds feature count")
    torch.manual_seed(seed)
    d = bundle.d
    model = ActorCritic(d, cfg.hidden, seed)
    opt = make_adam(model.parameters(), cfg.learning_rate)
    reveal = pvae_reveal(pvae, seed) if model_based else None
    env = BatchEnv(bundle.train.features, bundle.train.labels, budget,
                   RewardKind.DENSE_NEG_LOSS, predictor.predict_proba, reveal=reveal, seed=seed)
    gen = torch.Generator().manual_seed(seed + 3)
    state, labels = env.reset(cfg.n_agents)
    T = max(1, cfg.frames_per_batch // cfg.n_agents)
    history = []
    for it in range(cfg.n_batches):
        obs_v, obs_m, acts, logps, rews, dones, vals, next_vals = [], [], [], [], [], [], [], []
        model.eval()
        for _ in range(T):
            with torch.no_grad():
                dist = model.dist(state.values, state.mask)
                a = torch.multinomial(dist.probs, 1, generator=gen).squeeze(-1)
                v = model.value(model.state(state.values, state.mask)).squeeze(-1)
            tr = env.step(state, a.numpy(), labels)
            obs_v.append(torch.as_tensor(state.values, dtype=torch.float32))
            obs_m.append(torch.as_tensor(state.mask, dtype=torch.float32))
            acts.append(a)
            logps.append(dist.log_prob(a))
            rews.append(torch.as_tensor(tr.reward, dtype=torch.float32))
            vals.append(v)
            dones.append(torch.full((cfg.n_agents,), float(tr.done)))
            if tr.done:
                next_vals.append(torch.zeros(cfg.n_agents))
                state, labels = env.reset(cfg.n_agents)
            else:
                with torch.no_grad():
                    nv = model.value(model.state(tr.next_state.values,
                                                 tr.next_state.mask)).squeeze(-1)
                next_vals.append(nv)
                state = tr.next_state
        rews_t = torch.stack(rews)
        vals_t = torch.stack(vals)
        adv = gae(rews_t, vals_t, torch.stack(next_vals), torch.stack(dones), 1.0, cfg.gae_lambda)
        returns = (adv + vals_t).reshape(-1)
        adv = adv.reshape(-1)
        if cfg.normalize_advantage:
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
        ov, om = torch.cat(obs_v), torch.cat(obs_m)
        old_logp, act = torch.cat(logps), torch.cat(acts)
        model.train()
        n = len(act)
        for chunk in torch.randperm(n, generator=gen).chunk(cfg.minibatches):
            dist = model.dist(ov[chunk], om[chunk])
            ratio = (dist.log_prob(act[chunk]) - old_logp[chunk]).exp()
            a_c = adv[chunk]
            pl = -torch.min(ratio * a_c, ratio.clamp(1 - cfg.clip, 1 + cfg.clip) * a_c).mean()
            vl = ((model.value(model.state(ov[chunk], om[chunk])).squeeze(-1) - returns[chunk]) ** 2).mean()
            ent = _masked_entropy(dist).mean()
            loss = pl + cfg.value_coef * vl - cfg.entropy_coef * ent
            check_finite(loss, "PPO update")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
            opt.step()
        if it % 50 == 0:
            history.append({"batch": it, "mean_reward": float(rews_t.mean()),
                            "entropy": float(ent.detach())})
    if history and history[-1]["entropy"] < 1e-3:
        log.warning("PPO policy entropy collapsed (%.2e)", history[-1]["entropy"])
    model.eval()
    name = "odin_mbrl" if model_based else "odin_mfrl"
    return PpoPolicy(name, model, None, history)


def _masked_entropy(dist: torch.distributions.Categorical) -> torch.Tensor:
    p = dist.probs
    logp = torch.where(p > 0, torch.log(p.clamp_min(1e-30)), torch.zeros_like(p))
    return -(p * logp).sum(-1)
