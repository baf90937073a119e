"""Hard-budget acquisition MDP shared by every RL agent.

States are batched: one row per instance, advanced in lockstep. There is no
stop action; an episode ends after exactly ``budget`` acquisitions.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

ProbaFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
CertaintyFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
RevealFn = Callable[["AcquisitionState", np.ndarray], np.ndarray]

LOG_EPS = 1e-12


class IllegalAction(ValueError):
    pass


class RewardKind(enum.Enum):
    SPARSE_TERMINAL_LOSS = "sparse"
    DENSE_NEG_LOSS = "dense"
    CERTAINTY_DELTA = "certainty"


@dataclass(frozen=True)
class AcquisitionState:
    """Batch of partially observed instances.

    ``values`` holds revealed values (zero where unobserved), ``acquired`` the
    acquisition order (``B x step``). ``instance`` is the hidden full row used
    to answer acquisitions and is never shown to agents.
    """

    instance: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    acquired: np.ndarray
    budget: int
    ids: np.ndarray

    @property
    def step(self) -> int:
        return self.acquired.shape[1]

    @property
    def batch_size(self) -> int:
        return self.mask.shape[0]

    @property
    def d(self) -> int:
        return self.mask.shape[1]

    @property
    def done(self) -> bool:
        return self.step >= self.budget

    def observed_sets(self) -> list[set[int]]:
        return [set(map(int, row)) for row in self.acquired]

    def encoding(self) -> np.ndarray:
        """Agent-facing state: ``mask || masked values``."""
        return np.concatenate([self.mask, self.values], axis=1)

    def take(self, rows) -> "AcquisitionState":
        rows = np.asarray(rows)
        return replace(self, instance=self.instance[rows], values=self.values[rows],
                       mask=self.mask[rows], acquired=self.acquired[rows], ids=self.ids[rows])


@dataclass(frozen=True)
class Transition:
    state: AcquisitionState
    action: np.ndarray
    reward: np.ndarray
    next_state: AcquisitionState
    done: bool


def reset(instances, budget: int, ids=None) -> AcquisitionState:
    x = np.atleast_2d(np.asarray(instances, dtype=np.float64))
    n, d = x.shape
    if not 0 <= budget <= d:
        raise ValueError(f"budget {budget} exceeds the number of features {d}")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    return AcquisitionState(instance=x, values=np.zeros_like(x), mask=np.zeros_like(x),
                            acquired=np.zeros((n, 0), dtype=np.int64), budget=budget, ids=ids)


def action_mask(state: AcquisitionState) -> np.ndarray:
    """1 for legal actions (unacquired features); there is no stop action."""
    return 1.0 - state.mask


def acquire(state: AcquisitionState, actions, reveal: RevealFn | None = None) -> AcquisitionState:
    """Reveal ``actions[i]`` for each row; no reward computation."""
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if state.done:
        raise IllegalAction("episode already finished")
    if actions.shape != (state.batch_size,):
        raise IllegalAction("one action per instance required")
    if np.any(actions < 0) or np.any(actions >= state.d):
        raise IllegalAction("action index out of range")
    rows = np.arange(state.batch_size)
    if np.any(state.mask[rows, actions] > 0):
        raise IllegalAction("feature already acquired")
    revealed = state.instance[rows, actions] if reveal is None else reveal(state, actions)
    values = state.values.copy()
    mask = state.mask.copy()
    values[rows, actions] = revealed
    mask[rows, actions] = 1.0
    acquired = np.concatenate([state.acquired, actions[:, None]], axis=1)
    return replace(state, values=values, mask=mask, acquired=acquired)


def classification_loss(probs: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return -np.log(np.maximum(probs[np.arange(len(labels)), labels], LOG_EPS))


def step(state: AcquisitionState, actions, predictor: ProbaFn, labels,
         kind: RewardKind, certainty: CertaintyFn | None = None, certainty_seed: int = 0,
         reveal: RevealFn | None = None) -> Transition:
    """Advance every row by one acquisition and compute the reward.

    * sparse: ``-loss(f(x_S'), y)`` on the final step, 0 otherwise
    * dense: ``-loss(f(x_S'), y)`` every step
    * certainty: L2 norm of the change in MC-dropout class probabilities;
      both evaluations share ``certainty_seed`` so an uninformative
      acquisition yields exactly zero.
    """
    nxt = acquire(state, actions, reveal)
    done = nxt.done
    if kind is RewardKind.CERTAINTY_DELTA:
        if certainty is None:
            raise ValueError("certainty reward needs a certainty function")
        before = certainty(state.values, state.mask, certainty_seed)
        after = certainty(nxt.values, nxt.mask, certainty_seed)
        reward = np.linalg.norm(after - before, axis=1)
    else:
        loss = classification_loss(predictor(nxt.values, nxt.mask), labels)
        if kind is RewardKind.DENSE_NEG_LOSS:
            reward = -loss
        else:
            reward = -loss if done else np.zeros(state.batch_size)
    return Transition(state, np.asarray(actions, dtype=np.int64).reshape(-1), reward, nxt, done)


class BatchEnv:
    """Lockstep environment over a fixed pool of training instances.

    Each call to :meth:`reset` draws ``n_agents`` instances; the "parallel
    agents" are simply the rows of the batch.
    """

    def __init__(self, features, labels, budget: int, kind: RewardKind, predictor: ProbaFn | None,
                 certainty: CertaintyFn | None = None, reveal: RevealFn | None = None,
                 seed: int = 0):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.budget = budget
        self.kind = kind
        self.predictor = predictor
        self.certainty = certainty
        self.reveal = reveal
        self.rng = np.random.default_rng(seed)
        self._cert_counter = 0
        if budget > self.features.shape[1]:
            raise ValueError("budget exceeds feature count")

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def reset(self, n_agents: int) -> tuple[AcquisitionState, np.ndarray]:
        ids = self.rng.integers(0, len(self.labels), size=n_agents)
        return reset(self.features[ids], self.budget, ids), self.labels[ids]

    def step(self, state: AcquisitionState, actions, labels) -> Transition:
        self._cert_counter += 1
        return step(state, actions, self.predictor, labels, self.kind, self.certainty,
                    self._cert_counter, self.reveal)


def episode_records(transitions: list[Transition], labels) -> list[dict]:
    """Per-instance transcript: id, action sequence, per-step rewards."""
    first = transitions[0].state
    actions = np.stack([t.action for t in transitions], axis=1)
    rewards = np.stack([t.reward for t in transitions], axis=1)
    return [{"id": int(first.ids[i]), "label": int(labels[i]),
             "actions": actions[i].tolist(), "rewards": rewards[i].tolist()}
            for i in range(first.batch_size)]


def write_jsonl(path, records) -> None:
    with open(Path(path), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(Path(path)) as fh:
        return [json.loads(line) for line in fh if line.strip()]
