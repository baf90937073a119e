from __future__ import annotations

from typing import Callable, Protocol

import numpy as np

ProbaFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class NoLegalFeature(ValueError):
    pass


class Policy(Protocol):
    """Anything that maps a batch of partial observations to feature indices.

    ``values`` are zero where ``mask`` is zero. ``builtin`` is the policy's
    own jointly trained classifier, or None.
    """

    name: str
    builtin: ProbaFn | None

    def select(self, values: np.ndarray, mask: np.ndarray) -> np.ndarray: ...


def greedy_select(scores, mask=None) -> np.ndarray:
    """Argmax over unobserved features; ties go to the lowest index.

    ``scores`` may already carry ``-inf`` at observed positions; ``mask``
    (1 = observed) is applied on top when given. Works on a single score
    vector or a batch.
    """
    s = np.array(scores, dtype=np.float64)
    single = s.ndim == 1
    s = np.atleast_2d(s)
    if mask is not None:
        s = np.where(np.atleast_2d(mask) > 0, -np.inf, s)
    legal = s > -np.inf
    if not np.all(legal.any(axis=1)):
        raise NoLegalFeature("no unobserved feature left to acquire")
    s = np.where(legal, np.nan_to_num(s, nan=-np.finfo(float).max, posinf=np.finfo(float).max),
                 -np.inf)
    out = s.argmax(axis=1)
    return int(out[0]) if single else out


def mask_observed(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask > 0, -np.inf, scores)


class RandomPolicy:
    """Uniformly random unobserved feature; the dynamic-selection floor."""

    name = "random"
    builtin = None

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def select(self, values, mask):
        u = self.rng.random(mask.shape)
        return greedy_select(np.where(mask > 0, -np.inf, u))
