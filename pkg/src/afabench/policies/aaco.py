"""Approximate acquisition oracle built from nearest neighbours.

The expected loss of acquiring a subset ``o'`` is estimated by borrowing the
unobserved values (and labels) of the ``k`` training rows closest to the
current partial observation. A subset is chosen by sampled search, and one
feature from it is acquired per step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..env import classification_loss
from .base import NoLegalFeature, ProbaFn


class KnnIndex:
    """Training rows searched with a masked, size-normalised Euclidean distance."""

    def __init__(self, features, labels, k: int = 15):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if len(self.labels) == 0:
            raise ValueError("empty training set")
        if not 1 <= k <= len(self.labels):
            raise ValueError(f"k={k} must lie in [1, {len(self.labels)}]")
        self.k = k

    @property
    def n(self) -> int:
        return len(self.labels)

    def distances(self, values, mask) -> np.ndarray:
        m = np.asarray(mask, dtype=np.float64)
        diff = (self.features - np.asarray(values)[None, :]) ** 2 * m[None, :]
        return np.sqrt(diff.sum(1) / max(m.sum(), 1.0))

    def neighbors(self, values, mask) -> np.ndarray:
        """Indices of the ``k`` nearest rows; every row when nothing is observed."""
        if np.sum(mask) == 0:
            return np.arange(self.n)
        dist = self.distances(values, mask)
        return np.argsort(dist, kind="stable")[: self.k]


@dataclass(frozen=True)
class SubsetCandidate:
    features: tuple[int, ...]
    value: float


def _objectives(values, mask, subsets, knn: KnnIndex, predictor: ProbaFn, alpha: float,
                nbrs: np.ndarray) -> np.ndarray:
    """Objective of every subset, evaluated in one predictor call."""
    values = np.asarray(values, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    d = len(mask)
    k = len(nbrs)
    sub_mask = np.zeros((len(subsets), d))
    for i, s in enumerate(subsets):
        sub_mask[i, list(s)] = 1.0
    if np.any(sub_mask * mask[None, :] > 0):
        raise ValueError("candidate subset overlaps the observed set")
    new_mask = np.clip(sub_mask + mask[None, :], 0, 1)          # S x d
    rows = knn.features[nbrs]                                    # k x d
    filled = np.where(sub_mask[:, None, :] > 0, rows[None, :, :], values[None, None, :])
    filled = filled * new_mask[:, None, :]
    flat_v = filled.reshape(-1, d)
    flat_m = np.repeat(new_mask, k, axis=0)
    probs = predictor(flat_v, flat_m)
    losses = classification_loss(probs, np.tile(knn.labels[nbrs], len(subsets)))
    sizes = np.array([len(s) for s in subsets], dtype=np.float64)
    return losses.reshape(len(subsets), k).mean(1) + alpha * sizes


def aaco_objective(values, mask, subset, knn: KnnIndex, predictor: ProbaFn,
                   alpha: float = 0.0) -> float:
    """Neighbour estimate of ``E[loss(f(x_o, x_o'), y) | x_o] + alpha |o'|``."""
    nbrs = knn.neighbors(values, mask)
    return float(_objectives(values, mask, [tuple(subset)], knn, predictor, alpha, nbrs)[0])


def candidate_subsets(unobserved, max_size: int, n_samples: int, rng: np.random.Generator,
                      exhaustive: bool = False) -> list[tuple[int, ...]]:
    """Singletons plus sampled subsets (size uniform on ``1..max_size``), deduplicated."""
    unobserved = sorted(int(i) for i in unobserved)
    max_size = min(max_size, len(unobserved))
    if exhaustive:
        return [c for r in range(1, max_size + 1) for c in itertools.combinations(unobserved, r)]
    out = [(i,) for i in unobserved]
    seen = set(out)
    for _ in range(n_samples):
        r = int(rng.integers(1, max_size + 1))
        c = tuple(sorted(rng.choice(unobserved, size=r, replace=False).tolist()))
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def aaco_select(values, mask, knn: KnnIndex, predictor: ProbaFn, alpha: float = 0.0,
                n_samples: int = 1000, seed: int = 0, remaining: int | None = None,
                exhaustive: bool = False, return_subset: bool = False):
    """Feature to acquire next for one instance.

    The best-scoring candidate subset is found first; from it, the feature
    with the lowest one-step objective is returned.
    """
    mask = np.asarray(mask, dtype=np.float64)
    unobserved = np.flatnonzero(mask == 0)
    if len(unobserved) == 0:
        raise NoLegalFeature("no unobserved feature left to acquire")
    remaining = len(unobserved) if remaining is None else max(1, remaining)
    rng = np.random.default_rng(seed)
    subsets = candidate_subsets(unobserved, remaining, n_samples, rng, exhaustive)
    nbrs = knn.neighbors(values, mask)
    obj = _objectives(values, mask, subsets, knn, predictor, alpha, nbrs)
    best = subsets[int(np.argmin(obj))]
    if len(best) == 1:
        choice = best[0]
    else:
        single = {s[0]: v for s, v in zip(subsets, obj) if len(s) == 1}
        if all(i in single for i in best):
            scores = np.array([single[i] for i in best])
        else:
            scores = _objectives(values, mask, [(i,) for i in best], knn, predictor, alpha, nbrs)
        choice = best[int(np.argmin(scores))]
    if return_subset:
        return int(choice), SubsetCandidate(best, float(obj.min()))
    return int(choice)


class AacoPolicy:
    """Hard-budget wrapper: the remaining budget bounds candidate subset sizes."""

    name = "aaco"
    builtin = None

    def __init__(self, knn: KnnIndex, predictor: ProbaFn, budget: int, alpha: float = 0.0,
                 n_samples: int = 1000, seed: int = 0, exhaustive: bool = False):
        self.knn = knn
        self.predictor = predictor
        self.budget = budget
        self.alpha = alpha
        self.n_samples = n_samples
        self.seed = seed
        self.exhaustive = exhaustive
        self._calls = 0

    def select(self, values, mask):
        values = np.atleast_2d(values)
        mask = np.atleast_2d(mask)
        out = np.empty(len(mask), dtype=np.int64)
        for i in range(len(mask)):
            self._calls += 1
            left = self.budget - int(mask[i].sum())
            out[i] = aaco_select(values[i], mask[i], self.knn, self.predictor, self.alpha,
                                 self.n_samples, self.seed * 1_000_003 + self._calls, left,
                                 self.exhaustive)
        return out
