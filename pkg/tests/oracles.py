"""Independent reference implementations used by unit and acceptance tests."""

import itertools
import math

import numpy as np


def linear_softmax(d, c, seed):
    """Deterministic masked-input classifier ``softmax(W [x*m, m] + b)``."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(2 * d, c))
    b = rng.normal(size=c)

    def proba(values, mask):
        values, mask = np.atleast_2d(values), np.atleast_2d(mask)
        z = np.concatenate([values * mask, mask], 1) @ w + b
        z = z - z.max(1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(1, keepdims=True)

    return proba


def knn_rows(train_x, values, mask, k):
    """k nearest rows by sqrt(sum_S (x - v)^2 / |S|); all rows when S is empty."""
    observed = [i for i in range(len(mask)) if mask[i] > 0]
    if not observed:
        return list(range(len(train_x)))
    dist = []
    for j, row in enumerate(train_x):
        sq = sum((row[i] - values[i]) ** 2 for i in observed)
        dist.append((math.sqrt(sq / len(observed)), j))
    dist.sort()
    return [j for _, j in dist[:k]]


def subset_objective(train_x, train_y, values, mask, subset, rows, predictor, alpha=0.0):
    total = 0.0
    for j in rows:
        v, m = np.array(values, dtype=float), np.array(mask, dtype=float)
        for i in subset:
            v[i], m[i] = train_x[j][i], 1.0
        p = predictor((v * m)[None], m[None])[0]
        total += -math.log(max(p[train_y[j]], 1e-12))
    return total / len(rows) + alpha * len(subset)


def brute_force_select(train_x, train_y, values, mask, predictor, k, remaining, alpha=0.0):
    """Full search over every nonempty subset up to ``remaining`` features.

    Ties go to the earliest subset in (size, lexicographic) order; the feature
    returned is the member of the winning subset with the lowest singleton
    objective.
    """
    rows = knn_rows(train_x, values, mask, k)
    unobserved = [i for i in range(len(mask)) if mask[i] == 0]
    best, best_val = None, math.inf
    for r in range(1, min(remaining, len(unobserved)) + 1):
        for s in itertools.combinations(unobserved, r):
            val = subset_objective(train_x, train_y, values, mask, s, rows, predictor, alpha)
            if val < best_val:
                best, best_val = s, val
    singles = [subset_objective(train_x, train_y, values, mask, (i,), rows, predictor, alpha)
               for i in best]
    return best[int(np.argmin(singles))], best, best_val


def empirical_expectation(train_x, train_y, values, mask, subset, predictor):
    """Mean loss over every training row, filling ``subset`` from that row."""
    return subset_objective(train_x, train_y, values, mask, subset, range(len(train_x)), predictor)


def td_weight_argmax_grid(n=4, step=0.01):
    grid = np.round(np.arange(0, 1 + step / 2, step), 10)
    w = (1 - grid) * grid ** (n - 1)
    return grid[int(np.argmax(w))], float(w.max())
