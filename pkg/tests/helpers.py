"""Small constructed datasets with known answers."""

import numpy as np

from afabench.datasets import DatasetBundle, TabularDataset


def bundle_from_arrays(name, x, y, num_classes, sizes=None, seed=0):
    n = len(y)
    sizes = sizes or (int(0.7 * n), int(0.15 * n), n - int(0.7 * n) - int(0.15 * n))
    a, b = sizes[0], sizes[0] + sizes[1]
    parts = [TabularDataset(x[s], y[s], num_classes, tag, name)
             for s, tag in ((slice(0, a), "train"), (slice(a, b), "val"), (slice(b, None), "test"))]
    return DatasetBundle(name, *parts, num_classes=num_classes, seed=seed)


def copy_dataset(n=1000, n_noise=3, seed=0, copy_index=0, scale=1.0):
    """Binary label; one feature equals ``scale * (2y - 1)``, the rest are N(0, 1) noise."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, n_noise + 1))
    x[:, copy_index] = scale * (2.0 * y - 1.0)
    return bundle_from_arrays("copy", x, y, 2, seed=seed)


def informative_set_dataset(n=1500, informative=(1, 4, 6), d=8, seed=0):
    """Label = binary code of the signs of the informative features.

    Every informative feature is needed; the others are pure noise.
    """
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, (n, len(informative)))
    y = (signs * (2 ** np.arange(len(informative)))).sum(1)
    x = rng.standard_normal((n, d))
    x[:, list(informative)] = (2.0 * signs - 1.0) + 0.1 * rng.standard_normal(signs.shape)
    return bundle_from_arrays("informative", x, y, 2 ** len(informative), seed=seed)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
