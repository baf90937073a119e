"""Static baselines: one global feature order shared by every test instance.

PT-S ranks features by permutation importance of the shared predictor.
CAE-S learns a global subset with a concrete selector layer and retrains a
masked predictor per budget on random subsets of that set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from ..datasets import DatasetBundle, MaskingDistribution
from ..nnkit import (
    Mlp,
    MlpConfig,
    TrainConfig,
    check_finite,
    class_weights,
    fit_supervised,
    make_adam,
    minibatches,
    wce_loss,
)
from ..predictor import encode
from .base import ProbaFn, greedy_select

log = logging.getLogger(__name__)


@dataclass
class FeatureRanking:
    order: list[int]
    scores: np.ndarray
    method: str = "pt_s"

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise ValueError("ranking is not a permutation")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("non-finite importance")

    def to_json(self) -> dict:
        return {"method": self.method, "order": list(map(int, self.order)),
                "scores": np.asarray(self.scores).tolist()}


def permutation_importance(predictor: ProbaFn, val_x, val_y, train_x, seed: int = 0,
                           repeats: int = 5) -> FeatureRanking:
    """Accuracy drop when a column is replaced by draws from its training column.

    Ties in importance keep the lower index first.
    """
    val_x = np.asarray(val_x, dtype=np.float64)
    val_y = np.asarray(val_y)
    train_x = np.asarray(train_x, dtype=np.float64)
    if len(val_y) == 0:
        raise ValueError("empty validation split")
    rng = np.random.default_rng(seed)
    full = np.ones_like(val_x)
    base = float((predictor(val_x, full).argmax(1) == val_y).mean())
    d = val_x.shape[1]
    scores = np.zeros(d)
    for i in range(d):
        drops = []
        for _ in range(repeats):
            x = val_x.copy()
            x[:, i] = rng.choice(train_x[:, i], size=len(val_y), replace=True)
            drops.append(base - float((predictor(x, full).argmax(1) == val_y).mean()))
        scores[i] = np.mean(drops)
    order = np.argsort(-scores, kind="stable").tolist()
    return FeatureRanking(order, scores, "pt_s")


# -- CAE-S ------------------------------------------------------------------------

@dataclass
class CaeConfig:
    hidden: tuple[int, ...] = (128, 128)
    learning_rate: float = 1e-3
    batch_size: int = 128
    epochs: int = 250
    start_temperature: float = 10.0
    end_temperature: float = 0.1
    predictor_epochs: int = 250
    predictor_patience: int = 10
    dropout: float = 0.1


def cae_temperatures(cfg: CaeConfig) -> np.ndarray:
    return np.geomspace(cfg.start_temperature, cfg.end_temperature, max(cfg.epochs, 1))


class ConcreteSelector(nn.Module):
    """``b_max`` relaxed one-hot heads over the ``d`` input features."""

    def __init__(self, d: int, heads: int, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.logits = nn.Parameter(0.01 * torch.randn(heads, d, generator=g))

    def weights(self, temperature: float, generator=None, hard: bool = False) -> torch.Tensor:
        if hard:
            return nn.functional.one_hot(self.logits.argmax(-1), self.logits.shape[1]).float()
        u = torch.rand(self.logits.shape, generator=generator).clamp(1e-10, 1 - 1e-10)
        gumbel = -torch.log(-torch.log(u))
        return torch.softmax((self.logits + gumbel) / temperature, -1)

    def forward(self, x: torch.Tensor, temperature: float, generator=None, hard=False):
        return x @ self.weights(temperature, generator, hard).T

    def selection(self) -> list[int]:
        return self.logits.argmax(-1).tolist()


@dataclass
class StaticSelection:
    features: list[int]
    predictors: dict[int, Mlp] = field(default_factory=dict)
    duplicate_heads: bool = False
    method: str = "cae_s"

    def __post_init__(self):
        if len(set(self.features)) != len(self.features):
            raise ValueError("selected features must be distinct")

    def proba(self, budget: int) -> ProbaFn:
        """Builtin classifier for ``budget``; it only ever sees selected features."""
        mlp = self.predictors[budget]
        allowed = np.zeros(mlp.input_dim // 2)
        allowed[self.features] = 1.0

        def fn(values, mask):
            m = np.atleast_2d(mask) * allowed
            with torch.no_grad():
                return torch.softmax(mlp(encode(np.atleast_2d(values) * m, m)).double(), -1).numpy()

        return fn

    def to_json(self) -> dict:
        return {"method": self.method, "features": list(map(int, self.features)),
                "duplicate_heads": self.duplicate_heads}


def _dedupe(selector: ConcreteSelector) -> tuple[list[int], bool]:
    """Distinct features from the heads; collisions fall back to the next-best logit."""
    logits = selector.logits.detach().numpy()
    dup = len(set(logits.argmax(-1).tolist())) < logits.shape[0]
    chosen: list[int] = []
    for h in range(logits.shape[0]):
        j = next(int(j) for j in np.argsort(-logits[h], kind="stable") if int(j) not in chosen)
        chosen.append(j)
    return chosen, dup


def train_cae(bundle: DatasetBundle, b_max: int, cfg: CaeConfig | None = None, seed: int = 0,
              budgets=None) -> StaticSelection:
    """Concrete-selector training followed by per-budget predictor fits."""
    cfg = cfg or CaeConfig()
    d, C = bundle.d, bundle.num_classes
    if not 1 <= b_max <= d:
        raise ValueError("b_max must lie in [1, d]")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    w = torch.as_tensor(class_weights(bundle.train.labels, C), dtype=torch.float32)
    xtr = torch.as_tensor(bundle.train.features, dtype=torch.float32)
    ytr = torch.as_tensor(bundle.train.labels)
    if b_max == d:
        features = list(range(d))
        dup = False
    else:
        selector = ConcreteSelector(d, b_max, seed)
        head = Mlp(MlpConfig(b_max, cfg.hidden, C, cfg.dropout), seed=seed)
        opt = make_adam(list(selector.parameters()) + list(head.parameters()), cfg.learning_rate)
        for temp in cae_temperatures(cfg):
            head.train()
            for idx in minibatches(len(ytr), cfg.batch_size, rng):
                loss = wce_loss(head(selector(xtr[idx], float(temp), gen)), ytr[idx], w)
                check_finite(loss, "CAE selector")
                opt.zero_grad()
                loss.backward()
                opt.step()
        features, dup = _dedupe(selector)
        if dup:
            log.warning("concrete heads collapsed onto the same feature; re-annealed by "
                        "taking the next-best distinct logit")
    sel = StaticSelection(features, duplicate_heads=dup)
    for b in sorted(set(budgets or [b_max])):
        if b > len(features):
            raise ValueError("budget exceeds the selected set")
        sel.predictors[b] = _fit_subset_predictor(bundle, features, b, cfg, seed + b)
    return sel


def random_subset_masks(n: int, d: int, features, max_size: int, rng) -> np.ndarray:
    """Masks over ``features`` only, with sizes uniform on ``1..max_size``."""
    feats = np.asarray(features)
    masks = np.zeros((n, d))
    sizes = rng.integers(1, max_size + 1, size=n)
    for i, s in enumerate(sizes):
        masks[i, rng.choice(feats, size=s, replace=False)] = 1.0
    return masks


def _fit_subset_predictor(bundle, features, budget, cfg: CaeConfig, seed: int) -> Mlp:
    d, C = bundle.d, bundle.num_classes
    mlp = Mlp(MlpConfig(2 * d, cfg.hidden, C, cfg.dropout), seed=seed)
    w = torch.as_tensor(class_weights(bundle.train.labels, C), dtype=torch.float32)
    xtr, ytr = bundle.train.features, torch.as_tensor(bundle.train.labels)
    vrng = np.random.default_rng(seed + 1)
    vmask = random_subset_masks(bundle.val.n, d, features, budget, vrng)
    xv, yv = bundle.val.features, torch.as_tensor(bundle.val.labels)

    def step(idx, rng):
        m = random_subset_masks(len(idx), d, features, budget, rng)
        return wce_loss(mlp(encode(xtr[idx] * m, m)), ytr[idx], w)

    def val():
        return wce_loss(mlp(encode(xv * vmask, vmask)), yv, w).item()

    tc = TrainConfig(cfg.learning_rate, cfg.batch_size, cfg.predictor_epochs, cfg.predictor_patience)
    fit_supervised(mlp, step, val, len(ytr), tc, np.random.default_rng(seed))
    return mlp


# -- evaluation order ----------------------------------------------------------------

def static_eval_order(method: str, selection, b: int, seed: int = 0) -> list[int]:
    """PT-S: top-``b`` in rank order. CAE-S: ``b`` features of a random permutation."""
    if method == "pt_s":
        order = list(selection.order if isinstance(selection, FeatureRanking) else selection)
        if b > len(order):
            raise ValueError("budget exceeds the ranking length")
        return [int(i) for i in order[:b]]
    if method == "cae_s":
        feats = list(selection.features if isinstance(selection, StaticSelection) else selection)
        if b > len(feats):
            raise ValueError("budget exceeds the selected set")
        perm = np.random.default_rng(seed).permutation(len(feats))
        return [int(feats[i]) for i in perm[:b]]
    raise ValueError(f"unknown static method {method!r}")


class StaticPolicy:
    """Acquires a fixed sequence; the next element not yet observed is chosen."""

    def __init__(self, name: str, order, builtin: ProbaFn | None = None):
        self.name = name
        self.order = [int(i) for i in order]
        self.builtin = builtin

    def select(self, values, mask):
        mask = np.atleast_2d(mask)
        d = mask.shape[1]
        rank = np.full(d, -np.inf)
        for r, i in enumerate(self.order):
            rank[i] = len(self.order) - r
        return greedy_select(np.broadcast_to(rank, mask.shape), mask)
