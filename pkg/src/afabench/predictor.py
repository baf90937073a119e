"""Masked-input classifier shared by all acquisition methods.

The network sees ``values * mask`` concatenated with ``mask``, so an observed
zero is distinguishable from a missing feature.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .datasets import DatasetBundle, MaskingDistribution, sample_mask
from .nnkit import (
    DimensionError,
    Mlp,
    MlpConfig,
    TrainConfig,
    class_weights,
    fit_supervised,
    load_mlp,
    save_mlp,
    wce_loss,
)

DEFAULT_HIDDEN = (128, 128)
DEFAULT_DROPOUT = 0.1
DEFAULT_MC_PASSES = 10


@dataclass
class MaskedInput:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64) * self.mask
        if self.values.shape != self.mask.shape:
            raise DimensionError("values and mask must have the same shape")

    @classmethod
    def from_full(cls, x, mask) -> "MaskedInput":
        return cls(np.asarray(x) * np.asarray(mask), mask)


def encode(values, mask) -> torch.Tensor:
    """``(values * mask) || mask`` as a float32 tensor; accepts arrays or tensors."""
    v = torch.as_tensor(values, dtype=torch.float32)
    m = torch.as_tensor(mask, dtype=torch.float32)
    return torch.cat([v * m, m], dim=-1)


@dataclass
class SharedPredictor:
    mlp: Mlp
    num_classes: int
    manifest: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.mlp.input_dim // 2

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for t in self.mlp.state_dict().values():
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def logits(self, values, mask) -> torch.Tensor:
        """Deterministic (dropout off) logits for a batch; differentiable."""
        self.mlp.eval()
        return self.mlp(encode(values, mask))

    def predict_proba(self, values, mask) -> np.ndarray:
        values = np.atleast_2d(values)
        mask = np.atleast_2d(mask)
        if values.shape[1] != self.d or mask.shape[1] != self.d:
            raise DimensionError(f"predictor expects {self.d} features")
        with torch.no_grad():
            p = torch.softmax(self.logits(values, mask).double(), dim=-1)
        return p.numpy()

    def __call__(self, values, mask) -> np.ndarray:
        return self.predict_proba(values, mask)

    def save(self, path) -> None:
        save_mlp(path, self.mlp, {"num_classes": self.num_classes, "manifest": self.manifest})

    @classmethod
    def load(cls, path) -> "SharedPredictor":
        mlp, header = load_mlp(path)
        return cls(mlp, header["num_classes"], header.get("manifest", {}))


def predict(pred: SharedPredictor, m: MaskedInput) -> np.ndarray:
    """Class probabilities for a single masked instance."""
    if m.values.ndim != 1:
        raise DimensionError("predict takes one instance; use predict_proba for batches")
    return pred.predict_proba(m.values[None], m.mask[None])[0]


def mc_dropout_certainty(pred: SharedPredictor, m: MaskedInput, passes: int = DEFAULT_MC_PASSES,
                         seed: int | None = None) -> np.ndarray:
    """Mean softmax output over ``passes`` forward passes with dropout active."""
    values = np.atleast_2d(m.values)
    mask = np.atleast_2d(m.mask)
    out = mc_dropout_batch(pred.mlp, values, mask, passes, seed)
    return out[0] if m.values.ndim == 1 else out


def mc_dropout_batch(mlp: Mlp, values, mask, passes: int, seed: int | None = None,
                     generator: torch.Generator | None = None) -> np.ndarray:
    if passes < 1:
        raise ValueError("passes must be >= 1")
    x = encode(values, mask)
    if generator is None:
        generator = torch.Generator()
        if seed is not None:
            generator.manual_seed(seed)
        else:
            generator.seed()
    with torch.no_grad():
        rep = x.repeat(passes, 1)
        logits = mlp.forward_dropout(rep, generator)
        p = torch.softmax(logits.double(), dim=-1).reshape(passes, len(x), -1).mean(0)
    return p.numpy()


def masked_batch_loss(mlp: Mlp, x: np.ndarray, y: np.ndarray, mask: np.ndarray,
                      weights: torch.Tensor | None) -> torch.Tensor:
    logits = mlp(encode(x, mask))
    return wce_loss(logits, torch.as_tensor(y), weights)


def train_masked_classifier(mlp: Mlp, bundle: DatasetBundle, masking: MaskingDistribution,
                            cfg: TrainConfig, seed: int, log: list | None = None):
    """Pretrain ``mlp`` on randomly masked training rows.

    Validation loss is measured with the minimum masking probability of
    ``masking`` (a fixed mask drawn once).
    """
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    xtr, ytr = bundle.train.features, bundle.train.labels
    w = cfg.class_weights if cfg.class_weights is not None else class_weights(ytr, bundle.num_classes)
    w = torch.as_tensor(np.asarray(w), dtype=torch.float32)
    d = bundle.d
    val_mask = sample_mask(bundle.val.n, d, MaskingDistribution(masking.low, masking.low),
                           np.random.default_rng(seed + 7919))

    def step(idx, rng):
        mask = sample_mask(len(idx), d, masking, rng)
        return masked_batch_loss(mlp, xtr[idx], ytr[idx], mask, w)

    def val_loss():
        return masked_batch_loss(mlp, bundle.val.features, bundle.val.labels, val_mask, w).item()

    return fit_supervised(mlp, step, val_loss, len(ytr), cfg, rng, log=log)


def pretrain_shared(bundle: DatasetBundle, masking: MaskingDistribution | None = None,
                    cfg: TrainConfig | None = None, seed: int = 0,
                    hidden=DEFAULT_HIDDEN, dropout: float = DEFAULT_DROPOUT) -> SharedPredictor:
    """Train the shared classifier with the standard recipe.

    [128, 128] ReLU layers, dropout 0.1, Adam(1e-3), batch 128; the
    checkpoint with the lowest validation loss is kept.
    """
    from .datasets import masking_preset

    masking = masking or masking_preset(bundle.name)
    cfg = cfg or TrainConfig()
    mlp = Mlp(MlpConfig(2 * bundle.d, hidden, bundle.num_classes, dropout), seed=seed)
    log: list = []
    stopper = train_masked_classifier(mlp, bundle, masking, cfg, seed, log)
    manifest = {
        "dataset": bundle.name,
        "dataset_fingerprint": bundle.fingerprint(),
        "seed": seed,
        "masking": asdict(masking),
        "train_config": asdict(cfg),
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best,
        "epochs_run": len(log),
    }
    return SharedPredictor(mlp, bundle.num_classes, manifest)
