"""Small dense-network toolkit shared by every learned component.

Matrices are plain 2-D numpy arrays; networks are torch modules so that
reverse-mode gradients come from autograd. The numpy helpers
(:func:`weighted_cross_entropy`, :func:`adam_step`) exist so the loss and the
optimizer update can be checked against closed forms independently of torch.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
from torch import nn

CHECKPOINT_FORMAT = "afabench-weights"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class DimensionError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def as_matrix(a, cols: int | None = None) -> np.ndarray:
    """Validate a row-major real matrix (rows x cols, finite entries)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


@dataclass
class MlpConfig:
    input_dim: int
    hidden_dims: Sequence[int]
    output_dim: int
    dropout_rate: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer sizes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 250
    early_stop_patience: int = 10
    class_weights: Sequence[float] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")


class Mlp(nn.Module):
    """ReLU multilayer perceptron with (inverted) dropout after each hidden layer."""

    def __init__(self, config: MlpConfig, seed: int | None = None, dtype=torch.float32):
        super().__init__()
        self.config = config
        dims = [config.input_dim, *config.hidden_dims, config.output_dim]
        layers: list[nn.Module] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(fan_in, fan_out, dtype=dtype))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
                if config.dropout_rate > 0:
                    layers.append(nn.Dropout(config.dropout_rate))
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_glorot_uniform(self, gen)

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        """Activations of the last hidden layer."""
        return self.net[:-1](x)

    def forward_dropout(self, x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        """Forward pass with dropout always on, masks drawn from ``generator``."""
        for layer in self.net:
            if isinstance(layer, nn.Dropout):
                keep = 1.0 - layer.p
                x = x * (torch.rand(x.shape, generator=generator) < keep).to(x.dtype) / keep
            else:
                x = layer(x)
        return x


def init_glorot_uniform(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases, for every Linear."""
    with torch.no_grad():
        for layer in module.modules():
            if isinstance(layer, nn.Linear):
                bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
                w = torch.rand(layer.weight.shape, generator=generator, dtype=layer.weight.dtype)
                layer.weight.copy_((2 * w - 1) * bound)
                layer.bias.zero_()


def forward(mlp: Mlp, input, train_mode: bool = False) -> np.ndarray:
    """Evaluate ``mlp`` on a matrix and return the output logits as numpy."""
    x = as_matrix(input)
    if x.shape[1] != mlp.input_dim:
        raise DimensionError(f"input has {x.shape[1]} columns, network expects {mlp.input_dim}")
    dtype = next(mlp.parameters()).dtype
    was_training = mlp.training
    mlp.train(train_mode)
    try:
        with torch.no_grad():
            out = mlp(torch.as_tensor(x, dtype=dtype))
    finally:
        mlp.train(was_training)
    return out.numpy().astype(np.float64)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def weighted_cross_entropy(logits, labels, weights) -> tuple[float, np.ndarray]:
    """Mean over the batch of ``-w[y] * log softmax(logits)[y]``.

    Returns the loss and its gradient with respect to ``logits``.
    """
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    n, c = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise DimensionError("one label per row required")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError("label index out of range")
    if weights.shape != (c,):
        raise DimensionError("one weight per class required")
    logp = log_softmax_np(logits)
    w = weights[labels]
    loss = float(-(w * logp[np.arange(n), labels]).mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / n)[:, None]
    return loss, grad


def wce_loss(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor | None = None,
             reduction: str = "mean") -> torch.Tensor:
    """Torch counterpart of :func:`weighted_cross_entropy` (batch mean, not weight-normalised)."""
    nll = -torch.log_softmax(logits, dim=-1).gather(-1, labels.long().unsqueeze(-1)).squeeze(-1)
    if weights is not None:
        nll = nll * weights.to(nll.dtype)[labels.long()]
    if reduction == "none":
        return nll
    return nll.mean()


def class_weights(labels, num_classes: int) -> np.ndarray:
    """Inverse training-set class frequencies, normalised to mean 1.

    Classes absent from ``labels`` get weight 1 before normalisation.
    """
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes).astype(float)
    w = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / num_classes, 1.0)
    return w / w.mean()


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> list[np.ndarray]:
    """One bias-corrected Adam update; ``state`` is advanced in place."""
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p, dtype=np.float64) for p in params]
        state.v = [np.zeros_like(p, dtype=np.float64) for p in params]
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"shape mismatch for parameter {i}")
        state.m[i] = ADAM_BETA1 * state.m[i] + (1 - ADAM_BETA1) * g
        state.v[i] = ADAM_BETA2 * state.v[i] + (1 - ADAM_BETA2) * g * g
        m_hat = state.m[i] / (1 - ADAM_BETA1**t)
        v_hat = state.v[i] / (1 - ADAM_BETA2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS))
    return out


def make_adam(params: Iterable[torch.nn.Parameter], lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(ADAM_BETA1, ADAM_BETA2), eps=ADAM_EPS)


def polyak_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    with torch.no_grad():
        for t, o in zip(target.parameters(), online.parameters()):
            t.mul_(1 - tau).add_(o, alpha=tau)


class EarlyStopper:
    """Tracks the best validation loss and keeps a copy of the best weights."""

    def __init__(self, module: nn.Module, patience: int):
        self.module = module
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.bad_epochs = 0
        self.best_state = copy.deepcopy(module.state_dict())

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record ``val_loss``; returns True when training should stop."""
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            self.best_state = copy.deepcopy(self.module.state_dict())
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    def restore(self) -> None:
        self.module.load_state_dict(self.best_state)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss during {where}")


def fit_supervised(
    module: nn.Module,
    train_step: Callable[[np.ndarray, np.random.Generator], torch.Tensor],
    val_loss: Callable[[], float],
    n_train: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    params: Iterable[torch.nn.Parameter] | None = None,
    log: list | None = None,
) -> EarlyStopper:
    """Generic epoch loop: minibatch Adam with patience-based early stopping.

    ``train_step(batch_idx, rng)`` returns the loss tensor for a minibatch.
    The best-validation weights are restored before returning.
    """
    opt = make_adam(params if params is not None else module.parameters(), cfg.learning_rate)
    stopper = EarlyStopper(module, cfg.early_stop_patience)
    for epoch in range(cfg.max_epochs):
        module.train()
        for idx in minibatches(n_train, cfg.batch_size, rng):
            loss = train_step(idx, rng)
            check_finite(loss, f"epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        module.eval()
        with torch.no_grad():
            v = float(val_loss())
        if log is not None:
            log.append({"epoch": epoch, "val_loss": v})
        if stopper.update(v, epoch):
            break
    stopper.restore()
    module.eval()
    return stopper


# -- checkpoints ---------------------------------------------------------

def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def save_weights(path, module: nn.Module, header: dict) -> None:
    """Write a versioned JSON checkpoint: header + flat weight arrays.

    Floats are written with ``repr`` precision, so float32 weights round-trip
    bit-for-bit.
    """
    weights = []
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy()
        weights.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "data": arr.astype(np.float64).ravel().tolist(),
        })
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": _jsonable(header),
        "weights": weights,
    }
    Path(path).write_text(json.dumps(doc))


def load_weights(path) -> tuple[dict, dict[str, torch.Tensor]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a weight checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    state = {}
    for w in doc["weights"]:
        arr = np.asarray(w["data"], dtype=np.float64).astype(w["dtype"]).reshape(w["shape"])
        state[w["name"]] = torch.from_numpy(arr)
    return doc["header"], state


def save_mlp(path, mlp: Mlp, extra: dict | None = None) -> None:
    save_weights(path, mlp, {"mlp_config": asdict(mlp.config), **(extra or {})})


def load_mlp(path) -> tuple[Mlp, dict]:
    header, state = load_weights(path)
    cfg = MlpConfig(**header["mlp_config"])
    dtype = next(iter(state.values())).dtype
    mlp = Mlp(cfg, seed=0, dtype=dtype)
    mlp.load_state_dict(state)
    mlp.eval()
    return mlp, header
