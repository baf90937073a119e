"""Greedy conditional-mutual-information acquisition.

Three estimators of ``I(y; x_i | x_S)`` feed the same argmax rule:

* EDDI: a partial VAE samples the candidate feature, and the score is the
  expected KL between the shared predictor's posterior with and without it.
* GDFS: a selector network trained on one-step-ahead loss through a relaxed
  one-hot (Concrete) sample, annealed over five temperatures.
* DIME: a value network regressing the reduction in cross-entropy, bounded
  by the entropy of the current prediction.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.distributions import RelaxedOneHotCategorical

from ..datasets import DatasetBundle, MaskingDistribution, masking_preset, sample_mask
from ..nnkit import (
    DivergenceError,
    EarlyStopper,
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
from ..predictor import SharedPredictor, encode, train_masked_classifier
from .base import greedy_select, mask_observed

log = logging.getLogger(__name__)

OBSERVED_SENTINEL = -np.inf


# -- partial VAE -----------------------------------------------------------

@dataclass
class PvaeConfig:
    latent_dim: int | None = None
    hidden: tuple[int, ...] = (128, 128)
    beta: float | None = None
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 250
    patience: int = 10
    min_logvar: float = -4.0
    max_logvar: float = 4.0


def default_latent_dim(d: int) -> int:
    return 16 if d <= 50 else 32


def default_beta(dataset_name: str) -> float:
    return 0.01 if dataset_name.lower() == "afacontext" else 0.1


class Pvae(nn.Module):
    """VAE whose encoder reads ``(values * mask) || mask``.

    The ELBO reconstructs observed features only, so with nothing observed the
    posterior relaxes to the N(0, I) prior and decoder samples follow the data
    marginal.
    """

    def __init__(self, d: int, cfg: PvaeConfig, seed: int = 0):
        super().__init__()
        self.d = d
        self.cfg = cfg
        self.latent_dim = cfg.latent_dim or default_latent_dim(d)
        self.beta = 0.1 if cfg.beta is None else cfg.beta
        self.encoder = Mlp(MlpConfig(2 * d, cfg.hidden, 2 * self.latent_dim), seed=seed)
        self.decoder = Mlp(MlpConfig(self.latent_dim, cfg.hidden, 2 * d), seed=seed + 1)

    def posterior(self, values, mask):
        h = self.encoder(encode(values, mask))
        mu, logvar = h.chunk(2, dim=-1)
        return mu, logvar.clamp(self.cfg.min_logvar, self.cfg.max_logvar)

    def decode(self, z):
        h = self.decoder(z)
        mean, logvar = h.chunk(2, dim=-1)
        return mean, logvar.clamp(self.cfg.min_logvar, self.cfg.max_logvar)

    def elbo_terms(self, x, mask, beta: float | None = None):
        """Per-row (reconstruction log-likelihood, KL)."""
        x = torch.as_tensor(x, dtype=torch.float32)
        m = torch.as_tensor(mask, dtype=torch.float32)
        mu, logvar = self.posterior(x, m)
        z = mu + torch.randn_like(mu) * (0.5 * logvar).exp()
        mean, dec_logvar = self.decode(z)
        ll = -0.5 * (np.log(2 * np.pi) + dec_logvar + (x - mean) ** 2 / dec_logvar.exp())
        recon = (ll * m).sum(-1)
        kl = 0.5 * (mu**2 + logvar.exp() - 1.0 - logvar).sum(-1)
        return recon, kl

    def loss(self, x, mask, beta: float | None = None) -> torch.Tensor:
        beta = self.beta if beta is None else beta
        recon, kl = self.elbo_terms(x, mask)
        return -(recon - beta * kl).mean()

    @torch.no_grad()
    def sample_features(self, values, mask, n_samples: int,
                        generator: torch.Generator | None = None) -> torch.Tensor:
        """Draws ``x ~ p(x | x_S)``; returns ``n_samples x B x d``."""
        self.eval()
        mu, logvar = self.posterior(values, mask)
        shape = (n_samples, *mu.shape)
        z = mu + torch.randn(shape, generator=generator) * (0.5 * logvar).exp()
        mean, dec_logvar = self.decode(z)
        return mean + torch.randn(mean.shape, generator=generator) * (0.5 * dec_logvar).exp()


@dataclass
class PvaeReport:
    best_epoch: int
    best_val_elbo: float
    final_kl: float
    collapse_warning: bool
    curve: list = field(default_factory=list)


def train_pvae(bundle: DatasetBundle, masking: MaskingDistribution | None = None,
               cfg: PvaeConfig | None = None, seed: int = 0) -> tuple[Pvae, PvaeReport]:
    """Fit a partial VAE under random per-batch masking.

    The checkpoint with the best validation ELBO (same masking distribution,
    fixed masks) is returned. A mean KL below 1e-3 nats over the last five
    epochs sets ``collapse_warning``.
    """
    cfg = copy.copy(cfg) if cfg is not None else PvaeConfig()
    if cfg.beta is None:
        cfg.beta = default_beta(bundle.name)
    masking = masking or masking_preset(bundle.name)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    d = bundle.d
    model = Pvae(d, cfg, seed)
    xtr = bundle.train.features
    val_mask = sample_mask(bundle.val.n, d, masking, np.random.default_rng(seed + 1))
    val_gen_seed = seed + 2
    kls: list[float] = []
    curve: list = []

    def step(idx, rng):
        mask = sample_mask(len(idx), d, masking, rng)
        recon, kl = model.elbo_terms(xtr[idx], mask)
        kls.append(float(kl.mean().detach()))
        return -(recon - model.beta * kl).mean()

    def val_loss():
        state = torch.random.get_rng_state()
        torch.manual_seed(val_gen_seed)
        v = model.loss(bundle.val.features, val_mask).item()
        torch.random.set_rng_state(state)
        return v

    tcfg = TrainConfig(cfg.learning_rate, cfg.batch_size, cfg.max_epochs, cfg.patience)
    stopper = fit_supervised(model, step, val_loss, len(xtr), tcfg, rng, log=curve)
    n_batches = max(1, int(np.ceil(len(xtr) / cfg.batch_size)))
    tail = kls[-5 * n_batches:]
    final_kl = float(np.mean(tail)) if tail else 0.0
    report = PvaeReport(stopper.best_epoch, -stopper.best, final_kl, final_kl < 1e-3, curve)
    if report.collapse_warning:
        log.warning("PVAE posterior collapse suspected (KL %.2e nats)", final_kl)
    return model, report


# -- EDDI ------------------------------------------------------------------

def _kl_rows(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    p = p.clamp_min(1e-12)
    q = q.clamp_min(1e-12)
    return (p * (p.log() - q.log())).sum(-1)


@torch.no_grad()
def eddi_cmi(pvae: Pvae, predictor: SharedPredictor, values, mask, mc_samples: int = 50,
             seed: int = 0) -> np.ndarray:
    """Monte Carlo information-gain scores for every unobserved feature.

    For each sample ``x^s ~ p(x | x_S)`` and candidate ``i``, the score
    averages ``KL(p(y | x_S, x_i^s) || p(y | x_S))`` under the predictor.
    Observed positions get ``-inf``. Accepts a single state or a batch.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    single = values.ndim == 1
    values = np.atleast_2d(values)
    mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    b, d = mask.shape
    gen = torch.Generator().manual_seed(seed)
    samples = pvae.sample_features(values, mask, mc_samples, gen)  # S x B x d
    v = torch.as_tensor(values * mask, dtype=torch.float32)
    m = torch.as_tensor(mask, dtype=torch.float32)
    p_ref = torch.softmax(predictor.logits(v, m).double(), -1)  # B x C

    eye = torch.eye(d)
    # candidate inputs: S x B x d(candidates) x d(features)
    cand_m = (m[None, :, None, :] + eye[None, None]).clamp_max(1.0)
    cand_v = v[None, :, None, :] * (1 - eye[None, None]) + samples[:, :, :, None] * eye[None, None]
    # cand_v[s, b, i, j] = v[b, j] for j != i, samples[s, b, i] for j == i
    scores = torch.zeros(b, d, dtype=torch.float64)
    chunk = max(1, 200_000 // max(1, b * d * d))
    for s0 in range(0, mc_samples, chunk):
        sv = cand_v[s0:s0 + chunk]
        sm = cand_m.expand(sv.shape[0], -1, -1, -1)
        p = torch.softmax(predictor.logits(sv.reshape(-1, d), sm.reshape(-1, d)).double(), -1)
        p = p.reshape(sv.shape[0], b, d, -1)
        scores += _kl_rows(p, p_ref[None, :, None, :]).sum(0)
    scores = (scores / mc_samples).numpy()
    scores = mask_observed(scores, mask)
    return scores[0] if single else scores


class EddiPolicy:
    name = "eddi_gg"

    def __init__(self, pvae: Pvae, predictor: SharedPredictor, mc_samples: int = 50, seed: int = 0):
        self.pvae = pvae
        self.predictor = predictor
        self.mc_samples = mc_samples
        self.seed = seed
        self.builtin = None
        self._calls = 0

    def scores(self, values, mask):
        self._calls += 1
        return eddi_cmi(self.pvae, self.predictor, values, mask, self.mc_samples,
                        self.seed * 1_000_003 + self._calls)

    def select(self, values, mask):
        return greedy_select(self.scores(values, mask))


# -- shared pieces of the discriminative methods -------------------------------

@dataclass
class DiscriminativeConfig:
    max_features: int | None = None
    hidden: tuple[int, ...] = (128, 128)
    dropout: float = 0.3
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 250
    patience: int = 10
    pretrain_epochs: int = 250


def default_max_features(d: int) -> int:
    return min(d, 10)


def _builtin_predictor(bundle: DatasetBundle, cfg: DiscriminativeConfig,
                       predictor_init: SharedPredictor | Mlp | None, masking, seed: int) -> Mlp:
    mlp = Mlp(MlpConfig(2 * bundle.d, cfg.hidden, bundle.num_classes, cfg.dropout), seed=seed)
    init = predictor_init.mlp if isinstance(predictor_init, SharedPredictor) else predictor_init
    if init is not None and init.config.hidden_dims == mlp.config.hidden_dims:
        mlp.load_state_dict(init.state_dict())
    else:
        tcfg = TrainConfig(cfg.learning_rate, cfg.batch_size, cfg.pretrain_epochs, cfg.patience)
        train_masked_classifier(mlp, bundle, masking, tcfg, seed)
    return mlp


class MlpProba:
    """Callable ``(values, mask) -> probabilities`` around a masked-input MLP."""

    def __init__(self, mlp: Mlp):
        self.mlp = mlp

    def __call__(self, values, mask):
        self.mlp.eval()
        with torch.no_grad():
            return torch.softmax(self.mlp(encode(np.atleast_2d(values), np.atleast_2d(mask))).double(),
                                 -1).numpy()


def _onehot(idx: torch.Tensor, d: int) -> torch.Tensor:
    return torch.nn.functional.one_hot(idx, d).float()


# -- GDFS --------------------------------------------------------------------

def gdfs_temperatures(start: float = 1.0, end: float = 0.1, stages: int = 5) -> np.ndarray:
    return np.geomspace(start, end, stages)


@dataclass
class GdfsModel:
    selector: Mlp
    predictor: Mlp
    max_features: int
    history: list = field(default_factory=list)

    def scores(self, values, mask) -> np.ndarray:
        self.selector.eval()
        with torch.no_grad():
            s = self.selector(encode(np.atleast_2d(values), np.atleast_2d(mask))).double().numpy()
        return mask_observed(s, np.atleast_2d(mask))


class GdfsPolicy:
    name = "gdfs_dg"

    def __init__(self, model: GdfsModel):
        self.model = model
        self.builtin = MlpProba(model.predictor)

    def scores(self, values, mask):
        return self.model.scores(values, mask)

    def select(self, values, mask):
        return greedy_select(self.scores(values, mask))


def _gdfs_rollout_loss(selector, predictor, x, y, w, n_steps, temp, hard: bool):
    b, d = x.shape
    m = torch.zeros(b, d)
    total = torch.zeros(())
    for _ in range(n_steps):
        logits = selector(torch.cat([x * m, m], -1))
        logits = logits.masked_fill(m > 0, -1e6)
        if hard:
            m_step = torch.maximum(m, _onehot(logits.argmax(-1), d))
        else:
            soft = RelaxedOneHotCategorical(torch.tensor(temp), logits=logits).rsample()
            m_step = torch.maximum(m, soft)
        total = total + wce_loss(predictor(torch.cat([x * m_step, m_step], -1)), y, w)
        m = torch.maximum(m, _onehot(logits.argmax(-1), d)).detach()
    return total / n_steps


def train_gdfs(bundle: DatasetBundle, predictor_init=None, cfg: DiscriminativeConfig | None = None,
               seed: int = 0, masking: MaskingDistribution | None = None,
               temperatures=None) -> GdfsModel:
    """Joint selector/predictor training with gradual temperature annealing.

    Each stage starts from the best-validation weights of the previous one.
    """
    cfg = cfg or DiscriminativeConfig()
    masking = masking or masking_preset(bundle.name)
    n_steps = cfg.max_features or default_max_features(bundle.d)
    temps = gdfs_temperatures() if temperatures is None else np.asarray(temperatures)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    d = bundle.d
    predictor = _builtin_predictor(bundle, cfg, predictor_init, masking, seed)
    selector = Mlp(MlpConfig(2 * d, cfg.hidden, d, cfg.dropout), seed=seed + 11)
    xtr = torch.as_tensor(bundle.train.features, dtype=torch.float32)
    ytr = torch.as_tensor(bundle.train.labels)
    xva = torch.as_tensor(bundle.val.features, dtype=torch.float32)
    yva = torch.as_tensor(bundle.val.labels)
    w = torch.as_tensor(class_weights(bundle.train.labels, bundle.num_classes), dtype=torch.float32)
    both = nn.ModuleList([selector, predictor])
    history = []
    for temp in temps:
        opt = make_adam(both.parameters(), cfg.learning_rate)
        stopper = EarlyStopper(both, cfg.patience)
        for epoch in range(cfg.max_epochs):
            both.train()
            for idx in minibatches(len(ytr), cfg.batch_size, rng):
                loss = _gdfs_rollout_loss(selector, predictor, xtr[idx], ytr[idx], w, n_steps,
                                          float(temp), hard=False)
                check_finite(loss, f"GDFS stage tau={temp:.3f}")
                opt.zero_grad()
                loss.backward()
                opt.step()
            both.eval()
            with torch.no_grad():
                v = _gdfs_rollout_loss(selector, predictor, xva, yva, w, n_steps, float(temp),
                                       hard=True).item()
            history.append({"temperature": float(temp), "epoch": epoch, "val_loss": v})
            if stopper.update(v, epoch):
                break
        stopper.restore()
    both.eval()
    return GdfsModel(selector, predictor, n_steps, history)


# -- DIME --------------------------------------------------------------------

@dataclass
class DimeConfig(DiscriminativeConfig):
    epsilon: float = 0.05
    epsilon_decay: float = 0.2
    epsilon_patience: int = 5
    max_decays: int = 10
    all_candidates: bool = True


def entropy_rows(logits: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(logits, -1)
    return -(logp.exp() * logp).sum(-1)


@dataclass
class DimeModel:
    value_net: Mlp
    predictor: Mlp
    max_features: int
    history: list = field(default_factory=list)

    def cmi(self, values, mask) -> torch.Tensor:
        """Bounded CMI estimates: ``sigmoid(g(x_S)) * H(p(y | x_S))``."""
        x = encode(values, mask)
        h = entropy_rows(self.predictor(x)).detach()
        return torch.sigmoid(self.value_net(x)) * h[:, None]

    def scores(self, values, mask) -> np.ndarray:
        self.value_net.eval()
        self.predictor.eval()
        with torch.no_grad():
            s = self.cmi(np.atleast_2d(values), np.atleast_2d(mask)).double().numpy()
        return mask_observed(s, np.atleast_2d(mask))


class DimePolicy:
    name = "dime_dg"

    def __init__(self, model: DimeModel):
        self.model = model
        self.builtin = MlpProba(model.predictor)

    def scores(self, values, mask):
        return self.model.scores(values, mask)

    def select(self, values, mask):
        return greedy_select(self.scores(values, mask))


def _dime_rollout(model: DimeModel, x, y, w, n_steps, eps, gen, all_candidates: bool):
    b, d = x.shape
    m = torch.zeros(b, d)
    pred_total = torch.zeros(())
    value_total = torch.zeros(())
    rows = torch.arange(b)
    for _ in range(n_steps):
        inp = torch.cat([x * m, m], -1)
        logits = model.predictor(inp)
        loss_before = wce_loss(logits, y, reduction="none")
        h = entropy_rows(logits).detach()
        cmi = torch.sigmoid(model.value_net(inp)) * h[:, None]
        greedy = cmi.detach().masked_fill(m > 0, -np.inf).argmax(-1)
        rand_scores = torch.rand(b, d, generator=gen).masked_fill(m > 0, -1.0)
        explore = torch.rand(b, generator=gen) < eps
        action = torch.where(explore, rand_scores.argmax(-1), greedy)
        if all_candidates:
            eye = torch.eye(d)
            cm = (m[:, None, :] + eye[None]).clamp_max(1.0)
            cin = torch.cat([x[:, None, :] * cm, cm], -1).reshape(b * d, 2 * d)
            with torch.no_grad():
                after_all = wce_loss(model.predictor(cin), y.repeat_interleave(d),
                                     reduction="none").reshape(b, d)
            target = loss_before.detach()[:, None] - after_all
            legal = (m == 0).float()
            value_total = value_total + (((cmi - target) ** 2) * legal).sum() / legal.sum()
        m = torch.maximum(m, _onehot(action, d))
        after = model.predictor(torch.cat([x * m, m], -1))
        loss_after = wce_loss(after, y, reduction="none")
        if not all_candidates:
            target = (loss_before - loss_after).detach()
            value_total = value_total + ((cmi[rows, action] - target) ** 2).mean()
        pred_total = pred_total + (loss_after * w[y]).mean()
    return pred_total / n_steps, value_total / n_steps


def train_dime(bundle: DatasetBundle, predictor_init=None, cfg: DimeConfig | None = None,
               seed: int = 0, masking: MaskingDistribution | None = None) -> DimeModel:
    """Joint value-network/predictor training with decaying epsilon-greedy exploration.

    Epsilon is multiplied by ``epsilon_decay`` whenever the validation loss
    has not improved for ``epsilon_patience`` epochs; training stops after
    ``max_decays`` decays or ``max_epochs``.
    """
    cfg = cfg or DimeConfig()
    masking = masking or masking_preset(bundle.name)
    n_steps = cfg.max_features or default_max_features(bundle.d)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed + 5)
    d = bundle.d
    predictor = _builtin_predictor(bundle, cfg, predictor_init, masking, seed)
    value_net = Mlp(MlpConfig(2 * d, cfg.hidden, d, cfg.dropout), seed=seed + 13)
    model = DimeModel(value_net, predictor, n_steps)
    both = nn.ModuleList([value_net, predictor])
    xtr = torch.as_tensor(bundle.train.features, dtype=torch.float32)
    ytr = torch.as_tensor(bundle.train.labels)
    xva = torch.as_tensor(bundle.val.features, dtype=torch.float32)
    yva = torch.as_tensor(bundle.val.labels)
    w = torch.as_tensor(class_weights(bundle.train.labels, bundle.num_classes), dtype=torch.float32)
    opt = make_adam(both.parameters(), cfg.learning_rate)
    stopper = EarlyStopper(both, patience=10**9)
    eps, decays, stall = cfg.epsilon, 0, 0
    for epoch in range(cfg.max_epochs):
        both.train()
        for idx in minibatches(len(ytr), cfg.batch_size, rng):
            pl, vl = _dime_rollout(model, xtr[idx], ytr[idx], w, n_steps, eps, gen,
                                   cfg.all_candidates)
            loss = pl + vl
            check_finite(loss, "DIME training")
            opt.zero_grad()
            loss.backward()
            opt.step()
        both.eval()
        with torch.no_grad():
            vgen = torch.Generator().manual_seed(seed + 17)
            pl, vl = _dime_rollout(model, xva, yva, w, n_steps, 0.0, vgen, cfg.all_candidates)
            v = (pl + vl).item()
        model.history.append({"epoch": epoch, "val_loss": v, "epsilon": eps})
        improved = v < stopper.best
        stopper.update(v, epoch)
        stall = 0 if improved else stall + 1
        if stall >= cfg.epsilon_patience:
            if decays >= cfg.max_decays:
                break
            eps *= cfg.epsilon_decay
            decays += 1
            stall = 0
    stopper.restore()
    both.eval()
    return model
