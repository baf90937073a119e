"""Benchmark engine: configs, seed x split sweeps, rollouts, metrics, persistence.

Each (method, dataset, budget, seed, split) cell trains its policy, rolls it
out on the test split one acquisition at a time and records the metric after
every step with the configured classifier. Cells write their own JSON and
JSONL files, which are merged afterwards; nothing is shared between workers.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from sklearn.metrics import f1_score

from .datasets import (
    AFAContextSpec,
    CsvSchema,
    DatasetBundle,
    TabularDataset,
    load_csv,
    make_dataset,
    masking_preset,
    split_permutation,
)
from .env import read_jsonl, write_jsonl
from .predictor import SharedPredictor, pretrain_shared
from .policies.base import NoLegalFeature, RandomPolicy

log = logging.getLogger(__name__)

BUDGET_PRESETS: dict[str, tuple[int, int, int]] = {
    "afacontext": (3, 5, 10),
    "cube": (3, 5, 10),
    "diabetes": (5, 10, 15),
    "physionet": (5, 10, 15),
    "miniboone": (5, 10, 15),
    "mnist": (10, 20, 30),
    "fashionmnist": (10, 20, 30),
}
BUDGET_NAMES = ("small", "medium", "large")
METRIC_BY_DATASET = {"physionet": "f1"}

METHODS = ("random", "eddi", "gdfs", "dime", "jafa", "ol", "odin_mfrl", "odin_mbrl",
           "aaco", "pt_s", "cae_s", "oracle")
BUILTIN_METHODS = {"gdfs", "dime", "jafa", "ol", "cae_s"}


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """A policy broke the hard-budget protocol (repeat or missing acquisition)."""


def resolve_budget(dataset: str, budget) -> int:
    if isinstance(budget, str):
        if budget not in BUDGET_NAMES:
            raise ConfigError(f"unknown budget name {budget!r}")
        if dataset not in BUDGET_PRESETS:
            raise ConfigError(f"no budget presets for {dataset!r}")
        return BUDGET_PRESETS[dataset][BUDGET_NAMES.index(budget)]
    return int(budget)


@dataclass
class ExperimentConfig:
    """One method on one dataset at one budget, swept over seeds x splits.

    ``method_config`` holds keyword overrides for the method's training
    config; ``csv_path``/``schema`` load a real dataset instead of a
    synthetic one.
    """

    dataset: str
    method: str
    budget: int | str = "medium"
    classifier_mode: str = "shared"
    seeds: tuple[int, ...] = (0, 1, 2)
    splits: tuple[int, ...] = (0, 1, 2)
    method_config: dict = field(default_factory=dict)
    predictor_config: dict = field(default_factory=dict)
    csv_path: str | None = None
    schema: dict | None = None
    data_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.classifier_mode not in ("shared", "builtin"):
            raise ConfigError("classifier_mode must be 'shared' or 'builtin'")
        if self.classifier_mode == "builtin" and self.method not in BUILTIN_METHODS:
            raise ConfigError(f"{self.method} has no builtin classifier")
        if self.method == "oracle" and self.dataset != "afacontext":
            raise ConfigError("the lookahead oracle is defined for afacontext only")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.splits = tuple(int(s) for s in self.splits)
        if not self.seeds or not self.splits:
            raise ConfigError("need at least one seed and one split")

    @property
    def b(self) -> int:
        return resolve_budget(self.dataset, self.budget)

    @property
    def metric_kind(self) -> str:
        if self.schema and self.schema.get("metric"):
            return self.schema["metric"]
        return METRIC_BY_DATASET.get(self.dataset, "accuracy")

    def to_json(self) -> dict:
        d = asdict(self)
        d["seeds"], d["splits"] = list(self.seeds), list(self.splits)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)


def load_config(path) -> list[ExperimentConfig]:
    """A JSON document holding one config object or a list of them."""
    doc = json.loads(Path(path).read_text())
    items = doc if isinstance(doc, list) else doc.get("experiments", [doc])
    return [ExperimentConfig.from_json(it) for it in items]


# -- metrics and curves ---------------------------------------------------------------

def metric(predictions, labels, kind: str = "accuracy") -> float:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if len(p) == 0:
        raise ValueError("empty input")
    if p.shape != y.shape:
        raise ValueError("predictions and labels differ in length")
    if kind == "accuracy":
        return float(np.mean(p == y))
    if kind == "f1":
        return float(f1_score(y, p, average="macro", zero_division=0))
    raise ValueError(f"unknown metric {kind!r}")


@dataclass
class BudgetCurve:
    mean: np.ndarray
    std: np.ndarray
    kind: str = "accuracy"
    n_runs: int = 1

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape:
            raise ValueError("mean and std lengths differ")
        if np.any(self.std < 0):
            raise ValueError("negative std")

    @property
    def steps(self) -> int:
        return len(self.mean)

    @classmethod
    def from_runs(cls, runs, kind: str = "accuracy") -> "BudgetCurve":
        a = np.asarray(runs, dtype=np.float64)
        std = a.std(0, ddof=1) if len(a) > 1 else np.zeros(a.shape[1])
        return cls(a.mean(0), std, kind, len(a))


# -- data ----------------------------------------------------------------------------

def resplit(bundle: DatasetBundle, split: int) -> DatasetBundle:
    """Pool a synthetic bundle and redraw train/val/test with the same sizes.

    Split 0 keeps the generated order.
    """
    if split == 0:
        return bundle
    parts = (bundle.train, bundle.val, bundle.test)
    x = np.concatenate([p.features for p in parts])
    y = np.concatenate([p.labels for p in parts])
    perm = split_permutation(len(y), split)
    x, y = x[perm], y[perm]
    sizes = np.cumsum([p.n for p in parts])
    chunks = np.split(np.arange(len(y)), sizes[:-1])
    new = [TabularDataset(x[c], y[c], bundle.num_classes, p.split, bundle.name)
           for c, p in zip(chunks, parts)]
    spec = dict(bundle.spec or {}, split=split)
    return replace(bundle, train=new[0], val=new[1], test=new[2], spec=spec)


def load_data(cfg: ExperimentConfig, split: int) -> DatasetBundle:
    if cfg.csv_path:
        if not cfg.schema:
            raise ConfigError("csv_path needs a schema")
        return load_csv(cfg.csv_path, CsvSchema(**cfg.schema), seed=split)
    return resplit(make_dataset(cfg.dataset, seed=cfg.data_seed), split)


# -- shared components (predictor, PVAE) ------------------------------------------------

_CACHE: dict = {}


def shared_predictor(bundle: DatasetBundle, workdir: Path | None = None, **kwargs) -> SharedPredictor:
    """The one shared classifier per dataset split, cached in memory and on disk."""
    key = ("predictor", bundle.fingerprint(), json.dumps(kwargs, sort_keys=True, default=str))
    if key in _CACHE:
        return _CACHE[key]
    path = None
    if workdir is not None:
        path = Path(workdir) / "predictors" / f"{bundle.name}_{bundle.fingerprint()}.json"
        if path.exists():
            pred = SharedPredictor.load(path)
            if pred.manifest.get("dataset_fingerprint") != bundle.fingerprint():
                raise ConfigError(f"{path}: predictor was trained on another dataset")
            _CACHE[key] = pred
            return pred
    pred = pretrain_shared(bundle, seed=0, **kwargs)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        pred.save(path)
    _CACHE[key] = pred
    return pred


def shared_pvae(bundle: DatasetBundle, seed: int = 0, **cfg):
    """PVAE shared by EDDI and the model-based ODIN variant."""
    from .policies.greedy import PvaeConfig, train_pvae

    key = ("pvae", bundle.fingerprint(), seed, json.dumps(cfg, sort_keys=True, default=str))
    if key not in _CACHE:
        _CACHE[key] = train_pvae(bundle, cfg=PvaeConfig(**cfg), seed=seed)[0]
    return _CACHE[key]


def clear_cache() -> None:
    _CACHE.clear()


# -- lookahead oracle ------------------------------------------------------------------

class LookaheadOracle:
    """Scripted AFAContext policy that resolves the context before anything else.

    Step one acquires the first context feature; if it does not settle the
    context the second one follows. Inside the active group the feature with
    the largest information about the class, computed exactly from the known
    generative model, is taken next.
    """

    name = "oracle"
    builtin = None

    def __init__(self, spec: AFAContextSpec = AFAContextSpec(), grid: int = 801):
        from .datasets import cube_pattern

        self.spec = spec
        width = len(spec.group_a)
        self.means = cube_pattern(spec.n_classes, width, spec.noise_mean)
        self.sigmas = np.full_like(self.means, spec.noise_sigma)
        for k in range(spec.n_classes):
            self.sigmas[k, k:k + 3] = spec.informative_sigma
        lo = min(self.means.min(), 0.0) - 6 * max(spec.noise_sigma, spec.informative_sigma)
        hi = max(self.means.max(), 1.0) + 6 * max(spec.noise_sigma, spec.informative_sigma)
        self.grid = np.linspace(lo, hi, grid)

    def _context(self, values, mask) -> int | None:
        c0, c1 = self.spec.context_indices
        if mask[c0] > 0:
            if values[c0] > 0.5:
                return 0
            if len(self.spec.context_indices) == 2:
                return 1
        if mask[c1] > 0:
            return 1 if values[c1] > 0.5 else 0
        return None

    def _log_lik(self, x, pos) -> np.ndarray:
        mu, sd = self.means[:, pos], self.sigmas[:, pos]
        return -0.5 * ((x - mu) / sd) ** 2 - np.log(sd)

    def posterior(self, values, mask, group) -> np.ndarray:
        logp = np.zeros(self.spec.n_classes)
        for pos, j in enumerate(group):
            if mask[j] > 0:
                logp += self._log_lik(values[j], pos)
        p = np.exp(logp - logp.max())
        return p / p.sum()

    def information(self, post, pos) -> float:
        """Mutual information between the class and one group feature (nats)."""
        mu, sd = self.means[:, pos], self.sigmas[:, pos]
        g = self.grid[:, None]
        dens = np.exp(-0.5 * ((g - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        mix = dens @ post
        dx = self.grid[1] - self.grid[0]
        h_mix = -np.sum(mix * np.log(np.maximum(mix, 1e-300))) * dx
        h_cond = np.sum(post * (0.5 * np.log(2 * np.pi * np.e * sd ** 2)))
        return float(h_mix - h_cond)

    def select_one(self, values, mask) -> int:
        c = self._context(values, mask)
        if c is None:
            for j in self.spec.context_indices:
                if mask[j] == 0:
                    return int(j)
        group = self.spec.group_a if c == 0 else self.spec.group_b
        post = self.posterior(values, mask, group)
        best, best_i = -np.inf, None
        for pos, j in enumerate(group):
            if mask[j] == 0:
                info = self.information(post, pos)
                if info > best + 1e-12:
                    best, best_i = info, j
        if best_i is not None:
            return int(best_i)
        rest = [j for j in range(len(mask)) if mask[j] == 0]
        if not rest:
            raise NoLegalFeature("no unobserved feature left to acquire")
        return int(rest[0])

    def select(self, values, mask):
        values = np.atleast_2d(values)
        mask = np.atleast_2d(mask)
        return np.array([self.select_one(v, m) for v, m in zip(values, mask)], dtype=np.int64)


def oracle_afacontext(values, mask, spec: AFAContextSpec = AFAContextSpec(),
                      dataset: str = "afacontext") -> int:
    if dataset != "afacontext":
        raise ConfigError("the lookahead oracle needs the AFAContext generative model")
    return LookaheadOracle(spec).select_one(np.asarray(values, float), np.asarray(mask, float))


# -- rollouts -------------------------------------------------------------------------

def rollout(policy, features, labels, budget: int, classifier, kind: str = "accuracy",
            ids=None, batch_size: int = 256) -> tuple[np.ndarray, list[dict]]:
    """Acquire ``budget`` features per test row; returns per-step metric and transcripts."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    n, d = x.shape
    if budget > d:
        raise ConfigError("budget exceeds feature count")
    ids = np.arange(n) if ids is None else np.asarray(ids)
    actions = np.zeros((n, budget), dtype=np.int64)
    preds = np.zeros((n, budget), dtype=np.int64)
    for lo in range(0, n, batch_size):
        rows = np.arange(lo, min(n, lo + batch_size))
        mask = np.zeros((len(rows), d))
        for t in range(budget):
            a = np.asarray(policy.select(x[rows] * mask, mask), dtype=np.int64).reshape(-1)
            if a.shape != (len(rows),) or np.any(a < 0) or np.any(a >= d):
                raise ProtocolError(f"{policy.name}: malformed action batch")
            if np.any(mask[np.arange(len(rows)), a] > 0):
                raise ProtocolError(f"{policy.name}: repeated acquisition")
            mask[np.arange(len(rows)), a] = 1.0
            actions[rows, t] = a
            preds[rows, t] = np.asarray(classifier(x[rows] * mask, mask)).argmax(1)
    curve = np.array([metric(preds[:, t], y, kind) for t in range(budget)])
    records = [{"id": int(ids[i]), "label": int(y[i]), "actions": actions[i].tolist(),
                "predictions": preds[i].tolist()} for i in range(n)]
    return curve, records


def curve_from_transcripts(records: list[dict], kind: str = "accuracy") -> np.ndarray:
    """Metric per step from the stored predictions alone."""
    y = np.array([r["label"] for r in records])
    preds = np.array([r["predictions"] for r in records])
    return np.array([metric(preds[:, t], y, kind) for t in range(preds.shape[1])])


def replay_curve(records: list[dict], features, classifier, kind: str = "accuracy") -> np.ndarray:
    """Recompute the curve by re-applying the recorded acquisitions."""
    x = np.asarray(features, dtype=np.float64)
    idx = np.array([r["id"] for r in records])
    y = np.array([r["label"] for r in records])
    acts = np.array([r["actions"] for r in records])
    out = []
    for lo in range(0, len(idx), 256):
        rows = np.arange(lo, min(len(idx), lo + 256))
        xs = x[idx[rows]]
        mask = np.zeros_like(xs)
        chunk = []
        for t in range(acts.shape[1]):
            mask[np.arange(len(rows)), acts[rows, t]] = 1.0
            chunk.append(np.asarray(classifier(xs * mask, mask)).argmax(1))
        out.append(np.stack(chunk, 1))
    preds = np.concatenate(out)
    return np.array([metric(preds[:, t], y, kind) for t in range(acts.shape[1])])


def check_transcripts(records: list[dict], budget: int) -> None:
    for r in records:
        a = r["actions"]
        if len(a) != budget or len(set(a)) != budget:
            raise ProtocolError(f"instance {r['id']}: expected {budget} distinct acquisitions")


# -- method training -------------------------------------------------------------------

def train_policy(method: str, bundle: DatasetBundle, budget: int, predictor: SharedPredictor,
                 seed: int, overrides: dict | None = None):
    """Train (or build) the named policy; returns an object with ``select``/``builtin``."""
    from .policies import aaco, greedy, rl, static

    o = dict(overrides or {})
    if method == "random":
        return RandomPolicy(seed)
    if method == "oracle":
        return LookaheadOracle(AFAContextSpec(**o.pop("spec", {})))
    if method == "eddi":
        mc = o.pop("mc_samples", 50)
        pvae = shared_pvae(bundle, 0, **o)
        return greedy.EddiPolicy(pvae, predictor, mc, seed)
    if method == "gdfs":
        o.setdefault("max_features", budget)
        model = greedy.train_gdfs(bundle, predictor, greedy.DiscriminativeConfig(**o), seed=seed)
        return greedy.GdfsPolicy(model)
    if method == "dime":
        o.setdefault("max_features", budget)
        model = greedy.train_dime(bundle, predictor, greedy.DimeConfig(**o), seed=seed)
        return greedy.DimePolicy(model)
    if method == "jafa":
        return rl.train_jafa(bundle, budget, rl.DqnConfig(**o), seed=seed)
    if method == "ol":
        return rl.train_ol(bundle, budget, rl.OlConfig(**o), seed=seed)
    if method in ("odin_mfrl", "odin_mbrl"):
        pvae_cfg = o.pop("pvae", {})
        mb = method == "odin_mbrl"
        pvae = shared_pvae(bundle, 0, **pvae_cfg) if mb else None
        return rl.train_odin(bundle, budget, predictor, rl.PpoConfig(**o), seed=seed,
                             model_based=mb, pvae=pvae)
    if method == "aaco":
        k = o.pop("k", 15)
        knn = aaco.KnnIndex(bundle.train.features, bundle.train.labels, min(k, bundle.train.n))
        return aaco.AacoPolicy(knn, predictor.predict_proba, budget, seed=seed, **o)
    if method == "pt_s":
        ranking = static.permutation_importance(predictor.predict_proba, bundle.val.features,
                                                bundle.val.labels, bundle.train.features,
                                                seed=seed, repeats=o.pop("repeats", 5))
        pol = static.StaticPolicy("pt_s", static.static_eval_order("pt_s", ranking, budget))
        pol.selection = ranking.to_json()
        return pol
    if method == "cae_s":
        b_max = o.pop("b_max", budget)
        sel = static.train_cae(bundle, b_max, static.CaeConfig(**o), seed=seed, budgets=[budget])
        pol = static.StaticPolicy("cae_s", static.static_eval_order("cae_s", sel, budget, seed),
                                  builtin=sel.proba(budget))
        pol.selection = sel.to_json()
        return pol
    raise ConfigError(f"unknown method {method!r}")


# -- cells and experiments ---------------------------------------------------------------

@dataclass
class CellResult:
    dataset: str
    method: str
    classifier_mode: str
    budget: int
    seed: int
    split: int
    curve: list[float]
    kind: str
    predictor_fingerprint: str
    dataset_fingerprint: str
    train_seconds: float
    eval_seconds: float
    transcripts: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


def cell_name(cfg: ExperimentConfig, seed: int, split: int) -> str:
    return f"{cfg.dataset}_{cfg.method}_{cfg.classifier_mode}_b{cfg.b}_s{seed}_k{split}"


def run_cell(cfg: ExperimentConfig, seed: int, split: int, workdir=None) -> CellResult:
    torch.manual_seed(seed)
    workdir = Path(workdir) if workdir is not None else None
    bundle = load_data(cfg, split)
    predictor = shared_predictor(bundle, workdir, **cfg.predictor_config)
    if predictor.manifest.get("dataset_fingerprint") != bundle.fingerprint():
        raise ConfigError("shared predictor does not match the dataset")
    b = cfg.b
    t0 = time.perf_counter()
    policy = train_policy(cfg.method, bundle, b, predictor, seed, cfg.method_config)
    t1 = time.perf_counter()
    clf = predictor.predict_proba
    if cfg.classifier_mode == "builtin":
        if getattr(policy, "builtin", None) is None:
            raise ConfigError(f"{cfg.method} produced no builtin classifier")
        clf = policy.builtin
    curve, records = rollout(policy, bundle.test.features, bundle.test.labels, b, clf,
                             cfg.metric_kind)
    t2 = time.perf_counter()
    check_transcripts(records, b)
    res = CellResult(cfg.dataset, cfg.method, cfg.classifier_mode, b, seed, split,
                     curve.tolist(), cfg.metric_kind, predictor.fingerprint, bundle.fingerprint(),
                     t1 - t0, t2 - t1)
    if workdir is not None:
        name = cell_name(cfg, seed, split)
        tdir = workdir / "transcripts"
        cdir = workdir / "cells"
        tdir.mkdir(parents=True, exist_ok=True)
        cdir.mkdir(parents=True, exist_ok=True)
        write_jsonl(tdir / f"{name}.jsonl", records)
        res.transcripts = str(tdir / f"{name}.jsonl")
        doc = dict(res.to_json(), config=cfg.to_json())
        if hasattr(policy, "selection"):
            doc["selection"] = policy.selection
        if getattr(policy, "history", None):
            doc["training_history"] = policy.history
        (cdir / f"{name}.json").write_text(json.dumps(doc, indent=1))
    # in-process callers may inspect these; they are dropped before pickling
    res._records = records
    res._policy = policy
    return res


def _run_cell_star(args):
    cfg, seed, split, workdir = args
    res = run_cell(cfg, seed, split, workdir)
    res.__dict__.pop("_records", None)
    res.__dict__.pop("_policy", None)
    return res


def run_experiment(cfg: ExperimentConfig, workdir=None, workers: int = 1
                   ) -> tuple[BudgetCurve, list[CellResult]]:
    """All seed x split cells for ``cfg``; returns the aggregated curve and the cells."""
    jobs = [(cfg, s, k, workdir) for s in cfg.seeds for k in cfg.splits]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell_star, jobs))
    else:
        cells = [run_cell(*j) for j in jobs]
    fps = {c.predictor_fingerprint for c in cells}
    log.info("%s/%s b=%d: %d cells, %d predictor(s)", cfg.dataset, cfg.method, cfg.b,
             len(cells), len(fps))
    curve = BudgetCurve.from_runs([c.curve for c in cells], cfg.metric_kind)
    if workdir is not None:
        write_timing_log(cells, Path(workdir) / "compute_time.csv", append=True)
    return curve, cells


# -- persistence ---------------------------------------------------------------------------

CSV_COLUMNS = [
    "dataset", "method", "classifier_mode", "budget", "step", "mean", "std", "n_runs", "metric",
]


def load_cells(workdir) -> list[dict]:
    cdir = Path(workdir) / "cells"
    return [json.loads(p.read_text()) for p in sorted(cdir.glob("*.json"))]


def aggregate(cells: list[dict]) -> dict[tuple, BudgetCurve]:
    groups: dict[tuple, list] = {}
    for c in cells:
        key = (c["dataset"], c["method"], c["classifier_mode"], int(c["budget"]))
        groups.setdefault(key, []).append(c)
    return {k: BudgetCurve.from_runs([c["curve"] for c in v], v[0]["kind"])
            for k, v in sorted(groups.items())}


def write_results_csv(workdir, out=None) -> Path:
    out = Path(out) if out else Path(workdir) / "results.csv"
    curves = aggregate(load_cells(workdir))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for (ds, method, mode, b), c in curves.items():
            for t in range(c.steps):
                w.writerow([ds, method, mode, b, t + 1, f"{c.mean[t]:.6f}", f"{c.std[t]:.6f}",
                            c.n_runs, c.kind])
    return out


def read_results_csv(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


def write_timing_log(cells, path: Path, append: bool = False) -> None:
    new = not path.exists() or not append
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["dataset", "method", "budget", "seed", "split", "train_seconds",
                        "eval_seconds"])
        for c in cells:
            w.writerow([c.dataset, c.method, c.budget, c.seed, c.split,
                        f"{c.train_seconds:.3f}", f"{c.eval_seconds:.3f}"])


def default_workdir() -> Path:
    return Path(os.environ.get("AFABENCH_WORKDIR", "afabench_runs"))
