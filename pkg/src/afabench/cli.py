"""Command line entry point: generate, pretrain, train, evaluate, plot, report.

Relative paths are taken relative to ``--workdir`` (or ``$AFABENCH_WORKDIR``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from pathlib import Path

from . import harness
from .datasets import CsvSchema, load_csv, make_dataset, write_bundle

log = logging.getLogger("afabench")


def _parse_sets(items) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _budget(text: str):
    return text if text in harness.BUDGET_NAMES else int(text)


def _path(workdir: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _schema_from_args(a) -> dict | None:
    if not a.csv:
        return None
    if a.label_column is None or a.num_classes is None:
        raise SystemExit("--csv needs --label-column and --num-classes")
    return {"label_column": a.label_column, "num_classes": a.num_classes,
            "name": a.name or Path(a.csv).stem, "metric": a.metric}


# -- commands --------------------------------------------------------------------------

def cmd_generate(a, workdir: Path) -> int:
    out = _path(workdir, a.out)
    if a.csv:
        schema = _schema_from_args(a)
        bundle = load_csv(_path(workdir, a.csv), CsvSchema(**schema), seed=a.seed)
    else:
        if a.dataset is None:
            raise SystemExit("give a dataset id (cube, afacontext) or --csv")
        try:
            bundle = make_dataset(a.dataset, seed=a.seed)
        except KeyError as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return 2
    manifest = write_bundle(bundle, out)
    print(manifest)
    return 0


def cmd_pretrain(a, workdir: Path) -> int:
    cfg = harness.ExperimentConfig(a.dataset, "random", csv_path=a.csv,
                                   schema=_schema_from_args(a))
    bundle = harness.load_data(cfg, a.split)
    pred = harness.shared_predictor(bundle, workdir)
    print(json.dumps({"dataset": bundle.name, "split": a.split,
                      "fingerprint": pred.fingerprint,
                      "best_epoch": pred.manifest.get("best_epoch")}))
    return 0


def _policy_modules(policy) -> dict:
    import torch

    found = {}
    for name, obj in vars(policy).items():
        if isinstance(obj, torch.nn.Module):
            found[name] = obj
        elif hasattr(obj, "__dict__") and not callable(obj):
            for sub, inner in vars(obj).items():
                if isinstance(inner, torch.nn.Module):
                    found[f"{name}.{sub}"] = inner
    return found


def cmd_train(a, workdir: Path) -> int:
    from .nnkit import save_weights

    cfg = harness.ExperimentConfig(a.dataset, a.method, a.budget, seeds=(a.seed,),
                                   splits=(a.split,), method_config=_parse_sets(a.set),
                                   csv_path=a.csv, schema=_schema_from_args(a))
    bundle = harness.load_data(cfg, a.split)
    pred = harness.shared_predictor(bundle, workdir)
    t0 = time.perf_counter()
    policy = harness.train_policy(a.method, bundle, cfg.b, pred, a.seed, cfg.method_config)
    secs = time.perf_counter() - t0
    name = harness.cell_name(cfg, a.seed, a.split)
    pdir = workdir / "policies"
    pdir.mkdir(parents=True, exist_ok=True)
    header = {"config": cfg.to_json(), "train_seconds": secs,
              "dataset_fingerprint": bundle.fingerprint(), "predictor": pred.fingerprint}
    for key, module in _policy_modules(policy).items():
        save_weights(pdir / f"{name}.{key}.json", module, header)
    summary = dict(header, history=getattr(policy, "history", None),
                   selection=getattr(policy, "selection", None))
    (pdir / f"{name}.json").write_text(json.dumps(summary, indent=1, default=str))
    print(pdir / f"{name}.json")
    return 0


def _configs_from_args(a) -> list[harness.ExperimentConfig]:
    overrides = {}
    if a.seeds is not None:
        overrides["seeds"] = a.seeds
    if a.splits is not None:
        overrides["splits"] = a.splits
    if a.classifier_mode is not None:
        overrides["classifier_mode"] = a.classifier_mode
    if a.budget is not None:
        overrides["budget"] = a.budget
    sets = _parse_sets(a.set)
    if a.config:
        cfgs = harness.load_config(_path(Path(a.workdir_resolved), a.config))
        out = []
        for c in cfgs:
            d = c.to_json()
            d.update(overrides)
            if sets:
                d["method_config"] = dict(d["method_config"], **sets)
            out.append(harness.ExperimentConfig.from_json(d))
        return out
    if not a.methods or not a.datasets:
        raise SystemExit("evaluate needs --config or both --methods and --datasets")
    out = []
    for ds in a.datasets.split(","):
        for m in a.methods.split(","):
            out.append(harness.ExperimentConfig(ds, m, method_config=dict(sets),
                                                csv_path=a.csv, schema=_schema_from_args(a),
                                                **overrides))
    return out


def cmd_evaluate(a, workdir: Path) -> int:
    a.workdir_resolved = str(workdir)
    try:
        cfgs = _configs_from_args(a)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    workdir.mkdir(parents=True, exist_ok=True)
    (workdir / "evaluate_manifest.json").write_text(json.dumps(
        {"experiments": [c.to_json() for c in cfgs], "workers": a.workers}, indent=1))
    jobs = [(c, s, k, str(workdir)) for c in cfgs for s in c.seeds for k in c.splits]
    failures = 0
    results = []
    if a.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(a.workers, len(jobs))) as pool:
            futs = {pool.submit(harness._run_cell_star, j): j for j in jobs}
            for f in as_completed(futs):
                try:
                    results.append(f.result())
                except Exception as exc:  # report and keep going
                    failures += 1
                    log.error("cell %s failed: %s", futs[f][:3], exc)
    else:
        for j in jobs:
            try:
                results.append(harness._run_cell_star(j))
            except Exception as exc:
                failures += 1
                log.error("cell %s failed: %s", j[:3], exc)
    if results:
        harness.write_timing_log(results, workdir / "compute_time.csv", append=True)
        print(harness.write_results_csv(workdir))
    print(f"{len(results)} cells ok, {failures} failed")
    return 0 if failures == 0 else 1


def cmd_plot(a, workdir: Path) -> int:
    from .plotting import PlotError, plot_results

    path = _path(workdir, a.results)
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return 2
    try:
        paths = plot_results(harness.read_results_csv(path), _path(workdir, a.out),
                             a.classifier_mode)
    except PlotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


def cmd_report(a, workdir: Path) -> int:
    from .report import build_report

    try:
        text = build_report(workdir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = _path(workdir, a.out)
    out.write_text(text)
    print(out)
    return 0


# -- parser ------------------------------------------------------------------------------

def _add_csv_flags(p):
    p.add_argument("--csv", help="pre-processed CSV instead of a synthetic dataset")
    p.add_argument("--label-column")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--name")
    p.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="afabench", description=__doc__)
    ap.add_argument("--workdir", default=None,
                    help="root for relative paths (default: $AFABENCH_WORKDIR or ./afabench_runs)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset's split CSVs and manifest")
    g.add_argument("dataset", nargs="?", help="cube or afacontext")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    _add_csv_flags(g)
    g.set_defaults(fn=cmd_generate)

    p = sub.add_parser("pretrain", help="train (or reuse) the shared predictor")
    p.add_argument("dataset")
    p.add_argument("--split", type=int, default=0)
    _add_csv_flags(p)
    p.set_defaults(fn=cmd_pretrain)

    t = sub.add_parser("train", help="train one policy and store its weights")
    t.add_argument("method", choices=harness.METHODS)
    t.add_argument("dataset")
    t.add_argument("--budget", type=_budget, default="medium")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--split", type=int, default=0)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a field of the method's training config")
    _add_csv_flags(t)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("evaluate", help="run seed x split cells and write results.csv")
    e.add_argument("--config", help="JSON experiment config (flags override it)")
    e.add_argument("--methods", help="comma-separated method ids")
    e.add_argument("--datasets", help="comma-separated dataset ids")
    e.add_argument("--budget", type=_budget)
    e.add_argument("--seeds", type=_ints)
    e.add_argument("--splits", type=_ints)
    e.add_argument("--classifier-mode", choices=("shared", "builtin"))
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    _add_csv_flags(e)
    e.set_defaults(fn=cmd_evaluate)

    pl = sub.add_parser("plot", help="SVG budget curves from results.csv")
    pl.add_argument("--results", default="results.csv")
    pl.add_argument("--out", default="plots")
    pl.add_argument("--classifier-mode", choices=("shared", "builtin"))
    pl.set_defaults(fn=cmd_plot)

    r = sub.add_parser("report", help="markdown tables of terminal metrics and compute time")
    r.add_argument("--out", default="report.md")
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workdir = Path(a.workdir) if a.workdir else harness.default_workdir()
    return a.fn(a, workdir)


if __name__ == "__main__":
    sys.exit(main())
