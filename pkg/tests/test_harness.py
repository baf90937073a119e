import json

import numpy as np
import pytest

from afabench import harness
from afabench.datasets import AFAContextSpec, make_dataset, sample_afacontext
from afabench.harness import (
    BudgetCurve,
    ConfigError,
    ExperimentConfig,
    LookaheadOracle,
    ProtocolError,
    check_transcripts,
    curve_from_transcripts,
    metric,
    oracle_afacontext,
    replay_curve,
    resplit,
    rollout,
    run_cell,
)
from afabench.policies.base import RandomPolicy


def test_metric_examples():
    assert metric([1, 0, 1, 1], [1, 0, 0, 1]) == 0.75
    assert metric([1, 0, 1, 1], [1, 0, 0, 1], "f1") == pytest.approx((0.8 + 2 / 3) / 2)
    assert metric([2, 2], [2, 2]) == 1.0
    assert metric([1], [1], "f1") == 1.0


def test_metric_errors():
    with pytest.raises(ValueError):
        metric([], [])
    with pytest.raises(ValueError):
        metric([1, 2], [1])
    with pytest.raises(ValueError):
        metric([1], [1], "auc")


def test_budget_presets():
    assert harness.BUDGET_PRESETS["afacontext"] == (3, 5, 10)
    assert harness.BUDGET_PRESETS["mnist"] == (10, 20, 30)
    assert ExperimentConfig("cube", "random", "large").b == 10
    assert ExperimentConfig("physionet", "random", 5).metric_kind == "f1"


@pytest.mark.parametrize("kwargs", [
    dict(dataset="cube", method="nope"),
    dict(dataset="cube", method="random", classifier_mode="builtin"),
    dict(dataset="cube", method="oracle"),
    dict(dataset="cube", method="random", seeds=()),
    dict(dataset="cube", method="random", classifier_mode="other"),
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs)


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig("cube", "gdfs", 3, method_config={"max_epochs": 2})
    (tmp_path / "c.json").write_text(json.dumps([cfg.to_json()]))
    assert harness.load_config(tmp_path / "c.json")[0] == cfg
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(dict(cfg.to_json(), bogus=1))


def test_budget_curve_checks():
    c = BudgetCurve.from_runs([[0.1, 0.2], [0.3, 0.4]])
    np.testing.assert_allclose(c.mean, [0.2, 0.3])
    np.testing.assert_allclose(c.std, [np.sqrt(0.02)] * 2)
    with pytest.raises(ValueError):
        BudgetCurve([0.1], [-1.0])


def test_resplit_keeps_sizes_and_rows(cube):
    b = resplit(cube, 2)
    assert (b.train.n, b.val.n, b.test.n) == (700, 150, 150)
    pooled = lambda x: np.sort(np.concatenate([x.train.labels, x.val.labels, x.test.labels]))
    np.testing.assert_array_equal(pooled(b), pooled(cube))
    assert resplit(cube, 0) is cube and b.fingerprint() != cube.fingerprint()


def test_oracle_first_action_is_context():
    assert oracle_afacontext(np.zeros(30), np.zeros(30)) == 0


def test_oracle_confined_after_context():
    spec = AFAContextSpec()
    x, y, c = sample_afacontext(200, spec, np.random.default_rng(0))
    oracle = LookaheadOracle(spec)
    mask = np.zeros_like(x)
    for _ in range(6):
        a = oracle.select(x * mask, mask)
        mask[np.arange(len(x)), a] = 1
    for row, ctx, m in zip(x, c, mask):
        active = set(spec.group_a if ctx == 0 else spec.group_b)
        acquired = set(np.flatnonzero(m))
        assert acquired <= active | {0, 1}
        assert 0 in acquired


def test_oracle_rejects_other_datasets():
    with pytest.raises(ConfigError):
        oracle_afacontext(np.zeros(30), np.zeros(30), dataset="cube")


def test_oracle_information_is_exact_for_known_case():
    oracle = LookaheadOracle()
    post = np.full(8, 1 / 8)
    # position 0 is informative only for class 0 (mean 0 vs 0.5 noise elsewhere)
    assert oracle.information(post, 0) > 0
    assert oracle.information(np.eye(8)[3], 0) == pytest.approx(0.0, abs=1e-6)


class Repeater:
    name = "bad"
    builtin = None

    def select(self, values, mask):
        return np.zeros(len(mask), dtype=int)


def test_rollout_rejects_repeats():
    with pytest.raises(ProtocolError):
        rollout(Repeater(), np.zeros((3, 4)), [0, 1, 0], 2, lambda v, m: np.ones((len(v), 2)))


def test_rollout_and_replay(cube, cube_predictor):
    x, y = cube.test.features, cube.test.labels
    curve, recs = rollout(RandomPolicy(0), x, y, 5, cube_predictor)
    check_transcripts(recs, 5)
    np.testing.assert_array_equal(curve, curve_from_transcripts(recs))
    np.testing.assert_array_equal(curve, replay_curve(recs, x, cube_predictor))


def test_check_transcripts_catches_short_episode():
    with pytest.raises(ProtocolError):
        check_transcripts([{"id": 0, "actions": [1, 1]}], 2)


def test_random_cube_curve(cube, cube_predictor):
    x, y = cube.test.features, cube.test.labels
    curves = np.array([rollout(RandomPolicy(s), x, y, 10, cube_predictor)[0] for s in range(5)])
    mean = curves.mean(0)
    full = metric(cube_predictor(x, np.ones_like(x)).argmax(1), y)
    assert mean[-1] > mean[0]
    assert np.all(np.diff(mean) > -0.03)
    assert mean[-1] <= full + 0.02


def test_run_cell_is_deterministic(tmp_path):
    cfg = ExperimentConfig("cube", "pt_s", 3, seeds=(0,), splits=(1,))
    a = run_cell(cfg, 0, 1, tmp_path)
    b = run_cell(cfg, 0, 1, tmp_path)
    assert a.curve == b.curve
    assert (tmp_path / "cells" / f"{harness.cell_name(cfg, 0, 1)}.json").exists()
    assert list((tmp_path / "predictors").glob("*.json"))
    out = harness.write_results_csv(tmp_path)
    rows = harness.read_results_csv(out)
    assert [r["step"] for r in rows] == ["1", "2", "3"]
    assert set(rows[0]) == set(harness.CSV_COLUMNS)


def test_builtin_mode_needs_builtin(tmp_path):
    cfg = ExperimentConfig("cube", "cae_s", 2, classifier_mode="builtin", seeds=(0,), splits=(0,),
                           method_config={"epochs": 5, "predictor_epochs": 3})
    res = run_cell(cfg, 0, 0, tmp_path)
    assert len(res.curve) == 2


def test_physionet_schema_uses_f1(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["a,b,death"] + [f"{rng.normal()},{rng.normal()},{int(rng.random() < 0.2)}"
                            for _ in range(60)]
    (tmp_path / "p.csv").write_text("\n".join(rows) + "\n")
    cfg = ExperimentConfig("physionet", "random", 2, seeds=(0,), splits=(0,),
                           csv_path=str(tmp_path / "p.csv"),
                           schema={"label_column": "death", "num_classes": 2, "name": "physionet"},
                           predictor_config={"hidden": [8]})
    assert cfg.metric_kind == "f1"
    assert run_cell(cfg, 0, 0).kind == "f1"
