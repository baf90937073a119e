import json
import re
import subprocess
import sys

import pytest

from afabench import cli
from afabench.plotting import PlotError, curves_svg, plot_results
from afabench.report import MISSING, terminal_table


def run(tmp_path, *args):
    return cli.main(["--workdir", str(tmp_path), *args])


def test_generate_is_deterministic(tmp_path, capsys):
    assert run(tmp_path, "generate", "cube", "--seed", "3", "--out", "a") == 0
    assert run(tmp_path, "generate", "cube", "--seed", "3", "--out", "b") == 0
    for part in ("train", "val", "test"):
        assert (tmp_path / "a" / f"cube_{part}.csv").read_bytes() == \
            (tmp_path / "b" / f"cube_{part}.csv").read_bytes()
    man = json.loads((tmp_path / "a" / "cube_manifest.json").read_text())
    assert man["sizes"] == {"train": 700, "val": 150, "test": 150}


def test_generate_unknown_dataset(tmp_path, capsys):
    assert run(tmp_path, "generate", "imagenet") == 2
    assert "unknown dataset" in capsys.readouterr().err
    assert not (tmp_path / "data").exists()


def test_evaluate_plot_report(tmp_path, capsys):
    code = run(tmp_path, "evaluate", "--methods", "random,pt_s", "--datasets", "cube",
               "--budget", "3", "--seeds", "0,1", "--splits", "0", "--workers", "1")
    assert code == 0
    manifest = json.loads((tmp_path / "evaluate_manifest.json").read_text())
    assert [e["method"] for e in manifest["experiments"]] == ["random", "pt_s"]
    assert manifest["experiments"][0]["seeds"] == [0, 1]
    assert (tmp_path / "results.csv").exists()
    assert run(tmp_path, "plot") == 0
    svg = (tmp_path / "plots" / "cube_b3_shared.svg").read_text()
    assert len(re.findall(r"<polyline", svg)) == 2
    assert run(tmp_path, "report") == 0
    text = (tmp_path / "report.md").read_text()
    assert "pt_s" in text and "random" in text and "Compute time" in text


def test_evaluate_config_with_flag_override(tmp_path):
    cfg = {"dataset": "cube", "method": "random", "budget": 5, "seeds": [0, 1, 2], "splits": [0]}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run(tmp_path, "evaluate", "--config", "c.json", "--seeds", "4",
               "--workers", "1") == 0
    man = json.loads((tmp_path / "evaluate_manifest.json").read_text())
    assert man["experiments"][0]["seeds"] == [4]
    assert man["experiments"][0]["budget"] == 5


def test_evaluate_failing_cell_exits_nonzero(tmp_path):
    code = run(tmp_path, "evaluate", "--methods", "random", "--datasets", "cube", "--budget", "25",
               "--seeds", "0", "--splits", "0", "--workers", "1")
    assert code == 1


def test_evaluate_bad_method(tmp_path, capsys):
    assert run(tmp_path, "evaluate", "--methods", "nope", "--datasets", "cube") == 2


def test_train_writes_weights(tmp_path):
    assert run(tmp_path, "train", "cae_s", "cube", "--budget", "2", "--set", "epochs=3",
               "--set", "predictor_epochs=2") == 0
    files = list((tmp_path / "policies").glob("*.json"))
    assert any("builtin" not in f.name for f in files)


def test_plot_missing_results(tmp_path, capsys):
    assert run(tmp_path, "plot", "--results", "none.csv") == 2


def test_report_without_cells(tmp_path):
    assert run(tmp_path, "report") == 2


def test_help_lists_commands():
    out = subprocess.run([sys.executable, "-m", "afabench", "--help"], capture_output=True,
                         text=True, check=True).stdout
    for cmd in ("generate", "pretrain", "train", "evaluate", "plot", "report"):
        assert cmd in out


def test_curves_svg_one_polyline_per_method():
    svg = curves_svg({"a": ([0.1, 0.2], [0.0, 0.01]), "b": ([0.3, 0.4], [0.02, 0.0])})
    assert svg.count("<polyline") == 2 and svg.count('class="errorbar"') == 2
    assert 'data-method="a"' in svg


def test_plot_errors(tmp_path):
    with pytest.raises(PlotError):
        plot_results([], tmp_path)
    with pytest.raises(PlotError):
        plot_results([{"dataset": "x"}], tmp_path)


def test_f1_label_for_physionet(tmp_path):
    rows = [{"dataset": "physionet", "method": "m", "classifier_mode": "shared", "budget": "2",
             "step": str(t), "mean": "0.5", "std": "0.1", "metric": "f1"} for t in (1, 2)]
    path = plot_results(rows, tmp_path)[0]
    assert ">F1<" in path.read_text()


def test_terminal_table_marks_missing_cells():
    cells = [
        {"dataset": "cube", "method": "a", "classifier_mode": "shared", "budget": 3,
         "curve": [0.1, 0.2, 0.3], "kind": "accuracy"},
        {"dataset": "afacontext", "method": "b", "classifier_mode": "shared", "budget": 3,
         "curve": [0.1, 0.2, 0.4], "kind": "accuracy"},
    ]
    table = terminal_table(cells)
    assert MISSING in table and "0.300" in table
