import json

import pandas as pd
import pytest

from abstraction import load_abstraction, save_abstraction
from rescot import main

LINE = {
    "name": "line",
    "system": {"dynamics": "integrator", "tau": 1.0, "w_normal": [[-0.1], [0.1]], "d": 1.1},
    "grid": {"lo": [0.0], "hi": [6.0], "eta": [1.0], "inputs": [[-1.0], [0.0], [1.0]]},
    "spec": {"default_color": 1, "regions": [{"color": 2, "boxes": [[[1.0], [5.0]]]}]},
    "run": {"x0": [2.5], "horizon": 8, "probes": {"middle": [2.5]}},
}


def read(path):
    with open(path, "rb") as f:
        return f.read()


@pytest.fixture
def g1_dump(g1, tmp_path):
    path = str(tmp_path / "g1.joblib")
    save_abstraction(g1, path)
    return path


@pytest.fixture
def line_run(tmp_path):
    """Abstraction and classification of the unit-cell line, written to tmp_path."""
    config = tmp_path / "line.json"
    config.write_text(json.dumps(LINE, indent=2))
    abstraction = str(tmp_path / "abstraction.joblib")
    out = str(tmp_path / "classified")
    assert main(["abstract", "--config", str(config), "--out", abstraction]) == 0
    assert main(["classify", "--abstraction", abstraction, "--out", out]) == 0
    return {"config": str(config), "abstraction": abstraction, "controller": f"{out}/controller.json",
            "out": out}


class TestClassifyCommand:
    def test_writes_resilience_csv(self, g1_dump, tmp_path):
        out = tmp_path / "results"
        assert main(["classify", "--abstraction", g1_dump, "--out", str(out)]) == 0
        assert read(out / "resilience.csv") == b"state_id,value\n0,1\n1,1\n2,0\n"
        assert (out / "controller.json").exists()
        assert (out / "histogram.csv").exists()

    def test_compare_modes(self, g1_dump, tmp_path, capsys):
        out = tmp_path / "results"
        assert main(["classify", "--abstraction", g1_dump, "--out", str(out), "--compare-modes"]) == 0
        report = pd.read_csv(out / "divergence.csv")
        assert report["differs"].sum() == 2
        assert (out / "value_changes.csv").exists()
        assert "disagree: 2" in capsys.readouterr().out

    def test_missing_abstraction(self, tmp_path, capsys):
        assert main(["classify", "--abstraction", str(tmp_path / "none.joblib")]) == 4
        assert capsys.readouterr().err.startswith("error:")

    def test_byte_identical_reruns(self, g1_dump, tmp_path):
        for run in ("a", "b"):
            main(["classify", "--abstraction", g1_dump, "--out", str(tmp_path / run), "--compare-modes"])
        for name in ("resilience.csv", "histogram.csv", "controller.json", "divergence.csv"):
            assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)


class TestVerifyCommand:
    def test_cell_rows(self, g1_dump, tmp_path):
        out = str(tmp_path / "classified")
        main(["classify", "--abstraction", g1_dump, "--out", out])
        report_path = str(tmp_path / "verify.csv")
        assert main(["verify", "--abstraction", g1_dump, "--controller", f"{out}/controller.json",
                     "--cell", "0", "--out", report_path]) == 0
        report = pd.read_csv(report_path, dtype={"value": str, "k": str})
        assert report["k"].tolist() == ["1", "2"]
        assert report["passed"].tolist() == [1, 0]

    def test_explicit_budget(self, g1_dump, tmp_path):
        out = str(tmp_path / "classified")
        main(["classify", "--abstraction", g1_dump, "--out", out])
        report_path = str(tmp_path / "verify.csv")
        assert main(["verify", "--abstraction", g1_dump, "--controller", f"{out}/controller.json",
                     "--cell", "2", "--k", "omega", "--out", report_path]) == 0
        assert pd.read_csv(report_path)["passed"].tolist() == [0]

    def test_unknown_cell(self, g1_dump, tmp_path):
        out = str(tmp_path / "classified")
        main(["classify", "--abstraction", g1_dump, "--out", out])
        assert main(["verify", "--abstraction", g1_dump, "--controller", f"{out}/controller.json",
                     "--cell", "99"]) == 4

    def test_configured_probes(self, line_run, tmp_path):
        report_path = str(tmp_path / "verify.csv")
        assert main(["verify", "--config", line_run["config"], "--abstraction", line_run["abstraction"],
                     "--controller", line_run["controller"], "--out", report_path]) == 0
        report = pd.read_csv(report_path, dtype={"value": str, "k": str})
        assert report["probe"].tolist() == ["middle", "middle"]
        assert report["state_id"].tolist() == [2, 2]
        assert report["passed"].tolist() == [1, 0]

    def test_controller_for_another_abstraction(self, line_run, g1_dump):
        assert main(["verify", "--abstraction", g1_dump, "--controller", line_run["controller"],
                     "--cell", "0"]) == 4


class TestConfigErrors:
    def test_malformed_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text('{\n  "name": "bad",\n  "system": [\n')
        assert main(["abstract", "--config", str(path)]) == 2
        assert "bad.json:" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path):
        assert main(["abstract", "--config", str(tmp_path / "nope.json")]) == 4

    def test_abstract_needs_a_config(self):
        assert main(["abstract"]) == 2


class TestLineWorkflow:
    def test_classify_outputs(self, line_run):
        frame = pd.read_csv(f"{line_run['out']}/resilience.csv", dtype={"value": str})
        assert frame["value"].tolist() == ["0", "1", "1", "1", "1", "0", "0"]
        cells = pd.read_csv(f"{line_run['out']}/resilience_cells.csv")
        assert list(cells.columns) == ["state_id", "c0", "value"]

    def test_simulate(self, line_run, tmp_path, capsys):
        out = str(tmp_path / "trace.csv")
        assert main(["simulate", "--config", line_run["config"], "--abstraction", line_run["abstraction"],
                     "--controller", line_run["controller"], "--out", out, "--spike", "2:1.0"]) == 0
        trace = pd.read_csv(out)
        assert len(trace) == 8
        assert trace["spike"].tolist()[2] == 1
        assert "verdict: satisfied" in capsys.readouterr().out

    def test_start_outside_domain(self, line_run):
        assert main(["simulate", "--config", line_run["config"], "--abstraction", line_run["abstraction"],
                     "--controller", line_run["controller"], "--x0", "0.5"]) == 3

    def test_zero_horizon_writes_a_header(self, line_run, tmp_path):
        out = tmp_path / "trace.csv"
        assert main(["simulate", "--config", line_run["config"], "--abstraction", line_run["abstraction"],
                     "--controller", line_run["controller"], "--horizon", "0", "--out", str(out)]) == 0
        assert read(out) == b"step,x0,u0,w0,cell_id,spike,verdict\n"

    def test_spike_inside_the_normal_box_is_a_config_error(self, line_run):
        assert main(["simulate", "--config", line_run["config"], "--abstraction", line_run["abstraction"],
                     "--controller", line_run["controller"], "--spike", "1:0.05"]) == 2

    def test_random_nominal_is_reproducible(self, line_run, tmp_path):
        for run in ("a", "b"):
            main(["simulate", "--config", line_run["config"], "--abstraction", line_run["abstraction"],
                  "--controller", line_run["controller"], "--nominal", "random", "--seed", "4",
                  "--out", str(tmp_path / f"{run}.csv")])
        assert read(tmp_path / "a.csv") == read(tmp_path / "b.csv")

    def test_nominal_magnitude_has_no_disturbance_edges(self, tmp_path):
        config = tmp_path / "line.json"
        config.write_text(json.dumps(LINE, indent=2))
        out = str(tmp_path / "abstraction.joblib")
        assert main(["abstract", "--config", str(config), "--d", "0.1", "--out", out]) == 0
        assert load_abstraction(out).edge_counts()["dist"] == 0


class TestScenarioCommand:
    def test_dump_config(self, capsys):
        assert main(["scenario", "reach_avoid_two_passages", "--dump-config", "--d", "1.0"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["name"] == "reach_avoid_two_passages"
        assert doc["system"]["d"] == 1.0

    def test_unknown_scenario(self):
        assert main(["scenario", "three_targets"]) == 4

    def test_needs_a_name(self):
        assert main(["scenario"]) == 2

    def test_runs_a_config_file(self, tmp_path):
        config = tmp_path / "line.json"
        config.write_text(json.dumps(LINE, indent=2))
        out = tmp_path / "run"
        assert main(["scenario", "--config", str(config), "--out", str(out), "--frr-samples", "500"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["frr"] == {"samples": 500, "violations": 0}
        assert summary["probes"]["middle"] == {"cell": 2, "value": "1"}
        assert summary["trace"]["verdict"] == "satisfied"
        assert summary["histogram"] == {"0": 3, "1": 4}
        for name in ("abstraction.joblib", "resilience.csv", "controller.json", "verify.csv", "trace.csv"):
            assert (out / name).exists()

    def test_writes_the_spike_free_baseline(self, tmp_path):
        config = tmp_path / "line.json"
        config.write_text(json.dumps(LINE, indent=2))
        out = tmp_path / "run"
        assert main(["scenario", "--config", str(config), "--out", str(out), "--frr-samples", "0"]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["baseline"]["winning_states"] == 4
        assert summary["baseline"]["trace"]["verdict"] == "satisfied"
        assert summary["baseline"]["trace"]["cells"][0] == summary["trace"]["cells"][0] == 2
        baseline = json.loads((out / "baseline.json").read_text())
        assert baseline["labels"] == ["level-1"]
        assert baseline["rule"] == "spike-free/1"
        assert (out / "trace_baseline.csv").exists()
