"""
Unit tests for the command-line interface.
"""
import io
import json
import shlex
import sys
from pathlib import Path

import numpy as np
import pytest

from app.bridge import decode_probabilities
from app.core import load_dataset
from app.main import main
from app.model import load_model
from app.report import REPORT_KEYS, write_json

ROOT = Path(__file__).resolve().parent.parent


def _generate(directory, *extra):
    argv = ["generate", "--kind", "blobs", "--n", "30", "--d", "4", "--seed", "3", "--out", str(directory)]
    return main(argv + list(extra))


@pytest.fixture
def workspace(tmp_path, capsys):
    scenario = tmp_path / "scenario"
    assert _generate(scenario, "--corruption", "brightness", "--b", "1.5") == 0
    model = tmp_path / "model.json"
    assert main(["train", "--data", str(scenario / "source.csv"), "--model", "logreg", "--epochs", "10",
                 "--out", str(model)]) == 0
    capsys.readouterr()
    return tmp_path, scenario, model


class TestGenerate:
    """Test the generate command."""

    def test_null_shift(self, tmp_path):
        """Test --b 0 writes a target equal to the source."""
        assert _generate(tmp_path, "--corruption", "brightness", "--b", "0.0") == 0
        source, target = load_dataset(tmp_path / "source.csv"), load_dataset(tmp_path / "target.csv")
        assert (source.features == target.features).all()

    def test_deterministic_files(self, tmp_path):
        """Test the same flags write byte-identical files."""
        assert _generate(tmp_path / "a", "--corruption", "impulse") == 0
        assert _generate(tmp_path / "b", "--corruption", "impulse") == 0
        for name in ("source.csv", "target.csv", "pre_shift.csv", "scenario.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_missing_kind(self, tmp_path, capsys):
        """Test a missing required flag exits with status 2."""
        with pytest.raises(SystemExit) as excinfo:
            main(["generate", "--out", str(tmp_path)])
        assert excinfo.value.code == 2
        assert "--kind" in capsys.readouterr().err


class TestTrain:
    """Test the train command."""

    def test_reports_history(self, tmp_path, capsys):
        """Test separable blobs reach high training accuracy."""
        _generate(tmp_path, "--corruption", "brightness")
        capsys.readouterr()
        assert main(["train", "--data", str(tmp_path / "source.csv"), "--model", "logreg",
                     "--out", str(tmp_path / "model.json")]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["kind"] == "logistic_regression"
        assert payload["train_accuracy"] >= 0.99

    def test_bad_path(self, tmp_path):
        """Test a missing data file exits with status 1."""
        assert main(["train", "--data", str(tmp_path / "absent.csv"), "--model", "logreg",
                     "--out", str(tmp_path / "model.json")]) == 1

    def test_unlabeled_data(self, tmp_path):
        """Test unlabeled data exits with status 1."""
        path = tmp_path / "rows.csv"
        path.write_text("x0,x1\n1,2\n3,4\n")
        assert main(["train", "--data", str(path), "--model", "logreg", "--label-column", "y",
                     "--out", str(tmp_path / "model.json")]) == 1


class TestMonitorAndEvaluate:
    """Test monitor, evaluate and roars end to end."""

    def _monitor(self, tmp_path, scenario, model, out, *extra):
        return main(["monitor", "--model", str(model), "--source", str(scenario / "source.csv"),
                     "--target", str(scenario / "target.csv"), "--out", str(out), "--seed", "1"] + list(extra))

    def test_report_schema(self, workspace):
        """Test the report carries every section."""
        tmp_path, scenario, model = workspace
        out = tmp_path / "report.json"
        assert self._monitor(tmp_path, scenario, model, out, "--attributions-csv", str(tmp_path / "phi.csv")) == 0
        report = json.loads(out.read_text())
        assert report["version"] == "1"
        assert len(report["instances"]) == 30
        assert report["instances"][0]["attribution"]["method"] == "xpe"
        assert "estimated_target_loss" in report["performance"]
        assert len(report["drift"]["mask"]) == 4
        assert (tmp_path / "phi.csv").exists()

    def test_threads_give_identical_reports(self, workspace):
        """Test one and eight workers write byte-identical reports."""
        tmp_path, scenario, model = workspace
        assert self._monitor(tmp_path, scenario, model, tmp_path / "r1.json", "--threads", "1") == 0
        assert self._monitor(tmp_path, scenario, model, tmp_path / "r8.json", "--threads", "8") == 0
        assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r8.json").read_bytes()

    def test_identity_monitor(self, workspace):
        """Test monitoring the source against itself."""
        tmp_path, scenario, model = workspace
        out = tmp_path / "identity.json"
        assert main(["monitor", "--model", str(model), "--source", str(scenario / "source.csv"),
                     "--target", str(scenario / "source.csv"), "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        performance = report["performance"]
        assert performance["estimated_target_loss"] == pytest.approx(performance["source_loss"], abs=1e-9)
        assert all(v == 0.0 for item in report["instances"] for v in item["attribution"]["values"])

    def test_heatmaps(self, workspace):
        """Test per-instance PGM files for a 2x2 grid."""
        tmp_path, scenario, model = workspace
        heatmaps = tmp_path / "heatmaps"
        assert self._monitor(tmp_path, scenario, model, tmp_path / "report.json", "--method", "axs",
                             "--heatmap-dir", str(heatmaps)) == 0
        assert len(list(heatmaps.glob("instance_*.pgm"))) == 30

    def test_coupling_plan_file(self, workspace, capsys):
        """Test an external plan is read and a malformed one exits with status 1."""
        tmp_path, scenario, model = workspace
        plan = tmp_path / "plan.csv"
        np.savetxt(plan, np.eye(30) / 30.0, delimiter=",")
        assert self._monitor(tmp_path, scenario, model, tmp_path / "report.json", "--method", "coupling",
                             "--plan", str(plan)) == 0
        capsys.readouterr()

        plan.write_text("0.5,abc\n0.5,0.5\n")
        assert self._monitor(tmp_path, scenario, model, tmp_path / "bad.json", "--method", "coupling",
                             "--plan", str(plan)) == 1
        assert "Malformed coupling plan" in capsys.readouterr().err

    def test_evaluate(self, workspace, capsys):
        """Test metrics are appended to the report."""
        tmp_path, scenario, model = workspace
        report = tmp_path / "report.json"
        assert self._monitor(tmp_path, scenario, model, report) == 0
        capsys.readouterr()
        assert main(["evaluate", "--report", str(report), "--scenario", str(scenario), "--model", str(model),
                     "--metrics", "sfaith,cpx,ratio", "--designated", "0,1,2,3"]) == 0
        metrics = json.loads(report.read_text())["metrics"]
        assert metrics["group_ratio"] == pytest.approx(1.0)
        assert "mean" in metrics["complexity"]
        assert "per_instance" in metrics["s_faith"]
        assert json.loads(capsys.readouterr().out)["metrics"] == metrics

    def test_evaluate_needs_pre_shift(self, workspace):
        """Test S-Faith without ground truth exits with status 1."""
        tmp_path, scenario, model = workspace
        report = tmp_path / "report.json"
        assert self._monitor(tmp_path, scenario, model, report) == 0
        (scenario / "pre_shift.csv").unlink()
        assert main(["evaluate", "--report", str(report), "--scenario", str(scenario), "--model", str(model),
                     "--metrics", "sfaith"]) == 1

    def test_roars_null_shift(self, tmp_path, capsys):
        """Test ROAR-S on an unshifted scenario exits with status 1."""
        _generate(tmp_path, "--corruption", "brightness", "--b", "0.0")
        assert main(["roars", "--scenario", str(tmp_path), "--method", "random", "--model-kind", "logreg",
                     "--epochs", "5"]) == 1
        assert "no measurable effect" in capsys.readouterr().err


class TestMoreCommands:
    """Test the remaining CLI examples."""

    def test_zero_epochs(self, tmp_path, capsys):
        """Test --epochs 0 saves the initialization."""
        _generate(tmp_path, "--corruption", "brightness")
        capsys.readouterr()
        out = tmp_path / "model.json"
        assert main(["train", "--data", str(tmp_path / "source.csv"), "--model", "logreg", "--epochs", "0",
                     "--out", str(out)]) == 0
        assert json.loads(capsys.readouterr().out)["epochs_run"] == 0
        assert load_model(out).predict_proba(np.ones(4)).tolist() == [0.5, 0.5]

    def test_complexity_of_one_hot_report(self, tmp_path, capsys):
        """Test cpx on a one-hot attribution report is 0."""
        _generate(tmp_path / "scenario", "--corruption", "brightness")
        report = {key: {} for key in REPORT_KEYS}
        report.update(version="1", seed=0, warnings=[], instances=[{"index": 0, "estimated_label": 0, "attribution": {
            "method": "xpe", "players": "features", "values": [0.0, 1.0, 0.0, 0.0], "v_empty": 0.0, "v_full": 1.0}}])
        path = write_json(report, tmp_path / "report.json")
        capsys.readouterr()
        assert main(["evaluate", "--report", str(path), "--scenario", str(tmp_path / "scenario"),
                     "--metrics", "cpx"]) == 0
        assert json.loads(capsys.readouterr().out)["metrics"]["complexity"]["mean"] == 0.0

    def test_unknown_metric(self, workspace):
        """Test unknown metric names exit with status 1."""
        tmp_path, scenario, model = workspace
        report = tmp_path / "report.json"
        assert main(["monitor", "--model", str(model), "--source", str(scenario / "source.csv"),
                     "--target", str(scenario / "target.csv"), "--out", str(report)]) == 0
        assert main(["evaluate", "--report", str(report), "--scenario", str(scenario), "--metrics", "auc"]) == 1

    def test_roars_is_deterministic(self, tmp_path, capsys):
        """Test a fixed seed repeats the same ROAR-S JSON."""
        _generate(tmp_path, "--corruption", "brightness", "--b", "4.0")
        argv = ["roars", "--scenario", str(tmp_path), "--method", "random", "--model-kind", "logreg",
                "--epochs", "5", "--seed", "2"]
        capsys.readouterr()
        assert main(argv) == 0
        first = capsys.readouterr().out
        assert main(argv) == 0
        assert capsys.readouterr().out == first
        assert set(json.loads(first)) == {"roar_s", "L_s", "L_t", "L_s_tilde", "L_t_tilde"}

    def test_predict_from_stdin(self, workspace, monkeypatch, capsys):
        """Test the batch predict protocol writes one probability row per input."""
        tmp_path, scenario, model = workspace
        monkeypatch.setattr(sys, "stdin", io.StringIO("0,0,0,0\n\n1,2,3,4\n"))
        assert main(["predict", "--model", str(model)]) == 0
        proba = decode_probabilities(capsys.readouterr().out, 2)
        expected = load_model(model).predict_proba(np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0]]))
        assert np.array_equal(proba, expected)

    def test_predict_malformed_row(self, workspace, monkeypatch):
        """Test non-numeric input exits with status 1."""
        tmp_path, scenario, model = workspace
        monkeypatch.setattr(sys, "stdin", io.StringIO("1,x,3,4\n"))
        assert main(["predict", "--model", str(model)]) == 1

    def test_model_command_matches_built_in(self, tmp_path, capsys):
        """Test monitoring through the bridge reproduces the built-in model."""
        scenario = tmp_path / "scenario"
        main(["generate", "--kind", "blobs", "--n", "8", "--d", "3", "--out", str(scenario), "--b", "1.0"])
        model = tmp_path / "model.json"
        main(["train", "--data", str(scenario / "source.csv"), "--model", "logreg", "--epochs", "5",
              "--out", str(model)])
        code = (f"import sys; sys.path.insert(0, {str(ROOT)!r}); from app.main import main; "
                f"sys.exit(main(['predict', '--model', {str(model)!r}, '--log-level', 'ERROR']))")
        command = f"{shlex.quote(sys.executable)} -c {shlex.quote(code)}"
        paths = [scenario / "source.csv", scenario / "target.csv"]
        common = ["--source", str(paths[0]), "--target", str(paths[1]), "--threads", "1"]
        assert main(["monitor", "--model", str(model), "--out", str(tmp_path / "a.json")] + common) == 0
        assert main(["monitor", "--model-cmd", command, "--out", str(tmp_path / "b.json")] + common) == 0
        a, b = (json.loads((tmp_path / name).read_text()) for name in ("a.json", "b.json"))
        assert b["performance"] == pytest.approx(a["performance"], abs=1e-12)
        for x, y in zip(a["instances"], b["instances"]):
            assert y["attribution"]["values"] == pytest.approx(x["attribution"]["values"], abs=1e-12)
