# tests/test_main.py
import json
import logging

import pandas as pd
import pytest

from app.config import PRESETS
from app.main import build_parser, main


def _restore(root, handlers, level):
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)


@pytest.fixture(autouse=True)
def keep_root_logger():
    """main() reconfigures the root logger; put pytest's handlers back afterwards"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    _restore(root, handlers, level)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_preset):
    """Cohort plus trained segmenter and fusion model, all produced through the CLI"""
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    base = tmp_path_factory.mktemp("cli")
    cohort, model = base / "cohort", base / "model"
    with pytest.MonkeyPatch.context() as mp:
        mp.setitem(PRESETS, "tiny", tiny_preset)
        codes = [
            main(["cohort", "--preset", "tiny", "--out", str(cohort)]),
            main(["train", "seg", "--preset", "tiny", "--cohort", str(cohort), "--out", str(model)]),
            main(["train", "fuse", "--preset", "tiny", "--cohort", str(cohort), "--out", str(model)]),
        ]
        _restore(root, handlers, level)
        yield {"cohort": cohort, "model": model, "codes": codes, "base": base}


@pytest.fixture
def tiny(monkeypatch, tiny_preset):
    monkeypatch.setitem(PRESETS, "tiny", tiny_preset)


@pytest.mark.unit
class TestParser:
    def test_commands(self):
        parser = build_parser()
        args = parser.parse_args(["train", "fuse", "--strategy", "fixed:0.5,0.25,0.25", "--epochs", "3"])
        assert (args.command, args.target, args.strategy, args.epochs) == ("train", "fuse", "fixed:0.5,0.25,0.25", 3)
        args = parser.parse_args(["report", "timeline", "--patient", "P0001"])
        assert (args.kind, args.patient) == ("timeline", "P0001")

    @pytest.mark.parametrize(
        "argv",
        [["train", "audio"], ["cohort", "--n", "0"], ["cohort", "--preset", "huge"], ["report", "summary"], []],
    )
    def test_usage_errors_exit_2(self, argv):
        with pytest.raises(SystemExit) as exit_info:
            main(argv)
        assert exit_info.value.code == 2

    @pytest.mark.parametrize("name", ["paper", "full", "desk"])
    def test_preset_choices(self, name):
        assert build_parser().parse_args(["cohort", "--preset", name]).preset == name


@pytest.mark.integration
class TestPipeline:
    """cohort -> train seg -> train fuse -> eval -> report"""

    def test_setup_commands_succeed(self, workspace):
        assert workspace["codes"] == [0, 0, 0]

    def test_cohort_and_run_log(self, workspace):
        cohort = workspace["cohort"]
        assert (cohort / "manifest.json").exists()
        assert "Running 'cohort' with preset tiny" in (cohort / "run.log").read_text()

    def test_training_artifacts(self, workspace):
        model = workspace["model"]
        for name in ("segmenter.npz", "segmenter.json", "fusion.npz", "fusion.json", "segmentation_trace.csv"):
            assert (model / name).exists(), name
        trace = pd.read_csv(model / "fusion_trace.csv")
        assert trace["epoch"].tolist() == [1, 2, 3]

    def test_eval_writes_predictions(self, workspace, tmp_path, capsys):
        code = main(["eval", "--cohort", str(workspace["cohort"]), "--model", str(workspace["model"]), "--out", str(tmp_path)])
        assert code == 0
        lines = (tmp_path / "predictions.jsonl").read_text().splitlines()
        assert len(lines) == 12
        record = json.loads(lines[0])
        assert set(record["allocation"]) == {"text", "cine", "numeric"}
        assert 0.0 <= record["death_probability"] <= 1.0
        output = capsys.readouterr().out
        assert "integrated" in output and "death recall" in output

    def test_timeline_report(self, workspace, tmp_path, capsys):
        code = main(
            ["report", "timeline", "--cohort", str(workspace["cohort"]), "--model", str(workspace["model"]),
             "--patient", "P001", "--out", str(tmp_path)]
        )
        assert code == 0
        timeline = pd.read_csv(tmp_path / "timeline_P001.csv")
        assert list(timeline.columns) == ["time", "probability", "level"]
        assert timeline["time"].iloc[0] == 0.0 and timeline["time"].iloc[-1] == 180.0
        output = capsys.readouterr().out
        assert output.startswith("Patient P001: risk timeline over days 0-180")
        assert "Follow-up in" in output

    def test_importance_report(self, workspace, tmp_path):
        code = main(
            ["report", "importance", "--cohort", str(workspace["cohort"]), "--model", str(workspace["model"]),
             "--repeats", "1", "--out", str(tmp_path)]
        )
        assert code == 0
        document = json.loads((tmp_path / "importance.json").read_text())
        assert sum(document["importance"].values()) == pytest.approx(1.0)
        assert document["repeats"] == 1

    def test_ablate(self, workspace, tmp_path, tiny, capsys):
        code = main(
            ["ablate", "--preset", "tiny", "--epochs", "1", "--cohort", str(workspace["cohort"]),
             "--model", str(workspace["model"]), "--out", str(tmp_path)]
        )
        assert code == 0
        assert len(json.loads((tmp_path / "ablation.json").read_text())["rows"]) == 8
        assert len(capsys.readouterr().out.splitlines()) == 8

    def test_ablate_forwards_workers(self, workspace, tmp_path, tiny, mocker):
        fake = mocker.patch("app.main.ablate")
        fake.return_value.rows = []
        code = main(["ablate", "--preset", "tiny", "--workers", "3", "--cohort", str(workspace["cohort"]), "--out", str(tmp_path)])
        assert code == 0
        assert fake.call_args.args[2] == 3
        assert fake.call_args.args[3] is None
        fake.return_value.to_json.assert_called_once_with(tmp_path / "ablation.json")


@pytest.mark.integration
class TestExitCodes:
    """Library errors map to dedicated exit codes"""

    def test_unknown_patient(self, workspace, tmp_path):
        code = main(
            ["report", "timeline", "--cohort", str(workspace["cohort"]), "--model", str(workspace["model"]),
             "--patient", "P999", "--out", str(tmp_path)]
        )
        assert code == 5

    def test_missing_cohort(self, workspace, tmp_path):
        assert main(["eval", "--cohort", str(tmp_path / "nowhere"), "--model", str(workspace["model"])]) == 3

    def test_missing_weights(self, workspace, tmp_path):
        assert main(["eval", "--cohort", str(workspace["cohort"]), "--model", str(tmp_path)]) == 4

    def test_missing_flag(self, workspace):
        assert main(["eval", "--cohort", str(workspace["cohort"])]) == 6

    def test_timeline_needs_patient(self, workspace, tmp_path):
        assert main(["report", "timeline", "--cohort", str(workspace["cohort"]), "--model", str(workspace["model"]), "--out", str(tmp_path)]) == 6

    def test_invalid_strategy(self, workspace, tmp_path, tiny):
        code = main(
            ["train", "fuse", "--preset", "tiny", "--strategy", "fixed:0.9,0.9,0.9", "--cohort", str(workspace["cohort"]),
             "--out", str(tmp_path)]
        )
        assert code == 6

    def test_invalid_config_file(self, tmp_path):
        config = tmp_path / "run.env"
        config.write_text("COLOR=blue\n")
        assert main(["cohort", "--config", str(config), "--out", str(tmp_path / "c")]) == 6


@pytest.mark.integration
class TestCohortCommand:
    def test_flags_and_environment(self, tmp_path, monkeypatch, tiny, capsys):
        monkeypatch.setenv("PRTM_SEED", "21")
        out = tmp_path / "cohort"
        assert main(["cohort", "--preset", "tiny", "--n", "20", "--cine", "2", "--out", str(out)]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 21
        assert len((out / "text.jsonl").read_text().splitlines()) == 20
        assert "Age" in capsys.readouterr().out

    def test_paper_preset(self, tmp_path):
        out = tmp_path / "cohort"
        assert main(["cohort", "--preset", "paper", "--n", "6", "--cine", "0", "--out", str(out)]) == 0
        assert "with preset paper" in (out / "run.log").read_text()
        assert json.loads((out / "manifest.json").read_text())["spec"]["cine_shape"] == [512, 512, 16]
