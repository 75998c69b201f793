import json

import pytest

from backtrack import load_report
from conftest import FIXTURES
from errors import EXIT_ANALYSIS, EXIT_INPUT, EXIT_OK, EXIT_USAGE
from ppg import load_ppg
from psg import load_psg
from run_all import main
from run_manager import RunManager

SKETCH = str(FIXTURES / "cg_ring.sk")
SCENARIO = str(FIXTURES / "cg_ring.scenario.json")


@pytest.fixture(scope="module")
def steps(tmp_path_factory):
    """Artifacts of the step-by-step commands, produced once for the module."""
    out = tmp_path_factory.mktemp("steps")
    files = {
        "psg": out / "psg.json",
        "profiles": out / "profiles",
        "ppg": out / "ppg.json",
        "problems": out / "problems.json",
        "paths": out / "paths.json",
        "dot": out / "paths.dot",
    }
    codes = [
        main(["build", SKETCH, "--out", str(files["psg"])]),
        main(["simulate", str(files["psg"]), "--scenario", SCENARIO, "--procs", "4", "8",
              "--out-dir", str(files["profiles"])]),
        main(["assemble", str(files["psg"]), str(files["profiles"] / "cg_ring-P8.jsonl"),
              "--out", str(files["ppg"])]),
        main(["detect", str(files["psg"]), str(files["profiles"] / "cg_ring-P4.jsonl"),
              str(files["profiles"] / "cg_ring-P8.jsonl"), "--out", str(files["problems"]), "-q"]),
        main(["backtrack", str(files["ppg"]), str(files["problems"]), "--wait-threshold", "100",
              "--out", str(files["paths"]), "--dot", str(files["dot"]), "-q"]),
    ]
    return codes, files


class TestSteps:
    def test_every_step_succeeds(self, steps):
        codes, files = steps
        assert codes == [EXIT_OK] * 5
        assert sorted(p.name for p in files["profiles"].iterdir()) == ["cg_ring-P4.jsonl", "cg_ring-P8.jsonl"]

    def test_artifacts_chain_together(self, steps):
        _, files = steps
        psg = load_psg(str(files["psg"]))
        ppg = load_ppg(str(files["ppg"]))
        assert ppg.psg_hash and ppg.nprocs == 8
        assert len(ppg.psg) == len(psg)
        report = load_report(str(files["paths"]))
        assert (report.paths[0].terminal.rank, report.paths[0].terminal.vid) == (4, 2)
        assert report.wait_threshold_us == 100.0
        assert files["dot"].read_text().startswith("digraph PPG {")

    def test_report_text(self, steps, tmp_path):
        _, files = steps
        out = tmp_path / "paths.txt"
        assert main(["report", str(files["paths"]), "--sketch", SKETCH, "--top", "1", "--out", str(out)]) == EXIT_OK
        text = out.read_text()
        assert "#1 Comp cg_ring.sk:4 in rank 4" in text
        assert "comp spmv cost 8000 / P;" in text

    def test_report_dot_and_xlsx(self, steps, tmp_path):
        _, files = steps
        dot = tmp_path / "paths.dot"
        assert main(["report", str(files["paths"]), "--format", "dot", "--ppg", str(files["ppg"]),
                     "--out", str(dot)]) == EXIT_OK
        assert dot.read_text().startswith("digraph PPG {")
        xlsx = tmp_path / "paths.xlsx"
        assert main(["report", str(files["paths"]), "--format", "xlsx", "--problems", str(files["problems"]),
                     "--out", str(xlsx)]) == EXIT_OK
        assert xlsx.stat().st_size > 0

    def test_report_usage_errors(self, steps):
        _, files = steps
        assert main(["report", str(files["paths"]), "--format", "xlsx"]) == EXIT_USAGE
        assert main(["report", str(files["paths"]), "--format", "dot"]) == EXIT_USAGE

    def test_detect_flag_validation(self, steps):
        _, files = steps
        code = main(["detect", str(files["psg"]), str(files["profiles"] / "cg_ring-P8.jsonl"),
                     "--abnorm-thd", "0.5", "-q"])
        assert code == EXIT_USAGE

    def test_detect_needs_two_scales_unless_single_run(self, steps, tmp_path):
        _, files = steps
        p8 = str(files["profiles"] / "cg_ring-P8.jsonl")
        assert main(["detect", str(files["psg"]), p8, "-q"]) == EXIT_ANALYSIS
        out = tmp_path / "problems.json"
        assert main(["detect", str(files["psg"]), p8, "--single-run", "-q", "--out", str(out)]) == EXIT_OK
        assert json.loads(out.read_text())["notes"] == ["single run: non-scalable detection skipped"]


class TestErrors:
    def test_missing_sketch(self, tmp_path, capsys):
        assert main(["--json-errors", "build", str(tmp_path / "absent.sk")]) == EXIT_USAGE
        detail = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert detail["error"] == "ConfigError"

    def test_syntax_error_reports_position(self, tmp_path, capsys):
        bad = tmp_path / "bad.sk"
        bad.write_text("func main() {\n  comp x cost ;\n}\n")
        assert main(["--json-errors", "build", str(bad)]) == EXIT_INPUT
        detail = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert detail["error"] == "SketchError"
        assert (detail["file"], detail["line"]) == ("bad.sk", 2)

    def test_deadlock_is_an_analysis_error(self, tmp_path, capsys):
        sketch = tmp_path / "dead.sk"
        sketch.write_text("func main() {\n  recv((rank + 1) mod P, 0, 8);\n  send((rank + 1) mod P, 0, 8);\n}\n")
        scenario = tmp_path / "dead.json"
        scenario.write_text(json.dumps({"P": 2}))
        psg = tmp_path / "psg.json"
        assert main(["build", str(sketch), "--out", str(psg)]) == EXIT_OK
        code = main(["--json-errors", "simulate", str(psg), "--scenario", str(scenario),
                     "--out-dir", str(tmp_path / "profiles")])
        assert code == EXIT_ANALYSIS
        detail = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert detail["error"] == "DeadlockError"
        assert detail["stuck"] == {"0": "Recv@dead.sk:2", "1": "Recv@dead.sk:2"}

    def test_command_is_required(self):
        with pytest.raises(SystemExit):
            main([])


class TestPipeline:
    def test_pipeline_fills_a_run_directory(self, tmp_path, capsys):
        runs = tmp_path / "runs"
        code = main(["pipeline", SKETCH, "--scenario", SCENARIO, "--procs", "8", "4", "--runs-dir", str(runs),
                     "--wait-threshold", "100"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "All steps completed successfully" in out
        assert "#1 Comp cg_ring.sk:4 in rank 4" in out

        (run_dir,) = [d for d in runs.iterdir() if d.is_dir()]
        assert run_dir.name.startswith("cg_ring_")
        metadata = json.loads((run_dir / "run_metadata.json").read_text())
        assert metadata["status"] == "completed"
        assert metadata["stats"]["scales"] == [4, 8]
        assert metadata["stats"]["paths"] >= 1
        for name in ("problems.json", "paths.json", "paths.dot", "paths.txt", "paths.xlsx"):
            assert (run_dir / "reports" / name).exists()
        assert sorted(p.name for p in (run_dir / "profiles").iterdir()) == ["cg_ring-P4.jsonl", "cg_ring-P8.jsonl"]
        assert (run_dir / "ppg" / "cg_ring-P8.ppg.json").exists()
        assert list((run_dir / "logs").glob("run_*.log"))

        assert main(["runs", "--runs-dir", str(runs)]) == EXIT_OK
        listing = capsys.readouterr().out
        assert "Status: completed" in listing and "Scales: 4 8" in listing

    def test_failed_pipeline_is_recorded(self, tmp_path):
        runs = tmp_path / "runs"
        code = main(["pipeline", SKETCH, "--scenario", str(tmp_path / "absent.json"), "--procs", "4",
                     "--runs-dir", str(runs)])
        assert code == EXIT_INPUT
        (run,) = RunManager.list_all_runs(runs)
        assert run["status"] == "failed"

    def test_runs_dir_from_config(self, tmp_path, capsys):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"paths": {"runs_dir": str(tmp_path / "elsewhere")}}))
        assert main(["runs", "--config", str(config)]) == EXIT_OK
        assert "No runs found" in capsys.readouterr().out


class TestRunManager:
    def test_load_latest_run(self, tmp_path):
        created = RunManager(name="app", base_dir=tmp_path)
        created.update_status("completed", {"paths": 2})
        loaded = RunManager(base_dir=tmp_path)
        assert loaded.run_name == created.run_name
        summary = loaded.get_summary()
        assert summary["metadata"]["stats"] == {"paths": 2}
        assert summary["counts"] == {"profiles": 0, "reports": 0}

    def test_no_runs(self, tmp_path):
        with pytest.raises(ValueError):
            RunManager(base_dir=tmp_path)

    def test_unknown_artifact_directory(self, tmp_path):
        with pytest.raises(ValueError):
            RunManager(name="app", base_dir=tmp_path).path("plots", "x.png")
