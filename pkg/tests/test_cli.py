from __future__ import annotations

import json
from pathlib import Path

import pytest

from deoptkit.cli import main
from deoptkit.simdomain import demo_lattice

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def workdir(tmp_path):
    case_path = tmp_path / "case.json"
    case_path.write_text(json.dumps(demo_lattice().to_case_spec()))
    return tmp_path


def run(workdir, *argv):
    return main(["--store", str(workdir / "store"), *argv])


class TestPipelineCommands:
    def test_full_pipeline(self, workdir, capsys):
        case = str(workdir / "case.json")
        assert run(workdir, "induce", "--case", case, "--reps", "5", "--run-id", "r1") == 0
        out = capsys.readouterr().out
        assert "4 states, 3 transitions" in out
        assert (workdir / "store" / "events" / "r1.jsonl").exists()

        assert run(workdir, "lift", "--case", case) == 0
        assert "lifted 3 hypotheses" in capsys.readouterr().out

        assert run(workdir, "admit", "--case", case, "--reps", "5") == 0
        out = capsys.readouterr().out
        assert '"admitted"' in out

        assert run(workdir, "retrieve", "--case", "demo", "--language", "sim",
                   "--platform", "sim", "--applied", "tile", "--k", "2") == 0
        out = capsys.readouterr().out
        assert "vectorize" in out

        assert run(workdir, "optimize", "--case", case, "--root", "naive",
                   "--reps", "5", "--session-id", "s1") == 0
        out = capsys.readouterr().out
        assert "status=saturated" in out or "status=done" in out
        assert "best=280" in out
        assert (workdir / "store" / "sessions" / "s1.jsonl").exists()

        assert run(workdir, "report", "--bench", str(FIXTURES / "bench_latencies.json"),
                   "--roundtrips", str(FIXTURES / "roundtrip_tally.json"),
                   "--out", str(workdir / "report")) == 0
        report = (workdir / "report" / "report.md").read_text()
        assert "Per-instance latency" in report
        assert (workdir / "report" / "curve_s1.csv").exists()

        assert run(workdir, "validate-store") == 0

    def test_sim_demo_command(self, workdir, capsys):
        assert run(workdir, "sim", "--reps", "5") == 0
        out = capsys.readouterr().out
        assert "[4/4] optimize from naive" in out
        assert "best=280.0" in out

    def test_generated_only_ablation_flag(self, workdir, capsys):
        case = str(workdir / "case.json")
        run(workdir, "induce", "--case", case, "--reps", "5")
        run(workdir, "lift", "--case", case)
        run(workdir, "admit", "--case", case, "--reps", "5")
        capsys.readouterr()
        code = run(workdir, "optimize", "--case", case, "--root", "naive", "--reps", "5",
                   "--ablation", "generated-only", "--ablation-seed", "0",
                   "--max-submissions", "6", "--session-id", "abl")
        assert code in (0, 3)
        assert (workdir / "store" / "sessions" / "abl.jsonl").exists()


class TestExitCodes:
    def test_validation_failure_exits_2(self, workdir, capsys):
        store = workdir / "store"
        (store / "states").mkdir(parents=True)
        (store / "states" / ("a" * 64 + ".json")).write_text('{"id": "a"}')
        assert run(workdir, "validate-store") == 2

    def test_budget_exhausted_exits_3(self, workdir, capsys):
        case = str(workdir / "case.json")
        run(workdir, "induce", "--case", case, "--reps", "5")
        run(workdir, "lift", "--case", case)
        run(workdir, "admit", "--case", case, "--reps", "5")
        capsys.readouterr()
        code = run(workdir, "optimize", "--case", case, "--root", "naive",
                   "--reps", "5", "--budget", "0.01")
        assert code == 3

    def test_protocol_error_exits_4(self, workdir):
        case = str(workdir / "case.json")
        assert run(workdir, "induce", "--case", case, "--runner", "not-registered") == 4

    def test_missing_lineages_for_lift_exits_2(self, workdir, capsys):
        assert run(workdir, "lift", "--case", str(workdir / "case.json")) == 2


class TestConfigFile:
    def test_external_runner_registration(self, workdir):
        import sys

        config = workdir / "config.json"
        config.write_text(json.dumps({
            "runners": {"simproc": [sys.executable, "-m", "deoptkit", "sim", "--serve", "runner"]},
        }))
        case = str(workdir / "case.json")
        code = main(["--store", str(workdir / "store"), "--config", str(config),
                     "induce", "--case", case, "--runner", "simproc", "--reps", "4"])
        assert code == 0
