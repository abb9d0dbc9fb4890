from __future__ import annotations

import json
import logging
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from deoptkit.analytics import (
    CurveEvent,
    GeomeanResult,
    emit_report,
    format_ms,
    format_speedup,
    roundtrip_score,
    running_best_curve,
    speedup,
    success_only_geomean,
)
from deoptkit.deopt import induce_lineage
from deoptkit.errors import InvalidLatency

from conftest import make_deopt_config
from test_deopt import CUMSUM_ACTIONS, CUMSUM_TABLE

FIXTURES = Path(__file__).parent / "fixtures"
BENCH = json.loads((FIXTURES / "bench_latencies.json").read_text())
ROUNDTRIPS = json.loads((FIXTURES / "roundtrip_tally.json").read_text())


def fixture_speedups(method):
    out = []
    for row in BENCH["rows"]:
        latency = row["latency_ms"][method]
        out.append(None if latency is None else speedup(row["reference_ms"], latency))
    return out


class TestSpeedup:
    def test_conv2d_sm90(self):
        value = speedup(0.0272, 0.0157)
        assert value == pytest.approx(1.7325, abs=5e-4)
        assert format_speedup(value) == "1.73×"

    def test_gemm_sm90_below_parity(self):
        value = speedup(0.3086, 0.3130)
        assert value == pytest.approx(0.9859, abs=5e-4)
        assert format_speedup(value) == "0.99×"

    def test_parity(self):
        assert speedup(1.0, 1.0) == 1.0

    @pytest.mark.parametrize("ref,gen", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
    def test_nonpositive_rejected(self, ref, gen):
        with pytest.raises(InvalidLatency):
            speedup(ref, gen)


class TestSuccessOnlyGeomean:
    def test_ten_pair_mean(self):
        result = success_only_geomean(fixture_speedups("skills"))
        assert result.n_success == 10 and result.n_total == 10
        assert result.value == pytest.approx(1.12, abs=0.005)

    def test_six_instance_conditional_subset(self):
        subset = [
            speedup(row["reference_ms"], row["latency_ms"]["skills"])
            for row in BENCH["rows"]
            if row["workload"] in ("conv2d", "gdn", "topk")
        ]
        result = success_only_geomean(subset)
        assert result.n_success == 6
        assert result.value == pytest.approx(1.22, abs=0.005)

    def test_failures_reduce_count_not_mean(self):
        with_failures = success_only_geomean([2.0, None, 0.5, None])
        assert with_failures == GeomeanResult(value=pytest.approx(1.0), n_success=2, n_total=4)

    def test_no_success_is_undefined_never_zero(self):
        result = success_only_geomean([None, None])
        assert result.value is None and result.n_success == 0 and result.n_total == 2

    @given(
        st.lists(st.floats(min_value=0.01, max_value=100.0), min_size=1, max_size=12),
        st.floats(min_value=0.1, max_value=10.0),
    )
    def test_homogeneity(self, entries, scale):
        base = success_only_geomean(entries)
        scaled = success_only_geomean([e * scale for e in entries])
        assert scaled.value == pytest.approx(base.value * scale, rel=1e-9)


class TestRoundtripScore:
    def test_pass_at_90_percent(self):
        assert roundtrip_score(achieved_latency=0.2700, expert_latency=0.2439)

    def test_fail_below_90_percent(self):
        assert not roundtrip_score(achieved_latency=0.2750, expert_latency=0.2439)

    def test_equal_latency_passes(self):
        assert roundtrip_score(0.5, 0.5)

    def test_nonpositive_rejected(self):
        with pytest.raises(InvalidLatency):
            roundtrip_score(0.0, 1.0)


class TestRunningBestCurve:
    def test_wrapper_filtered_hand_trace(self):
        events = [
            CurveEvent(1.0, "valid", 0.5),
            CurveEvent(2.0, "wrapper", 0.96),
            CurveEvent(3.0, "valid", 0.9),
        ]
        points = running_best_curve(events)
        assert [(p.cumulative_dollars, p.best_speedup) for p in points] == [
            (1.0, 0.5), (2.0, 0.5), (3.0, 0.9),
        ]

    def test_all_failed_session_keeps_cost_axis(self):
        events = [CurveEvent(0.5, "failed"), CurveEvent(1.5, "failed")]
        points = running_best_curve(events)
        assert [p.cumulative_dollars for p in points] == [0.5, 1.5]
        assert all(p.best_speedup is None for p in points)

    def test_audited_entries_only_with_audit_rule(self):
        events = [CurveEvent(1.0, "failed"), CurveEvent(2.0, "audited", 0.41, audited=True)]
        as_submitted = running_best_curve(events)
        assert all(p.best_speedup is None for p in as_submitted)
        audited = running_best_curve(events, include_rules="audit")
        assert audited[-1].best_speedup == 0.41
        assert audited[-1].audited is True

    def test_unsorted_events_resorted_with_warning(self, caplog):
        events = [CurveEvent(2.0, "valid", 0.9), CurveEvent(1.0, "valid", 0.5)]
        with caplog.at_level(logging.WARNING):
            points = running_best_curve(events)
        assert "re-sorting" in caplog.text
        assert [p.cumulative_dollars for p in points] == [1.0, 2.0]

    def test_monotone_non_decreasing_property(self):
        events = [CurveEvent(float(i), "valid", s) for i, s in enumerate([0.5, 0.3, 0.9, 0.7, 1.2])]
        points = running_best_curve(events)
        bests = [p.best_speedup for p in points]
        assert bests == sorted(bests)

    def test_accepts_session_event_dicts(self):
        events = [
            {"cumulative_dollars": "1.00", "verdict": "valid", "speedup": 0.5},
            {"cumulative_dollars": "2.00", "verdict": "failed", "speedup": None},
        ]
        points = running_best_curve(events)
        assert points[-1].best_speedup == 0.5


class TestEmitReport:
    def _cumsum_lineage(self):
        from deoptkit.model import Role
        from deoptkit.simdomain import demo_lattice

        config = make_deopt_config(demo_lattice())
        expert = CUMSUM_TABLE.state(CUMSUM_ACTIONS, role=Role.EXPERT)
        return induce_lineage(expert, CUMSUM_TABLE, config).lineage

    def test_latency_table_skills_column_matches_fixture(self, tmp_path):
        emit_report(tmp_path, bench=BENCH)
        text = (tmp_path / "report.md").read_text()
        for row in BENCH["rows"]:
            latency = row["latency_ms"]["skills"]
            assert f"| {format_ms(latency)} |" in text or f"| {format_ms(latency)}" in text
        assert "FAIL" in text
        assert "†" in text  # the audited cell is footnoted
        assert "- skills: 1.12× on 10/10" in text

    def test_roundtrip_tally_cells(self, tmp_path):
        emit_report(tmp_path, roundtrips=ROUNDTRIPS)
        text = (tmp_path / "report.md").read_text()
        assert "| sm90 | gemm | 4/5 |" in text
        assert "| total |  | 41/50 |" in text

    def test_lineage_trace_lists_chain_latencies(self, tmp_path):
        emit_report(tmp_path, lineages=[self._cumsum_lineage()])
        text = (tmp_path / "report.md").read_text()
        assert "0.035 → 0.034 → 0.012 → 0.012 → 0.011" in text

    def test_curves_csv(self, tmp_path):
        sessions = {
            "w1": [
                {"cumulative_dollars": 1.0, "verdict": "valid", "speedup": 0.5},
                {"cumulative_dollars": 2.0, "verdict": "wrapper", "speedup": 0.96},
            ]
        }
        written = emit_report(tmp_path, sessions=sessions)
        csv_path = tmp_path / "curve_w1.csv"
        assert csv_path in written
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "cumulative_dollars,best_speedup,audited"
        assert lines[1].startswith("1.000000,0.500000")
        assert lines[2].startswith("2.000000,0.500000")

    def test_curve_lines_label_their_reference(self, tmp_path):
        sessions = {
            "w1": [{"cumulative_dollars": 1.0, "verdict": "valid", "speedup": 0.5,
                    "reference_label": "vendor library"}],
            "w2": [{"cumulative_dollars": 1.0, "verdict": "valid", "speedup": 0.7}],
        }
        emit_report(tmp_path, sessions=sessions)
        text = (tmp_path / "report.md").read_text()
        assert "vs vendor library" in text
        assert "vs case reference" in text

    def test_missing_artifacts_leave_explicit_gaps(self, tmp_path):
        emit_report(tmp_path)
        text = (tmp_path / "report.md").read_text()
        assert "(no latency fixture provided)" in text
        assert "(no roundtrip artifacts provided)" in text

    def test_deterministic_bytes(self, tmp_path):
        out1, out2 = tmp_path / "one", tmp_path / "two"
        lineage = self._cumsum_lineage()
        emit_report(out1, bench=BENCH, roundtrips=ROUNDTRIPS, lineages=[lineage])
        emit_report(out2, bench=BENCH, roundtrips=ROUNDTRIPS, lineages=[lineage])
        assert (out1 / "report.md").read_bytes() == (out2 / "report.md").read_bytes()


class TestDisplayRounding:
    @pytest.mark.parametrize(
        "value,shown",
        [(0.0157, "0.0157"), (3.5183, "3.518"), (0.3086, "0.3086"), (17.7673, "17.77")],
    )
    def test_four_significant_figures(self, value, shown):
        assert format_ms(value) == shown
