"""Benchmark statistics and report emission.

Speedup is reference latency over generated latency.  Aggregates are
success-only geometric means: failed instances reduce the success count,
never the mean.  Running-best curves are computed over a wrapper-filtered
step set; wrapper and failed submissions still advance the cost axis but
never contribute to the best.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import InvalidLatency
from .model import Lineage

log = logging.getLogger(__name__)

# Display rounding follows the tables this mirrors: two decimals for ratios,
# four significant figures for milliseconds.  Underlying JSON keeps full
# precision.


def speedup(t_ref: float, t_gen: float) -> float:
    if t_ref <= 0 or t_gen <= 0:
        raise InvalidLatency(f"latencies must be positive, got ({t_ref}, {t_gen})")
    return t_ref / t_gen


def format_speedup(value: float) -> str:
    return f"{value:.2f}×"


def format_ms(value: float) -> str:
    return f"{value:.4g}"


@dataclass(frozen=True)
class GeomeanResult:
    value: float | None  # None when no entry succeeded (undefined, never 0)
    n_success: int
    n_total: int


def success_only_geomean(entries: Sequence[float | None]) -> GeomeanResult:
    """Geometric mean over present entries; absent entries count only in n_total."""
    present = [e for e in entries if e is not None]
    n_total = len(entries)
    if not present:
        return GeomeanResult(value=None, n_success=0, n_total=n_total)
    for e in present:
        if e <= 0:
            raise InvalidLatency(f"speedups must be positive, got {e}")
    mean_log = sum(math.log(e) for e in present) / len(present)
    return GeomeanResult(value=math.exp(mean_log), n_success=len(present), n_total=n_total)


def roundtrip_score(achieved_latency: float, expert_latency: float) -> bool:
    """Pass iff the achieved kernel reaches at least 90% of source performance."""
    if achieved_latency <= 0 or expert_latency <= 0:
        raise InvalidLatency("latencies must be positive")
    return (expert_latency / achieved_latency) >= 0.9


# ---------------------------------------------------------------------------
# running-best curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveEvent:
    cumulative_dollars: float
    verdict: str  # valid | wrapper | failed | non_improving | audited
    speedup: float | None = None
    audited: bool = False

    @classmethod
    def from_session_event(cls, event: Mapping[str, Any]) -> "CurveEvent":
        return cls(
            cumulative_dollars=float(event["cumulative_dollars"]),
            verdict=str(event["verdict"]),
            speedup=event.get("speedup"),
            audited=bool(event.get("audited", False)),
        )


@dataclass(frozen=True)
class CurvePoint:
    cumulative_dollars: float
    best_speedup: float | None
    audited: bool = False  # True when an audited entry set the current best


def running_best_curve(
    events: Sequence[CurveEvent | Mapping[str, Any]],
    include_rules: str = "as_submitted",
) -> list[CurvePoint]:
    """Monotone best-speedup step curve over cumulative cost.

    Wrapper and failed events are excluded from the best but still advance
    the cost axis.  ``include_rules="audit"`` additionally admits post-hoc
    audited entries, flagged in the output.  Unsorted input is re-sorted
    with a warning rather than trusted.
    """
    normalized = [
        e if isinstance(e, CurveEvent) else CurveEvent.from_session_event(e) for e in events
    ]
    costs = [e.cumulative_dollars for e in normalized]
    if costs != sorted(costs):
        log.warning("running_best_curve: events were not sorted by cumulative cost; re-sorting")
        normalized.sort(key=lambda e: e.cumulative_dollars)

    eligible = {"valid", "non_improving"}
    if include_rules == "audit":
        eligible.add("audited")

    best: float | None = None
    best_from_audit = False
    points: list[CurvePoint] = []
    for event in normalized:
        counts = event.verdict in eligible and event.speedup is not None
        if counts and (best is None or event.speedup > best):
            best = event.speedup
            best_from_audit = event.audited or event.verdict == "audited"
        points.append(
            CurvePoint(
                cumulative_dollars=event.cumulative_dollars,
                best_speedup=best,
                audited=best_from_audit,
            )
        )
    return points


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def _bench_section(bench: Mapping[str, Any]) -> list[str]:
    methods: list[str] = list(bench["methods"])
    ref_label = bench.get("reference_label", "reference")
    lines = ["## Per-instance latency (ms)", ""]
    header = ["platform", "workload", *methods, f"{ref_label} (ms)"]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    dagger_needed = False
    per_method_speedups: dict[str, list[float | None]] = {m: [] for m in methods}
    for row in bench["rows"]:
        cells = [str(row["platform"]), str(row["workload"])]
        for method in methods:
            latency = row["latency_ms"].get(method)
            audited = bool(row.get("audited", {}).get(method, False))
            if latency is None:
                cells.append("FAIL")
                per_method_speedups[method].append(None)
            else:
                mark = "†" if audited else ""
                dagger_needed = dagger_needed or audited
                cells.append(format_ms(latency) + mark)
                per_method_speedups[method].append(speedup(row["reference_ms"], latency))
        cells.append(format_ms(row["reference_ms"]))
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    if dagger_needed:
        lines.append("† recovered by a post-hoc audit, not an as-submitted valid kernel.")
        lines.append("")
    lines.append("Success-only geometric means (failures reduce the success count, not the mean):")
    lines.append("")
    for method in methods:
        result = success_only_geomean(per_method_speedups[method])
        shown = format_speedup(result.value) if result.value is not None else "undefined"
        lines.append(f"- {method}: {shown} on {result.n_success}/{result.n_total}")
    lines.append("")
    return lines


def _roundtrip_section(roundtrips: Mapping[str, Any]) -> list[str]:
    lines = ["## Roundtrip recovery", ""]
    lines.append("| platform | workload | recovered |")
    lines.append("|---|---|---|")
    total_pass = total_trials = 0
    for row in roundtrips["rows"]:
        lines.append(f"| {row['platform']} | {row['workload']} | {row['passes']}/{row['trials']} |")
        total_pass += int(row["passes"])
        total_trials += int(row["trials"])
    lines.append(f"| total |  | {total_pass}/{total_trials} |")
    lines.append("")
    return lines


def _lineage_section(lineages: Sequence[Lineage]) -> list[str]:
    lines = ["## Lineage traces", ""]
    for lineage in sorted(lineages, key=lambda ln: (ln.case_id, ln.expert_id)):
        latencies = " → ".join(format_ms(s.latency_ms) for s in lineage.states)
        actions = ", ".join(t.action_category for t in lineage.transitions)
        lines.append(f"- `{lineage.case_id}` ({lineage.platform}): {latencies} ms")
        lines.append(f"  transitions: {actions or '(none)'}")
    lines.append("")
    return lines


def emit_report(
    out_dir: Path | str,
    bench: Mapping[str, Any] | None = None,
    roundtrips: Mapping[str, Any] | None = None,
    lineages: Sequence[Lineage] = (),
    sessions: Mapping[str, Sequence[Mapping[str, Any]]] | None = None,
    include_rules: str = "as_submitted",
) -> list[Path]:
    """Write the markdown report and per-session budget-curve CSVs.

    Output is deterministic: identical inputs produce byte-identical files;
    missing artifacts leave explicit gaps rather than being invented.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    lines: list[str] = ["# Benchmark report", ""]
    lines.extend(_bench_section(bench) if bench else ["## Per-instance latency", "", "(no latency fixture provided)", ""])
    lines.extend(
        _roundtrip_section(roundtrips) if roundtrips else ["## Roundtrip recovery", "", "(no roundtrip artifacts provided)", ""]
    )
    lines.extend(_lineage_section(lineages) if lineages else ["## Lineage traces", "", "(no lineages provided)", ""])

    if sessions:
        lines.append("## Budget curves")
        lines.append("")
        for session_id in sorted(sessions):
            events = sessions[session_id]
            curve = running_best_curve(list(events), include_rules=include_rules)
            csv_path = out / f"curve_{session_id}.csv"
            rows = ["cumulative_dollars,best_speedup,audited"]
            for point in curve:
                best = "" if point.best_speedup is None else f"{point.best_speedup:.6f}"
                rows.append(f"{point.cumulative_dollars:.6f},{best},{str(point.audited).lower()}")
            csv_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
            written.append(csv_path)
            final = curve[-1].best_speedup if curve else None
            shown = format_speedup(final) if final is not None else "FAIL"
            reference = next(
                (e.get("reference_label") for e in events if e.get("reference_label")),
                "case reference",
            )
            lines.append(
                f"- `{session_id}`: final running best {shown} vs {reference} "
                f"({len(curve)} submissions) -> curve_{session_id}.csv"
            )
        lines.append("")
    else:
        lines.extend(["## Budget curves", "", "(no session logs provided)", ""])

    report_path = out / "report.md"
    report_path.write_text("\n".join(lines), encoding="utf-8")
    written.insert(0, report_path)
    return written
