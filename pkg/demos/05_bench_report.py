"""Benchmark analytics: speedups, success-only geometric means, reports.

Feeds the bundled latency fixture through the analytics pipeline: speedup
is reference latency over generated latency, aggregates are geometric means
over verified instances only, and running-best curves are computed over a
wrapper-filtered step set.

Run:  python3 demos/05_bench_report.py
"""

import json
import pathlib
import tempfile

from deoptkit.analytics import (
    CurveEvent,
    emit_report,
    format_speedup,
    running_best_curve,
    speedup,
    success_only_geomean,
)

fixture = pathlib.Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "bench_latencies.json"
bench = json.loads(fixture.read_text())

print("per-instance speedups for the 'skills' method:")
ratios = []
for row in bench["rows"]:
    value = speedup(row["reference_ms"], row["latency_ms"]["skills"])
    ratios.append(value)
    print(f"  {row['platform']:<6} {row['workload']:<7} {format_speedup(value)}")

overall = success_only_geomean(ratios)
print(f"\nsuccess-only geometric mean: {format_speedup(overall.value)} "
      f"on {overall.n_success}/{overall.n_total}")

conditional = success_only_geomean(
    [speedup(r["reference_ms"], r["latency_ms"]["skills"]) for r in bench["rows"]
     if r["workload"] in ("conv2d", "gdn", "topk")]
)
print(f"conditional-structure subset (conv2d/gdn/topk): {format_speedup(conditional.value)} "
      f"on {conditional.n_success}/{conditional.n_total}")

print("\nrunning-best curve with a wrapper in the middle (excluded from best):")
events = [
    CurveEvent(1.0, "valid", 0.5),
    CurveEvent(2.0, "wrapper", 0.96),
    CurveEvent(3.0, "valid", 0.9),
]
for point in running_best_curve(events):
    print(f"  ${point.cumulative_dollars:.2f}: best {point.best_speedup}")

out = pathlib.Path(tempfile.mkdtemp(prefix="deoptkit-report-"))
written = emit_report(out, bench=bench)
print(f"\nfull markdown report written to {written[0]}")
