"""Protocol conformance: shared-phase responses must match the simulated
runner's recorded transcripts byte-for-byte.

The fixture was recorded from the simulated runner; both implementations
pin the same bytes, so a drift on either side fails one of the two suites.
Profile responses carry measured samples and are checked structurally in
test_protocol, not byte-for-byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from kernel_runner_adapter.runner import AdapterRunner, canonical_json

ROOT = Path(__file__).resolve().parents[1]
CASES = ROOT / "cases"
GOLDEN = json.loads((Path(__file__).parent / "fixtures" / "golden_transcripts.json").read_text())

CORRECT_KERNEL = "def kernel(x, a, b):\n    return a * x + b\n"
WRAPPER_KERNEL = "def kernel(x, a, b):\n    return reference(x, a, b)\n"

SCENARIOS = {
    "compile_ok": ("compile", CORRECT_KERNEL),
    "correctness_ok": ("correctness", CORRECT_KERNEL),
    "probe_real_kernel": ("probe", CORRECT_KERNEL),
    "probe_wrapper": ("probe", WRAPPER_KERNEL),
}


@pytest.mark.parametrize("entry", GOLDEN["transcripts"], ids=lambda e: e["name"])
def test_shared_phase_bytes_match(entry):
    phase, source = SCENARIOS[entry["name"]]
    assert phase == entry["phase"]
    runner = AdapterRunner(CASES)
    response = runner.run(
        {
            "phase": phase,
            "state": {"source_text": source},
            "case": {"case_id": "scale_add"},
            "config": {"reps": 3, "warmups": 1, "tolerance": {"atol": 1e-5, "rtol": 1e-5}},
            "seed": 0,
        }
    )
    assert canonical_json(response) == entry["response"]
