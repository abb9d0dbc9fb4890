from __future__ import annotations

import pytest

from deoptkit.deopt import DeoptConfig, induce_lineage
from deoptkit.gate import GateConfig
from deoptkit.lift import (
    AdmitConfig,
    admit_pending,
    aggregate_transitions,
    evidence_state_ids,
    lift_cluster,
)
from deoptkit.simdomain import (
    LatticeTrialRunner,
    SimLifter,
    SimRewriter,
    SimRunner,
    demo_lattice,
)

FAST_GATE = GateConfig(reps=5)


@pytest.fixture(scope="session")
def chain_spec():
    """base 1000, tile(x0.5), vectorize(x0.8, pre tile), pipeline(x0.7, pre vectorize)."""
    return demo_lattice()


def make_deopt_config(spec, **overrides) -> DeoptConfig:
    defaults = dict(
        rewriter=SimRewriter(),
        runner=SimRunner(),
        registry=spec.registry(),
        gate=FAST_GATE,
    )
    defaults.update(overrides)
    return DeoptConfig(**defaults)


def run_pipeline(spec, max_trials: int = 3):
    """Induce, lift, and admit on one lattice; returns (result, cards, report)."""
    config = make_deopt_config(spec)
    result = induce_lineage(spec.expert_state(), spec, config)
    states = {s.id: s for s in result.lineage.states}
    clusters = aggregate_transitions(result.lineage.transitions)
    cards = [
        lift_cluster(c, SimLifter(), states, result.risks, spec.to_case_spec()) for c in clusters
    ]
    trial_runner = LatticeTrialRunner(spec, FAST_GATE, evidence_state_ids(result.lineage.transitions))
    report, admitted = admit_pending(cards, trial_runner, AdmitConfig(max_trials=max_trials))
    return result, admitted, report


@pytest.fixture(scope="session")
def chain_pipeline(chain_spec):
    return run_pipeline(chain_spec)
