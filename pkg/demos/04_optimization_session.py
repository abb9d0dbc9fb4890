"""A budget-metered optimization session, including wrapper exclusion.

The loop retrieves skills for the current best state, picks the highest
ranked one whose preconditions hold, materializes it through the rewriter,
and gates the candidate.  Spend is charged with exact decimal arithmetic
against a hard cap; a wrapper submission (one that delegates to the
reference) passes plain correctness but fails the poisoned-reference probe
and never becomes the running best, no matter how fast it looks.

Run:  python3 demos/04_optimization_session.py
"""

from decimal import Decimal

from deoptkit.deopt import DeoptConfig, induce_lineage
from deoptkit.gate import GateConfig
from deoptkit.lift import admit_pending, aggregate_transitions, evidence_state_ids, lift_cluster
from deoptkit.materialize import MaterializeConfig, optimize
from deoptkit.simdomain import (
    LatticeTrialRunner,
    SimLifter,
    SimRewriter,
    SimRunner,
    demo_lattice,
)

spec = demo_lattice()
gate = GateConfig(reps=9)
deopt = DeoptConfig(rewriter=SimRewriter(), runner=SimRunner(), registry=spec.registry(), gate=gate)
result = induce_lineage(spec.expert_state(), spec, deopt)
states = {s.id: s for s in result.lineage.states}
hypotheses = [
    lift_cluster(c, SimLifter(), states, result.risks, spec.to_case_spec())
    for c in aggregate_transitions(result.lineage.transitions)
]
trial_runner = LatticeTrialRunner(spec, gate, evidence_state_ids(result.lineage.transitions))
_, cards = admit_pending(hypotheses, trial_runner)

config = MaterializeConfig(
    gate=GateConfig(reps=9),
    budget_cap=Decimal("10.00"),
    max_submissions=8,
)
events = []
session = optimize(
    spec, spec.state([]), cards, SimRewriter(), SimRunner(), config, spec.registry(),
    session_id="demo-session", event_sink=events.append,
)

print(f"session over workload {session.workload_id!r} from the naive root:")
for step in session.trajectory:
    print(f"  {step.action:<10} verdict={step.verdict:<14} latency={step.latency_ms} ms "
          f"spent=${step.cumulative_dollars}")
print(f"status: {session.status}")
print(f"running best: {session.running_best_latency} ms "
      f"(expert optimum is {spec.base_latency * 0.5 * 0.8 * 0.7:.1f} ms)")

print("\nnow with a hard $0.02 cap (the refusal happens before the spend commits):")
tight = MaterializeConfig(gate=GateConfig(reps=9), budget_cap=Decimal("0.02"), max_submissions=8)
short_session = optimize(
    spec, spec.state([]), cards, SimRewriter(), SimRunner(), tight, spec.registry(),
)
print(f"status: {short_session.status} after {len(short_session.trajectory)} submissions, "
      f"each step within cap")
