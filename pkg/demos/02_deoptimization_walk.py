"""Guided deoptimization: walking an expert kernel backward under the gate.

Starting from the fully optimized state, the walk proposes one
simplification at a time (dependents before dependencies), lets the
rewriter produce the simplified program, and accepts it only if the gate
passes and the result is not implausibly faster than its successor.  Each
accepted step is re-derived as a forward edit and stored as an executable
transition; rejected steps become risk evidence.

Run:  python3 demos/02_deoptimization_walk.py
"""

from deoptkit.deopt import DeoptConfig, induce_lineage, propose_simplifications, replay_lineage
from deoptkit.gate import GateConfig, validate
from deoptkit.simdomain import SimRewriter, SimRunner, demo_lattice

spec = demo_lattice()
expert = spec.expert_state()
config = DeoptConfig(
    rewriter=SimRewriter(),
    runner=SimRunner(),
    registry=spec.registry(),
    gate=GateConfig(reps=9),
)

print("proposal ranking from the expert state (dependents first):")
validated_expert = expert.with_validation(validate(expert, spec, config.gate, config.runner))
for proposal in propose_simplifications(validated_expert, config.registry):
    print(f"  rank {proposal.soft_order_rank}: {proposal.rationale}")

result = induce_lineage(expert, spec, config)
lineage = result.lineage
print(f"\ninduced lineage ({len(lineage.states)} states, {len(lineage.transitions)} transitions):")
for state in lineage.states:
    actions = ",".join(state.applied_actions) or "(naive)"
    print(f"  [{state.role.value:<12}] {actions:<28} {state.latency_ms} ms")

print("\nforward transitions (the stored inverses of the accepted backward steps):")
for t in lineage.transitions:
    print(f"  +{t.action_category:<10} effect x{t.effect.latency_ratio:.2f} (bucket {t.effect.ratio_bucket})")

print(f"\nrisk evidence collected: {len(result.risks)} records")
for risk in result.risks:
    print(f"  {risk.action_category}: {risk.observed_failure.value}: {risk.violated_precondition}")

replay_lineage(lineage, config, spec)
print("\nforward replay of the stored diffs reproduced every state id and latency exactly.")
