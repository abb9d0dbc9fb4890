"""From transitions to admitted skills: aggregate, lift, admit, retrieve.

Transitions sharing an action category, locus tag, and similar effect are
clustered; a lifter names each cluster's intent, anchor, carrier, and
preconditions, while the framework fills evidence, effect range, risks, and
a verified scope projected from what the evidence actually witnessed.
A hypothesis becomes an admitted skill only after a held-out roundtrip
reproduces its effect; only admitted skills are ever retrievable.

Run:  python3 demos/03_skill_lifecycle.py
"""

from deoptkit.deopt import DeoptConfig, induce_lineage
from deoptkit.gate import GateConfig
from deoptkit.library import RetrievalTarget, retrieve, serialize_skillcard_prompt
from deoptkit.lift import admit_pending, aggregate_transitions, evidence_state_ids, lift_cluster
from deoptkit.simdomain import (
    LatticeTrialRunner,
    SimLifter,
    SimRewriter,
    SimRunner,
    demo_lattice,
)

spec = demo_lattice()
gate = GateConfig(reps=9)
config = DeoptConfig(rewriter=SimRewriter(), runner=SimRunner(), registry=spec.registry(), gate=gate)
result = induce_lineage(spec.expert_state(), spec, config)

clusters = aggregate_transitions(result.lineage.transitions)
print(f"{len(result.lineage.transitions)} transitions -> {len(clusters)} clusters")

states = {s.id: s for s in result.lineage.states}
hypotheses = [
    lift_cluster(c, SimLifter(), states, result.risks, spec.to_case_spec()) for c in clusters
]
print("\nlifted hypotheses (status, intent, preconditions, verified prior context):")
for card in hypotheses:
    print(f"  [{card.status.value}] {card.intent.name:<12} pre={list(card.required_actions)} "
          f"verified prior={sorted(card.scope.verified_prior_actions())}")

trial_runner = LatticeTrialRunner(spec, gate, evidence_state_ids(result.lineage.transitions))
report, cards = admit_pending(hypotheses, trial_runner)
print("\nadmission report:")
print(report.table())

target = RetrievalTarget(case_id="demo", language="sim", platform="sim", applied_actions=("tile",))
pool = retrieve(target, k=2, skills=cards, registry=spec.registry())
print(f"\nretrieval for target (demo, sim, sim, {{tile}}), k=2:")
for entry in pool:
    print(f"  {entry.skill.intent.name:<12} total={entry.total:.2f} "
          f"(case {entry.case_score:.2f}, lang {entry.language_score:.2f}, "
          f"plat {entry.platform_score:.2f}, prior {entry.prior_score:.2f})")

print("\nprompt serialization of the top skill (carrier copied verbatim):\n")
print(serialize_skillcard_prompt(pool[0].skill))
