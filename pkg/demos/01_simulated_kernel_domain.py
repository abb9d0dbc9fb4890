"""The simulated kernel domain: a precondition lattice with multiplicative effects.

A sim "kernel" is a canonical text listing which optimization actions are
applied.  Each action multiplies latency by its effect factor, but only if
its preconditions are already applied; otherwise the program computes the
wrong answer and the gate fails it.  That conditional structure is the
desk-scale stand-in for real kernels, where vectorizing a misaligned access
or pipelining before staging exists breaks the kernel.

Run:  python3 demos/01_simulated_kernel_domain.py
"""

from deoptkit.gate import GateConfig, validate
from deoptkit.simdomain import (
    CorrectnessFailure,
    SimRunner,
    brute_force_best,
    demo_lattice,
    sim_latency,
)

spec = demo_lattice()
print("lattice:", spec.case_id)
for action in spec.actions:
    needs = ", ".join(sorted(action.preconditions)) or "(nothing)"
    print(f"  {action.id:<10} x{action.effect_factor}  requires {needs}")
print(f"  base latency: {spec.base_latency} ms\n")

print("latency of some states:")
for applied in [(), ("tile",), ("tile", "vectorize"), ("tile", "vectorize", "pipeline")]:
    print(f"  {set(applied) or '{}'}: {sim_latency(spec, applied)} ms")

print("\napplying vectorize without tile fails correctness:")
try:
    sim_latency(spec, {"vectorize"})
except CorrectnessFailure as exc:
    print(f"  {exc}")

best, order = brute_force_best(spec, max_steps=3)
print(f"\nbrute-force oracle: best reachable latency {best} ms via {' -> '.join(order)}")

print("\nthe gate sees the same thing through the runner protocol:")
config = GateConfig(reps=9)
good = validate(spec.state(["tile"]), spec, config, SimRunner())
bad = validate(spec.state(["tile", "pipeline"]), spec, config, SimRunner())
print(f"  {{tile}}:           status={good.status.value}, latency={good.latency_ms} ms")
print(f"  {{tile, pipeline}}: status={bad.status.value} (pipeline needs vectorize)")
