from __future__ import annotations

import pytest

from deoptkit.deopt import (
    DeoptConfig,
    apply_backward,
    induce_lineage,
    operationalize_forward,
    propose_simplifications,
    replay_lineage,
)
from deoptkit.errors import ExpertInvalid, GateTimeout, NothingToRemove
from deoptkit.gate import GateConfig, validate
from deoptkit.lift import aggregate_transitions
from deoptkit.model import FailureKind, GateStatus, KernelState, RiskEvidence, Role
from deoptkit.simdomain import (
    LatticeAction,
    LatticeSpec,
    SimRewriter,
    SimRunner,
    TableSpec,
    demo_lattice,
)

from conftest import FAST_GATE, make_deopt_config

# Recorded deoptimization chain for a strided-scan kernel: four optimizations
# peeled off one at a time, with the shared-memory transpose carrying almost
# all of the win.
CUMSUM_ACTIONS = ("block_parallelism", "smem_transpose", "warp_shuffle_scan", "vectorize_global")
CUMSUM_TABLE = TableSpec(
    case_id="cumsum",
    states=(
        (frozenset(), 0.035),
        (frozenset({"block_parallelism"}), 0.034),
        (frozenset({"block_parallelism", "smem_transpose"}), 0.012),
        (frozenset({"block_parallelism", "smem_transpose", "warp_shuffle_scan"}), 0.012),
        (frozenset(CUMSUM_ACTIONS), 0.011),
    ),
)


def validated(spec, actions, role=Role.CANDIDATE):
    state = spec.state(actions, role=role)
    return state.with_validation(validate(state, spec, FAST_GATE, SimRunner()))


class TestProposeSimplifications:
    def test_dependency_aware_order(self, chain_spec):
        state = validated(chain_spec, ["tile", "vectorize"])
        proposals = propose_simplifications(state, chain_spec.registry())
        assert [p.action_category for p in proposals] == ["vectorize", "tile"]
        assert [p.soft_order_rank for p in proposals] == [0, 1]

    def test_single_action(self, chain_spec):
        state = validated(chain_spec, ["tile"])
        proposals = propose_simplifications(state, chain_spec.registry())
        assert [p.action_category for p in proposals] == ["tile"]

    def test_reverse_application_order_tie_break(self, chain_spec):
        source = "sim kernel\ncase=x\n"
        state = KernelState.create(source, "sim", "sim", "x", applied_actions=("a", "b"))
        proposals = propose_simplifications(state, chain_spec.registry())
        assert [p.action_category for p in proposals] == ["b", "a"]

    def test_order_violators_included_last_never_filtered(self, chain_spec):
        state = validated(chain_spec, ["tile", "vectorize", "pipeline"])
        proposals = propose_simplifications(state, chain_spec.registry())
        assert [p.action_category for p in proposals] == ["pipeline", "vectorize", "tile"]
        assert "order-violating" in proposals[-1].rationale

    def test_empty_state_raises(self, chain_spec):
        state = chain_spec.state([])
        with pytest.raises(NothingToRemove):
            propose_simplifications(state, chain_spec.registry())


class TestApplyBackward:
    def test_accepted_removal(self, chain_spec):
        config = make_deopt_config(chain_spec)
        state = validated(chain_spec, ["tile", "vectorize"])
        proposal = propose_simplifications(state, chain_spec.registry())[0]
        outcome = apply_backward(state, proposal, config, chain_spec)
        assert isinstance(outcome, KernelState)
        assert outcome.applied_actions == ("tile",)
        assert outcome.latency_ms == 500.0  # base x 0.5

    def test_precondition_violation_yields_risk(self, chain_spec):
        config = make_deopt_config(chain_spec)
        state = validated(chain_spec, ["tile", "vectorize"])
        proposal = [
            p for p in propose_simplifications(state, chain_spec.registry())
            if p.action_category == "tile"
        ][0]
        outcome = apply_backward(state, proposal, config, chain_spec)
        assert isinstance(outcome, RiskEvidence)
        assert outcome.observed_failure is FailureKind.INCORRECT
        assert "tile" in outcome.violated_precondition
        assert outcome.missing_actions == ("tile",)
        assert outcome.source_state_id == state.id

    def test_faster_simplification_rejected_as_inverted(self):
        # Removing the action "speeds up" the program: implausible, rejected.
        inverted = TableSpec(case_id="inv", states=((frozenset(), 5.0), (frozenset({"a"}), 10.0)))
        config = make_deopt_config(demo_lattice())
        state = validated(inverted, ["a"])
        proposal = propose_simplifications(state, config.registry)[0]
        outcome = apply_backward(state, proposal, config, inverted)
        assert isinstance(outcome, RiskEvidence)
        assert outcome.observed_failure is FailureKind.SLOWER

    def test_rewriter_failure_counts_as_rejection(self, chain_spec):
        class BrokenRewriter:
            def run(self, request):
                return {"ok": False, "detail": "no can do"}

        config = make_deopt_config(chain_spec, rewriter=BrokenRewriter())
        state = validated(chain_spec, ["tile"])
        proposal = propose_simplifications(state, chain_spec.registry())[0]
        outcome = apply_backward(state, proposal, config, chain_spec)
        assert isinstance(outcome, RiskEvidence)
        assert "rewriter error" in outcome.violated_precondition


class TestOperationalizeForward:
    def test_effect_ratio(self, chain_spec):
        config = make_deopt_config(chain_spec)
        k_prev = validated(chain_spec, ["tile"])
        k_next = validated(chain_spec, ["tile", "vectorize"])
        proposal = [
            p for p in propose_simplifications(k_next, chain_spec.registry())
            if p.action_category == "vectorize"
        ][0]
        transition = operationalize_forward(
            k_prev, k_next, "vectorize", proposal.locus, config, chain_spec
        )
        assert transition.effect.latency_ratio == pytest.approx(1.25)
        assert transition.from_state_id == k_prev.id
        assert transition.to_state_id == k_next.id
        assert transition.validation_match is True

    def test_gate_timeout_retried_once(self, chain_spec):
        class FlakyRunner:
            def __init__(self):
                self.calls = 0
                self.inner = SimRunner()

            def run(self, request):
                self.calls += 1
                if self.calls == 1:
                    raise GateTimeout("slow runner")
                return self.inner.run(request)

        config = make_deopt_config(chain_spec, runner=FlakyRunner())
        state = validated(chain_spec, ["tile", "vectorize"])
        proposal = propose_simplifications(state, chain_spec.registry())[0]
        outcome = apply_backward(state, proposal, config, chain_spec)
        assert isinstance(outcome, KernelState)


class TestInduceLineage:
    def test_three_action_chain(self, chain_spec):
        config = make_deopt_config(chain_spec)
        result = induce_lineage(chain_spec.expert_state(), chain_spec, config)
        lineage = result.lineage
        assert len(lineage.states) == 4 and len(lineage.transitions) == 3
        assert [s.latency_ms for s in lineage.states] == [1000.0, 500.0, 400.0, 280.0]
        assert [t.action_category for t in lineage.transitions] == ["tile", "vectorize", "pipeline"]
        assert lineage.states[0].role is Role.NAIVE
        assert lineage.states[-1].role is Role.EXPERT
        assert not result.empty
        assert result.risks == ()

    def test_applied_actions_chain_invariant(self, chain_spec):
        config = make_deopt_config(chain_spec)
        lineage = induce_lineage(chain_spec.expert_state(), chain_spec, config).lineage
        for i, t in enumerate(lineage.transitions):
            before = set(lineage.states[i].applied_actions)
            after = set(lineage.states[i + 1].applied_actions)
            assert before | {t.action_category} == after

    def test_forward_replay_reproduces_ids_and_latencies(self, chain_spec):
        config = make_deopt_config(chain_spec)
        lineage = induce_lineage(chain_spec.expert_state(), chain_spec, config).lineage
        replay_lineage(lineage, config, chain_spec)  # raises on any mismatch

    def test_expert_without_actions_is_empty_lineage(self, chain_spec):
        config = make_deopt_config(chain_spec)
        expert = chain_spec.state([], role=Role.EXPERT)
        result = induce_lineage(expert, chain_spec, config)
        assert result.empty
        assert len(result.lineage.states) == 1
        assert result.lineage.states[0].role is Role.EXPERT

    def test_invalid_expert_aborts(self, chain_spec):
        config = make_deopt_config(chain_spec)
        bad = chain_spec.state(["vectorize"], role=Role.EXPERT)  # missing tile
        with pytest.raises(ExpertInvalid):
            induce_lineage(bad, chain_spec, config)

    def test_non_expert_role_aborts(self, chain_spec):
        config = make_deopt_config(chain_spec)
        with pytest.raises(ExpertInvalid):
            induce_lineage(chain_spec.state(["tile"]), chain_spec, config)

    def test_every_rejection_yields_exactly_one_risk(self):
        # b truly requires a, but the declared soft order claims the reverse,
        # so the walk tries removing a first and collects one rejection.
        spec = LatticeSpec(
            case_id="rr", base_latency=100.0,
            actions=(LatticeAction("a", 0.5), LatticeAction("b", 0.5, frozenset({"a"}))),
        )
        wrong_order = {"a": frozenset({"b"}), "b": frozenset()}
        config = make_deopt_config(spec, soft_order=wrong_order)
        result = induce_lineage(spec.expert_state(), spec, config)
        rejects = [e for e in result.events if e["event"] == "reject"]
        assert len(rejects) == len(result.risks) == 1
        assert len(result.lineage.transitions) == 2
        lineage_actions = {t.action_category for t in result.lineage.transitions}
        assert not any(r.action_category in lineage_actions and r.source_state_id == s.id
                       for r in result.risks for s in result.lineage.states[:1])

    def test_soft_order_is_advisory_violating_transition_kept(self):
        # The lattice truly has a requiring b; the declared soft order wrongly
        # claims b requires a.  Removing a violates the declared order but
        # passes the gate, so its inverse transition is kept.
        spec = LatticeSpec(
            case_id="soft", base_latency=100.0,
            actions=(LatticeAction("a", 0.5, frozenset({"b"})), LatticeAction("b", 0.8)),
        )
        wrong_order = {"a": frozenset(), "b": frozenset({"a"})}
        config = make_deopt_config(spec, soft_order=wrong_order)
        result = induce_lineage(spec.expert_state(), spec, config)
        actions = [t.action_category for t in result.lineage.transitions]
        assert "a" in actions  # the order-violating inverse made it in
        assert len(result.lineage.states) == 3
        assert any(r.action_category == "b" for r in result.risks)  # remove-b was rejected

    def test_monotone_plausibility_along_lineage(self, chain_spec):
        config = make_deopt_config(chain_spec)
        lineage = induce_lineage(chain_spec.expert_state(), chain_spec, config).lineage
        slack = config.plausibility_slack
        for earlier, later in zip(lineage.states, lineage.states[1:]):
            assert earlier.latency_ms >= later.latency_ms * (1 - slack)

    def test_forward_derivation_failure_discards_backward_step(self, chain_spec):
        class BackwardOnlyRewriter:
            def __init__(self):
                self.inner = SimRewriter()

            def run(self, request):
                if request["kind"] == "forward_add":
                    return {"ok": False, "detail": "cannot re-derive"}
                return self.inner.run(request)

        config = make_deopt_config(chain_spec, rewriter=BackwardOnlyRewriter())
        result = induce_lineage(chain_spec.expert_state(), chain_spec, config)
        assert result.empty  # nothing stayed executable
        assert any("forward re-derivation failed" in r.violated_precondition for r in result.risks)
        rejects = [e for e in result.events if e["event"] == "reject"]
        assert len(rejects) == len(result.risks)

    def test_max_steps_caps_the_walk(self, chain_spec):
        config = make_deopt_config(chain_spec, max_steps=1)
        result = induce_lineage(chain_spec.expert_state(), chain_spec, config)
        assert len(result.lineage.transitions) == 1


class TestRecordedChainReplay:
    """Scripted replay of a recorded four-step deoptimization chain."""

    def induce(self):
        config = make_deopt_config(demo_lattice())
        expert = CUMSUM_TABLE.state(CUMSUM_ACTIONS, role=Role.EXPERT)
        return induce_lineage(expert, CUMSUM_TABLE, config), config

    def test_chain_shape_and_latencies(self):
        result, _ = self.induce()
        lineage = result.lineage
        assert len(lineage.transitions) == 4
        assert [s.latency_ms for s in lineage.states] == [0.035, 0.034, 0.012, 0.012, 0.011]

    def test_smem_transpose_effect_ratio(self):
        result, _ = self.induce()
        by_action = {t.action_category: t for t in result.lineage.transitions}
        ratio = by_action["smem_transpose"].effect.latency_ratio
        assert ratio == pytest.approx(2.8333, abs=0.01)

    def test_smem_transpose_gets_largest_bucket(self):
        result, _ = self.induce()
        clusters = aggregate_transitions(result.lineage.transitions)
        buckets = {c.action_category: max(t.effect.ratio_bucket for t in c.members) for c in clusters}
        best = max(buckets, key=lambda a: buckets[a])
        assert best == "smem_transpose"
        assert buckets["smem_transpose"] == 3

    def test_replay_is_exact(self):
        result, config = self.induce()
        replay_lineage(result.lineage, config, CUMSUM_TABLE)
