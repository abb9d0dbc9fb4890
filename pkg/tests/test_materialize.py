from __future__ import annotations

from dataclasses import replace
from decimal import Decimal

import pytest
from hypothesis import given, settings, strategies as st

from deoptkit.errors import BudgetExceeded, MaterializationParseError, RewriterError
from deoptkit.materialize import (
    BudgetMeter,
    CostEvent,
    GreedySelector,
    HttpRewriter,
    MaterializeConfig,
    PriceTable,
    SessionStatus,
    extract_code_block,
    optimize,
    rewriter_call,
    strip_for_generated_only,
)
from deoptkit.model import GateStatus, SkillStatus
from deoptkit.simdomain import (
    SimRewriter,
    SimRunner,
    TableSpec,
    encode_source,
    generate_random_lattice,
)

from conftest import FAST_GATE, run_pipeline

PRICES = PriceTable(input=Decimal("5.00"), cached_input=Decimal("0.50"), output=Decimal("15.00"))


def fast_config(**overrides) -> MaterializeConfig:
    defaults = dict(gate=FAST_GATE, prices=PRICES, budget_cap=Decimal("10.00"))
    defaults.update(overrides)
    return MaterializeConfig(**defaults)


class TestCostEvent:
    def test_input_pricing_exact(self):
        event = CostEvent(1_000_000, 0, 0, PRICES)
        assert event.dollars == Decimal("5.00")

    def test_cached_pricing_exact(self):
        event = CostEvent(0, 2_000_000, 0, PRICES)
        assert event.dollars == Decimal("1.00")

    def test_mixed_pricing_is_exact_decimal(self):
        event = CostEvent(123_456, 789_012, 34_567, PRICES)
        expected = (
            Decimal(123_456) * Decimal("5.00")
            + Decimal(789_012) * Decimal("0.50")
            + Decimal(34_567) * Decimal("15.00")
        ) / Decimal(1_000_000)
        assert event.dollars == expected


class TestBudgetMeter:
    def test_refuses_before_commit(self):
        meter = BudgetMeter(Decimal("10.00"))
        for _ in range(3):
            meter.charge(CostEvent(666_000, 0, 0, PRICES))  # 3.33 each
        assert meter.spent == Decimal("9.99")
        with pytest.raises(BudgetExceeded):
            meter.charge(CostEvent(4_000, 0, 0, PRICES))  # 0.02 would exceed
        assert meter.spent == Decimal("9.99")  # spend not committed

    def test_exact_cap_allowed(self):
        meter = BudgetMeter(Decimal("10.00"))
        meter.charge(CostEvent(2_000_000, 0, 0, PRICES))  # exactly 10.00
        assert meter.spent == Decimal("10.00")

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(st.tuples(st.integers(0, 500_000), st.integers(0, 500_000), st.integers(0, 100_000)),
                 max_size=20),
        st.decimals(min_value="0.01", max_value="20.00", places=2),
    )
    def test_budget_safety_property(self, token_stream, cap):
        meter = BudgetMeter(Decimal(cap))
        for tokens in token_stream:
            try:
                meter.charge(CostEvent(*tokens, prices=PRICES))
            except BudgetExceeded:
                pass
            assert meter.spent <= meter.cap


class TestRewriterCall:
    def test_prefix_billed_then_cached(self):
        meter = BudgetMeter(Decimal("10.00"))
        request = {"kind": "materialize", "action": "tile",
                   "source_text": encode_source("c1", [])}
        _, first = rewriter_call(request, SimRewriter(), meter, PRICES, prefix_tokens=10_000)
        _, second = rewriter_call(request, SimRewriter(), meter, PRICES, prefix_tokens=10_000,
                                  prefix_cached=True)
        assert first.input_tokens == second.input_tokens + 10_000
        assert first.cached_input_tokens == 0
        assert second.cached_input_tokens == 10_000
        assert first.dollars > second.dollars

    def test_not_ok_raises(self):
        class Broken:
            def run(self, request):
                return {"ok": False, "detail": "nope"}

        with pytest.raises(RewriterError):
            rewriter_call({}, Broken(), BudgetMeter(Decimal("1")), PRICES)


class TestCodeBlockParsing:
    def test_single_block(self):
        assert extract_code_block("before\n```c\nkernel body\n```\nafter") == "kernel body\n"

    def test_two_blocks_takes_last_with_warning(self, caplog):
        import logging

        text = "original:\n```\nold\n```\nedited:\n```\nnew\n```\n"
        with caplog.at_level(logging.WARNING):
            assert extract_code_block(text) == "new\n"
        assert "taking the last" in caplog.text

    def test_missing_block_raises(self):
        with pytest.raises(MaterializationParseError):
            extract_code_block("no code here")


class TestHttpRewriter:
    def _response(self, text, prompt=100, completion=20, cached=0):
        class FakeResponse:
            def __init__(self, payload):
                self._payload = payload

            def json(self):
                return self._payload

        return FakeResponse(
            {
                "choices": [{"message": {"content": text}}],
                "usage": {"prompt_tokens": prompt, "completion_tokens": completion,
                          "cached_input_tokens": cached},
            }
        )

    def test_parses_content_and_usage(self):
        posts = []

        def post(url, json=None, headers=None, timeout=None):
            posts.append(json)
            return self._response("```\nsim kernel\ncase=c1\naction tile\n```", cached=40)

        rewriter = HttpRewriter("http://rewriter.local/v1", post_fn=post, backoff_s=0)
        result = rewriter.run({"prefix": "P", "suffix": "S"})
        assert result["ok"]
        assert result["source_text"].startswith("sim kernel")
        assert result["usage"] == {"input_tokens": 60, "cached_input_tokens": 40, "output_tokens": 20}
        assert posts[0]["messages"][0]["content"] == "PS"

    def test_transport_retried_then_fails(self):
        calls = []

        def post(url, json=None, headers=None, timeout=None):
            calls.append(url)
            raise ConnectionError("down")

        rewriter = HttpRewriter("http://x", post_fn=post, backoff_s=0)
        with pytest.raises(RewriterError):
            rewriter.run({"suffix": "s"})
        assert len(calls) == 3

    def test_missing_code_block_raises(self):
        rewriter = HttpRewriter(
            "http://x", post_fn=lambda *a, **k: self._response("plain prose"), backoff_s=0
        )
        with pytest.raises(MaterializationParseError):
            rewriter.run({"suffix": "s"})


class TestOptimize:
    def test_naive_root_reaches_expert(self, chain_spec, chain_pipeline):
        _, cards, _ = chain_pipeline
        session = optimize(
            chain_spec, chain_spec.state([]), cards, SimRewriter(), SimRunner(),
            fast_config(max_submissions=8), chain_spec.registry(),
        )
        assert session.running_best_latency == pytest.approx(280.0)
        assert [s.action for s in session.trajectory[:3]] == ["tile", "vectorize", "pipeline"]
        assert session.status in (SessionStatus.SATURATED, SessionStatus.DONE)

    def test_partially_optimized_root_starts_at_vectorize(self, chain_spec, chain_pipeline):
        _, cards, _ = chain_pipeline
        session = optimize(
            chain_spec, chain_spec.state(["tile"]), cards, SimRewriter(), SimRunner(),
            fast_config(max_submissions=8), chain_spec.registry(),
        )
        assert session.trajectory[0].action == "vectorize"
        assert session.running_best_latency == pytest.approx(280.0)

    def test_precondition_safety_in_sim(self, chain_pipeline, chain_spec):
        _, cards, _ = chain_pipeline
        events = []
        session = optimize(
            chain_spec, chain_spec.state([]), cards, SimRewriter(), SimRunner(),
            fast_config(max_submissions=8), chain_spec.registry(),
            event_sink=events.append,
        )
        by_id = {c.id: c for c in cards}
        applied: set[str] = set()
        for event in events:
            card = by_id[event["skill_id"]]
            assert set(card.required_actions) <= applied
            if event["verdict"] == "valid":
                applied.add(event["action"])
        assert session.status != SessionStatus.BUDGET_EXHAUSTED

    def test_budget_exhaustion_closes_cleanly(self, chain_spec, chain_pipeline):
        _, cards, _ = chain_pipeline
        # roughly one sim call fits under 2 cents only
        session = optimize(
            chain_spec, chain_spec.state([]), cards, SimRewriter(), SimRunner(),
            fast_config(budget_cap=Decimal("0.02"), max_submissions=8), chain_spec.registry(),
        )
        assert session.status == SessionStatus.BUDGET_EXHAUSTED
        dollars = [s.cumulative_dollars for s in session.trajectory]
        assert dollars == sorted(dollars)
        assert all(d <= Decimal("0.02") for d in dollars)

    def test_invalid_root_never_counts_as_best(self, chain_spec, chain_pipeline):
        _, cards, _ = chain_pipeline
        invalid_root = chain_spec.state(["vectorize"])  # missing tile
        session = optimize(
            chain_spec, invalid_root, cards, SimRewriter(), SimRunner(),
            fast_config(max_submissions=4), chain_spec.registry(),
        )
        assert session.root_id == invalid_root.id
        for step in session.trajectory:
            if step.verdict in ("valid", "non_improving"):
                assert step.latency_ms is not None

    def test_saturation_after_three_non_improving(self):
        # Three independent actions; a no-op rewriter makes every valid
        # submission non-improving and trips the patience rule.
        from deoptkit.simdomain import LatticeAction, LatticeSpec

        spec = LatticeSpec(
            case_id="indep", base_latency=100.0,
            actions=(LatticeAction("a", 0.9), LatticeAction("b", 0.9), LatticeAction("c", 0.9)),
        )
        _, cards, _ = run_pipeline(spec)

        class NoopRewriter:
            def run(self, request):
                return {"ok": True, "source_text": request["source_text"],
                        "usage": {"input_tokens": 10, "output_tokens": 1}}

        session = optimize(
            spec, spec.state([]), cards, NoopRewriter(), SimRunner(),
            fast_config(max_submissions=16), spec.registry(),
        )
        assert session.status == SessionStatus.SATURATED
        tail = [s.verdict for s in session.trajectory[-3:]]
        assert tail == ["non_improving"] * 3

    def test_rewriter_error_counts_submission_failed_and_continues(self, chain_spec, chain_pipeline):
        _, cards, _ = chain_pipeline

        class FlakyRewriter:
            def __init__(self):
                self.calls = 0
                self.inner = SimRewriter()

            def run(self, request):
                self.calls += 1
                if self.calls == 1:
                    return {"ok": False, "detail": "transient"}
                return self.inner.run(request)

        session = optimize(
            chain_spec, chain_spec.state([]), cards, FlakyRewriter(), SimRunner(),
            fast_config(max_submissions=8), chain_spec.registry(),
        )
        assert session.trajectory[0].verdict == "failed"
        assert session.running_best_latency == pytest.approx(280.0)


WRAP_ACTION = "wrap_trick"
REAL_ACTION = "real_opt"


class ScriptedRewriter:
    """Materializes the real action normally; the wrap action emits a
    reference-delegating program with an attractive apparent latency."""

    def __init__(self, case_id, wrapper_latency):
        self.case_id = case_id
        self.wrapper_latency = wrapper_latency
        self.inner = SimRewriter()

    def run(self, request):
        if request["action"] == WRAP_ACTION:
            return {
                "ok": True,
                "source_text": encode_source(self.case_id, wrapper_latency=self.wrapper_latency),
                "usage": {"input_tokens": 100, "output_tokens": 10},
            }
        return self.inner.run(request)


class TestWrapperExclusion:
    def _setup(self):
        from deoptkit.registry import ActionInfo, default_registry

        from test_library import make_card

        case = TableSpec(
            case_id="wrapcase",
            states=((frozenset(), 200.0), (frozenset({REAL_ACTION}), 100.0)),
            reference_latency=90.0,
        )
        registry = default_registry()
        registry.register_action(ActionInfo(WRAP_ACTION, "other"))
        registry.register_action(ActionInfo(REAL_ACTION, "other"))
        wrap_card = make_card(
            intent="suspicious_speedup", action=WRAP_ACTION, cases=("wrapcase",),
            required=(), prior_sets=((),), admitted=True,
        )
        real_card = make_card(
            intent="honest_opt", action=REAL_ACTION, cases=("wrapcase", "elsewhere"),
            required=(), prior_sets=((),), admitted=True,
        )
        # diluted case overlap ranks the wrapper card first
        return case, registry, [wrap_card, real_card]

    def test_wrapper_never_updates_running_best(self):
        case, registry, cards = self._setup()
        events = []
        session = optimize(
            case, case.state([]), cards,
            ScriptedRewriter("wrapcase", wrapper_latency=93.75),  # 0.96x apparent
            SimRunner(), fast_config(max_submissions=4), registry,
            event_sink=events.append,
        )
        verdicts = [e["verdict"] for e in events]
        assert verdicts[0] == "wrapper"  # flagged as-submitted
        assert events[0]["speedup"] == pytest.approx(0.96)
        assert "valid" in verdicts
        assert session.running_best_latency == pytest.approx(100.0)  # 0.9x, not 0.96x
        best_speedup = case.reference_latency / session.running_best_latency
        assert best_speedup == pytest.approx(0.9)

    def test_gate_marks_wrapper_as_submitted(self):
        case, registry, cards = self._setup()
        from deoptkit.gate import validate
        from deoptkit.model import KernelState

        wrapper_state = KernelState.create(
            encode_source("wrapcase", wrapper_latency=93.75), "sim", "sim", "wrapcase"
        )
        record = validate(wrapper_state, case, FAST_GATE, SimRunner())
        assert record.status is GateStatus.WRAPPER


class TestGeneratedOnlyAblation:
    def test_strip_removes_guidance_fields(self, chain_pipeline):
        _, cards, _ = chain_pipeline
        stripped = strip_for_generated_only(cards)
        for card in stripped:
            assert card.pre == ()
            assert card.risk == ()
            assert card.carrier.body == card.intent.name
            assert card.status is SkillStatus.ADMITTED  # still retrievable

    def test_ablation_stalls_on_chained_lattice(self):
        # Depth-4 chain: random label-only proposals rarely find the order.
        spec = generate_random_lattice(3, 12, 4)
        _, cards, _ = run_pipeline(spec)
        session = optimize(
            spec, spec.state([]), cards, SimRewriter(), SimRunner(),
            fast_config(max_submissions=16, ablation="generated-only", ablation_seed=3),
            spec.registry(),
        )
        from deoptkit.simdomain import brute_force_best

        optimal, _ = brute_force_best(spec, 12)
        assert session.running_best_latency > optimal * 1.2  # stalled well above expert
        failed = [s for s in session.trajectory if s.verdict == "failed"]
        assert failed  # the gate caught precondition violations


class TestSessionInvariants:
    def test_running_best_monotone_and_costs_non_decreasing(self, chain_spec, chain_pipeline):
        _, cards, _ = chain_pipeline
        session = optimize(
            chain_spec, chain_spec.state([]), cards, SimRewriter(), SimRunner(),
            fast_config(max_submissions=8), chain_spec.registry(),
        )
        best = None
        for step in session.trajectory:
            if step.verdict == "valid":
                if best is not None:
                    assert step.latency_ms <= best
                best = step.latency_ms
        dollars = [s.cumulative_dollars for s in session.trajectory]
        assert dollars == sorted(dollars)
