"""The online optimization loop: retrieve, materialize, gate, meter.

One logical session per workload.  Every submission is one skill
materialized on the current best surface by the rewriter and judged by the
same gate used offline.  Token costs are charged against a hard dollar cap
with exact decimal arithmetic; a spend that would cross the cap is refused
before it is committed and the session closes cleanly.

Skill selection is greedy by retrieval rank with a hard precondition check
at materialization time, one skill per submission.  Selection is isolated
behind :class:`SkillSelector` so the search policy can be swapped; the
``generated-only`` ablation replaces it with seeded-random proposals over
label-only skills.
"""

from __future__ import annotations

import logging
import random
import re
import time
from dataclasses import dataclass, field, replace
from decimal import Decimal
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .errors import (
    BudgetExceeded,
    InvariantViolation,
    MaterializationParseError,
    ProtocolError,
    RewriterError,
)
from .gate import Gate, GateConfig, Runner
from .library import RetrievalTarget, ScoredSkill, retrieve, serialize_skillcard_prompt
from .model import (
    AnchorPattern,
    Carrier,
    CarrierKind,
    GateStatus,
    KernelState,
    Role,
    SkillCard,
    SkillStatus,
)
from .registry import Registry

log = logging.getLogger(__name__)

_MILLION = Decimal(1_000_000)


@dataclass(frozen=True)
class PriceTable:
    """Dollars per million tokens, kept as exact decimals."""

    input: Decimal = Decimal("5.00")
    cached_input: Decimal = Decimal("0.50")
    output: Decimal = Decimal("15.00")

    @classmethod
    def from_config(cls, data: Mapping[str, Any]) -> "PriceTable":
        return cls(
            input=Decimal(str(data.get("input", "5.00"))),
            cached_input=Decimal(str(data.get("cached_input", "0.50"))),
            output=Decimal(str(data.get("output", "15.00"))),
        )


@dataclass(frozen=True)
class CostEvent:
    input_tokens: int
    cached_input_tokens: int
    output_tokens: int
    prices: PriceTable

    def __post_init__(self) -> None:
        if min(self.input_tokens, self.cached_input_tokens, self.output_tokens) < 0:
            raise InvariantViolation("token counts must be non-negative")

    @property
    def dollars(self) -> Decimal:
        return (
            self.input_tokens * self.prices.input
            + self.cached_input_tokens * self.prices.cached_input
            + self.output_tokens * self.prices.output
        ) / _MILLION


class BudgetMeter:
    """Hard dollar cap with refuse-before-commit semantics."""

    def __init__(self, cap: Decimal):
        if cap <= 0:
            raise InvariantViolation("budget cap must be positive")
        self.cap = cap
        self.spent = Decimal("0")
        self.events: list[CostEvent] = []

    def charge(self, event: CostEvent) -> Decimal:
        """Commit one spend; raises BudgetExceeded (uncommitted) past the cap."""
        would_be = self.spent + event.dollars
        if would_be > self.cap:
            raise BudgetExceeded(
                f"charging {event.dollars} would raise spend to {would_be} > cap {self.cap}"
            )
        self.spent = would_be
        self.events.append(event)
        return self.spent


class SessionStatus:
    ACTIVE = "active"
    BUDGET_EXHAUSTED = "budget_exhausted"
    SATURATED = "saturated"
    DONE = "done"


@dataclass(frozen=True)
class TrajectoryStep:
    state_id: str
    skill_id: str
    action: str
    verdict: str  # valid | wrapper | failed | non_improving
    latency_ms: float | None
    speedup: float | None
    cumulative_dollars: Decimal
    hint: str = ""

    def to_event(self) -> dict[str, Any]:
        return {
            "state_id": self.state_id,
            "skill_id": self.skill_id,
            "action": self.action,
            "verdict": self.verdict,
            "latency_ms": self.latency_ms,
            "speedup": self.speedup,
            "cumulative_dollars": str(self.cumulative_dollars),
            "hint": self.hint,
        }


@dataclass
class SessionState:
    workload_id: str
    root_id: str
    prefix_tokens: int = 0
    trajectory: list[TrajectoryStep] = field(default_factory=list)
    running_best_latency: float | None = None
    running_best_id: str | None = None
    status: str = SessionStatus.ACTIVE

    def record(self, step: TrajectoryStep) -> None:
        if self.trajectory and step.cumulative_dollars < self.trajectory[-1].cumulative_dollars:
            raise InvariantViolation("cumulative dollars must be non-decreasing along the trajectory")
        self.trajectory.append(step)

    def improve(self, state_id: str, latency_ms: float) -> None:
        if self.running_best_latency is not None and latency_ms > self.running_best_latency:
            raise InvariantViolation("running best latency must be non-increasing")
        self.running_best_latency = latency_ms
        self.running_best_id = state_id


@dataclass
class MaterializeConfig:
    budget_cap: Decimal = Decimal("10.00")
    prices: PriceTable = field(default_factory=PriceTable)
    gate: GateConfig = field(default_factory=GateConfig)
    max_submissions: int = 32
    retrieval_k: int = 4
    saturation_patience: int = 3  # consecutive non-improving valid submissions
    ablation: str | None = None  # None | "generated-only"
    ablation_seed: int = 0


# ---------------------------------------------------------------------------
# rewriter endpoints
# ---------------------------------------------------------------------------

_CODE_BLOCK = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


class RewriterEndpoint(Protocol):
    def run(self, request: Mapping[str, Any]) -> Mapping[str, Any]: ...


def extract_code_block(text: str) -> str:
    """Pull the code payload out of a chat response.

    Responses often restate the original before the edit, so with several
    blocks the last one is taken (and the ambiguity is logged).
    """
    blocks = _CODE_BLOCK.findall(text)
    if not blocks:
        raise MaterializationParseError("response carried no fenced code block")
    if len(blocks) > 1:
        log.warning("rewriter response carried %d code blocks; taking the last", len(blocks))
    return blocks[-1]


class HttpRewriter:
    """Chat-completion rewriter over HTTP.

    The stable session prefix (serialized lineages and skill cards) rides in
    front of the per-step suffix so providers can prefix-cache it.  Transport
    failures are retried twice with backoff, then surface as RewriterError.
    The API key is read from the environment, never from config files.
    """

    def __init__(
        self,
        url: str,
        model: str = "",
        api_key_env: str = "DEOPTKIT_API_KEY",
        post_fn: Callable[..., Any] | None = None,
        backoff_s: float = 1.0,
    ):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self.backoff_s = backoff_s
        if post_fn is None:
            import requests

            post_fn = requests.post
        self._post = post_fn

    def run(self, request: Mapping[str, Any]) -> dict[str, Any]:
        import os

        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = {
            "model": self.model,
            "messages": [
                {"role": "user", "content": request.get("prefix", "") + request.get("suffix", "")}
            ],
        }
        last_error: Exception | None = None
        for attempt in range(3):
            try:
                http_response = self._post(self.url, json=payload, headers=headers, timeout=120)
                data = http_response.json()
                break
            except Exception as exc:  # transport or JSON failure
                last_error = exc
                if attempt < 2:
                    time.sleep(self.backoff_s * (attempt + 1))
        else:
            raise RewriterError(f"transport failed after 3 attempts: {last_error}")
        try:
            text = data["choices"][0]["message"]["content"]
            usage = data.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat-completion response: {exc}") from exc
        source = extract_code_block(text)
        cached = int(usage.get("cached_input_tokens", usage.get("prompt_tokens_cached", 0)))
        return {
            "ok": True,
            "source_text": source,
            "usage": {
                "input_tokens": max(int(usage.get("prompt_tokens", 0)) - cached, 0),
                "cached_input_tokens": cached,
                "output_tokens": int(usage.get("completion_tokens", 0)),
            },
        }


def rewriter_call(
    request: Mapping[str, Any],
    endpoint: RewriterEndpoint,
    meter: BudgetMeter,
    prices: PriceTable,
    prefix_tokens: int = 0,
    prefix_cached: bool = False,
) -> tuple[dict[str, Any], CostEvent]:
    """One rewriter exchange, charged against the meter.

    The session's stable prefix bills at the input price on the first call of
    a session and at the cached price afterwards (unless the endpoint already
    reports cached usage itself).
    """
    response = dict(endpoint.run(request))
    if not response.get("ok"):
        raise RewriterError(response.get("detail", "rewriter returned not-ok"))
    usage = dict(response.get("usage", {}))
    input_tokens = int(usage.get("input_tokens", 0))
    cached_tokens = int(usage.get("cached_input_tokens", 0))
    if prefix_tokens and cached_tokens == 0:
        if prefix_cached:
            cached_tokens += prefix_tokens
        else:
            input_tokens += prefix_tokens
    event = CostEvent(
        input_tokens=input_tokens,
        cached_input_tokens=cached_tokens,
        output_tokens=int(usage.get("output_tokens", 0)),
        prices=prices,
    )
    meter.charge(event)
    return response, event


# ---------------------------------------------------------------------------
# skill selection policies
# ---------------------------------------------------------------------------


class SkillSelector(Protocol):
    def select(
        self,
        pool: Sequence[ScoredSkill],
        current: KernelState,
        attempted: set[str],
    ) -> SkillCard | None: ...


class GreedySelector:
    """Highest-ranked un-attempted skill whose preconditions are satisfied.

    This is the hard precondition check at materialization time: required
    prior actions must be a subset of the current best's applied set and no
    forbidden action may be present.
    """

    def select(
        self, pool: Sequence[ScoredSkill], current: KernelState, attempted: set[str]
    ) -> SkillCard | None:
        applied = set(current.applied_actions)
        for entry in pool:
            skill = entry.skill
            if skill.id in attempted:
                continue
            if skill.action_category and skill.action_category in applied:
                continue
            if not set(skill.required_actions) <= applied:
                continue
            if set(skill.scope.prior_actions_forbidden) & applied:
                continue
            return skill
        return None


class RandomAblationSelector:
    """Seeded-random proposals over label-only skills (generated-only mode).

    With preconditions stripped there is nothing to order by, so any skill
    whose action is not yet applied may be proposed, including ones that
    already failed; the gate is the only filter left.
    """

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def select(
        self, pool: Sequence[ScoredSkill], current: KernelState, attempted: set[str]
    ) -> SkillCard | None:
        applied = set(current.applied_actions)
        candidates = [e.skill for e in pool if e.skill.action_category not in applied]
        if not candidates:
            return None
        candidates.sort(key=lambda s: s.id)
        return self.rng.choice(candidates)


def strip_for_generated_only(cards: Iterable[SkillCard]) -> list[SkillCard]:
    """Remove all lineage-derived fields except the intent label.

    Anchors, carriers, preconditions, and risks are dropped; evidence ids and
    scope stay so retrieval still works, but nothing tells the agent where,
    how, or when to apply the action.
    """
    stripped = []
    for card in cards:
        stripped.append(
            replace(
                card,
                anchor=AnchorPattern(structural_tag="other", symbol_glob="*"),
                carrier=Carrier(kind=CarrierKind.NL_ANNOTATION, body=card.intent.name),
                pre=(),
                risk=(),
                scope=replace(card.scope, prior_actions_required=()),
            )
        )
    return stripped


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def _risk_hint(skill: SkillCard, failure: str) -> str:
    for risk in skill.risk:
        if risk.observed_failure.value == failure:
            return risk.violated_precondition
    return ""


def _speedup_against(reference: float | None, latency: float | None) -> float | None:
    if reference is None or latency is None or latency <= 0:
        return None
    return reference / latency


def optimize(
    case: Any,
    root: KernelState,
    skills: Sequence[SkillCard],
    rewriter: RewriterEndpoint,
    runner: Runner,
    config: MaterializeConfig,
    registry: Registry,
    session_id: str = "session",
    event_sink: Callable[[dict[str, Any]], None] | None = None,
) -> SessionState:
    """Run one budget-metered optimization session from ``root``.

    The root may be a compiler baseline, a partially optimized attempt, or a
    previous best; an invalid root is allowed and simply never counts as the
    running best.  The loop ends at budget exhaustion, saturation (no
    applicable un-attempted skill, or ``saturation_patience`` consecutive
    non-improving valid submissions), or ``max_submissions``.
    """
    gate = Gate(config.gate)
    meter = BudgetMeter(config.budget_cap)
    case_payload = case.to_case_spec() if hasattr(case, "to_case_spec") else dict(case)
    reference = case_payload.get("reference_latency")

    pool_skills = list(skills)
    if config.ablation == "generated-only":
        pool_skills = strip_for_generated_only(pool_skills)
        selector: SkillSelector = RandomAblationSelector(config.ablation_seed)
    else:
        selector = GreedySelector()

    admitted = [s for s in pool_skills if s.status is SkillStatus.ADMITTED]
    prompt_prefix = "".join(serialize_skillcard_prompt(s) for s in admitted)
    prefix_tokens = max(len(prompt_prefix) // 4, 1)

    if root.validation is None:
        root = root.with_validation(gate.validate(root, case, runner))
    session = SessionState(workload_id=str(case_payload.get("case_id", "")), root_id=root.id,
                           prefix_tokens=prefix_tokens)
    current = root
    if root.is_valid:
        session.improve(root.id, root.latency_ms)  # type: ignore[arg-type]

    def emit(step: TrajectoryStep) -> None:
        session.record(step)
        if event_sink is not None:
            event = step.to_event()
            event["session_id"] = session_id
            event_sink(event)

    attempted: set[str] = set()
    non_improving = 0
    first_call = True

    while session.status == SessionStatus.ACTIVE:
        if len(session.trajectory) >= config.max_submissions:
            session.status = SessionStatus.DONE
            break

        target = RetrievalTarget(
            case_id=current.case_id,
            language=current.language,
            platform=current.platform,
            applied_actions=current.applied_actions,
        )
        skill = None
        k = config.retrieval_k
        while skill is None:
            pool = retrieve(target, k, admitted, registry)
            skill = selector.select(pool, current, attempted)
            if skill is not None or k >= len(admitted):
                break
            k = min(k * 2, max(len(admitted), 1))  # widen before declaring saturation
        if skill is None:
            session.status = SessionStatus.SATURATED
            break

        request = {
            "kind": "materialize",
            "action": skill.action_category,
            "carrier": skill.carrier.to_dict(),
            "anchor": skill.anchor.to_dict(),
            "source_text": current.source_text,
            "case_spec": case_payload,
            "prefix": prompt_prefix,
            "suffix": f"apply skill {skill.intent.name} to:\n{current.source_text}",
        }
        try:
            response, _ = rewriter_call(
                request, rewriter, meter, config.prices, prefix_tokens, prefix_cached=not first_call
            )
        except BudgetExceeded:
            session.status = SessionStatus.BUDGET_EXHAUSTED
            break
        except (RewriterError, MaterializationParseError, ProtocolError) as exc:
            # No candidate reached the gate; the skill stays eligible for a
            # retry, each retry consuming one submission slot.
            emit(
                TrajectoryStep(
                    state_id="",
                    skill_id=skill.id,
                    action=skill.action_category,
                    verdict="failed",
                    latency_ms=None,
                    speedup=None,
                    cumulative_dollars=meter.spent,
                    hint=f"rewriter error: {exc}",
                )
            )
            continue
        first_call = False

        candidate = KernelState.create(
            source_text=response["source_text"],
            language=current.language,
            platform=current.platform,
            case_id=current.case_id,
            applied_actions=tuple(sorted(set(current.applied_actions) | {skill.action_category})),
            role=Role.CANDIDATE,
        )
        record = gate.validate(candidate, case, runner)
        candidate = candidate.with_validation(record)
        attempted.add(skill.id)

        measured = record.latency_ms
        if measured is None:
            measured = record.extra.get("measured_latency_ms")
        if record.status is GateStatus.VALID:
            assert record.latency_ms is not None
            if session.running_best_latency is None or record.latency_ms < session.running_best_latency:
                session.improve(candidate.id, record.latency_ms)
                current = candidate
                non_improving = 0
                verdict = "valid"
            else:
                non_improving += 1
                verdict = "non_improving"
            emit(
                TrajectoryStep(
                    state_id=candidate.id,
                    skill_id=skill.id,
                    action=skill.action_category,
                    verdict=verdict,
                    latency_ms=record.latency_ms,
                    speedup=_speedup_against(reference, record.latency_ms),
                    cumulative_dollars=meter.spent,
                )
            )
            if non_improving >= config.saturation_patience:
                session.status = SessionStatus.SATURATED
        else:
            verdict = "wrapper" if record.status is GateStatus.WRAPPER else "failed"
            failure = record.status.value
            emit(
                TrajectoryStep(
                    state_id=candidate.id,
                    skill_id=skill.id,
                    action=skill.action_category,
                    verdict=verdict,
                    latency_ms=measured,
                    speedup=_speedup_against(reference, measured),
                    cumulative_dollars=meter.spent,
                    hint=_risk_hint(skill, failure),
                )
            )

    if session.status == SessionStatus.ACTIVE:
        session.status = SessionStatus.DONE
    return session
