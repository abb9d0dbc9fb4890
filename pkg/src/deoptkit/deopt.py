"""Guided deoptimization: walk an expert kernel backward through gate-checked
simplifications and store each accepted step as a re-derived forward edit.

The walk never trusts the rewriter.  A backward candidate enters the chain
only after the gate validates it and a plausibility check confirms the
simplified program is not faster than its successor; the inverse edit is
then re-derived forward and gated again, so every stored transition is an
executable forward primitive, not a syntactic inversion.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping

from .diffs import apply_diff, make_diff
from .errors import (
    ExpertInvalid,
    ForwardDerivationFailed,
    GateTimeout,
    InvariantViolation,
    NothingToRemove,
    RewriterError,
)
from .gate import Gate, GateConfig, Runner
from .model import (
    EffectSignature,
    FailureKind,
    ForwardTransition,
    GateStatus,
    KernelState,
    Lineage,
    Locus,
    RiskEvidence,
    Role,
)
from .registry import Registry

SoftOrder = Mapping[str, frozenset[str]]
EventSink = Callable[[dict[str, Any]], None]


@dataclass(frozen=True)
class SimplificationProposal:
    """One candidate backward step: remove ``action_category`` at ``locus``."""

    action_category: str
    locus: Locus
    rationale: str
    soft_order_rank: int


@dataclass
class DeoptConfig:
    rewriter: Any  # object with run(request) -> response dict
    runner: Runner
    registry: Registry
    gate: GateConfig = field(default_factory=GateConfig)
    max_steps: int = 64
    max_rejections_per_state: int = 5
    plausibility_slack: float = 0.05
    forward_retries: int = 3
    soft_order: SoftOrder | None = None
    event_sink: EventSink | None = None

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise InvariantViolation("DeoptConfig.max_steps must be >= 1")


@dataclass(frozen=True)
class InductionResult:
    lineage: Lineage
    risks: tuple[RiskEvidence, ...]
    events: tuple[dict[str, Any], ...]
    empty: bool  # zero accepted steps


def _action_locus(state: KernelState, action: str, registry: Registry) -> Locus:
    """Best-effort locus for an action inside a program text."""
    tag = registry.actions[action].structural_tag if registry.has_action(action) else "other"
    lines = state.source_text.splitlines()
    span = (1, max(len(lines), 1))
    for idx, line in enumerate(lines, start=1):
        if action in line:
            span = (idx, idx)
            break
    return Locus(file=f"kernel://{state.case_id}", symbol_path=action, line_span=span, structural_tag=tag)


def propose_simplifications(
    state: KernelState,
    action_registry: Registry,
    soft_order: SoftOrder | None = None,
) -> list[SimplificationProposal]:
    """Rank removable actions, dependents before dependencies.

    The soft order is advisory: proposals that would remove an action some
    still-applied action depends on are ranked last, never filtered.  Ties
    break by reverse application order, then lexicographic action id.
    """
    applied = state.applied_actions
    if not applied:
        raise NothingToRemove(f"state {state.id[:12]} has no applied actions")
    order: SoftOrder = soft_order if soft_order is not None else {
        a: action_registry.soft_requires(a) for a in applied
    }

    def violates(action: str) -> bool:
        return any(action in order.get(other, frozenset()) for other in applied if other != action)

    ranked = sorted(
        applied,
        key=lambda a: (violates(a), -applied.index(a), a),
    )
    proposals = []
    for rank, action in enumerate(ranked):
        note = "order-violating: a still-applied action lists this as a prior" if violates(action) else ""
        proposals.append(
            SimplificationProposal(
                action_category=action,
                locus=_action_locus(state, action, action_registry),
                rationale=f"remove {action}" + (f" ({note})" if note else ""),
                soft_order_rank=rank,
            )
        )
    return proposals


def _call_rewriter(rewriter: Any, request: dict[str, Any]) -> dict[str, Any]:
    response = rewriter.run(request)
    if not response.get("ok"):
        raise RewriterError(response.get("detail", "rewriter returned not-ok"))
    return response


def _status_failure(status: GateStatus) -> FailureKind:
    if status is GateStatus.COMPILE_FAIL:
        return FailureKind.COMPILE_FAIL
    if status is GateStatus.WRAPPER:
        return FailureKind.WRAPPER
    return FailureKind.INCORRECT


def _validate_with_retry(gate: Gate, state: KernelState, case: Any, runner: Runner):
    try:
        return gate.validate(state, case, runner)
    except GateTimeout:
        return gate.validate(state, case, runner)


def apply_backward(
    state: KernelState,
    proposal: SimplificationProposal,
    config: DeoptConfig,
    case: Any,
) -> KernelState | RiskEvidence:
    """Attempt one backward step; returns the accepted predecessor or the
    precondition-violation evidence for the rejection."""
    if proposal.action_category not in state.applied_actions:
        raise InvariantViolation(
            f"proposal removes {proposal.action_category!r} which is not applied"
        )
    gate = Gate(config.gate)

    def reject(kind: FailureKind, why: str, missing: tuple[str, ...] = ()) -> RiskEvidence:
        return RiskEvidence(
            action_category=proposal.action_category,
            locus=proposal.locus,
            violated_precondition=why,
            observed_failure=kind,
            source_state_id=state.id,
            missing_actions=missing,
        )

    try:
        response = _call_rewriter(
            config.rewriter,
            {
                "kind": "backward_remove",
                "action": proposal.action_category,
                "source_text": state.source_text,
                "locus": proposal.locus.to_dict(),
                "case_spec": case.to_case_spec() if hasattr(case, "to_case_spec") else dict(case),
            },
        )
    except RewriterError as exc:
        return reject(FailureKind.COMPILE_FAIL, f"rewriter error: {exc}")

    remaining = tuple(a for a in state.applied_actions if a != proposal.action_category)
    candidate = KernelState.create(
        source_text=response["source_text"],
        language=state.language,
        platform=state.platform,
        case_id=state.case_id,
        applied_actions=remaining,
        role=Role.INTERMEDIATE,
    )
    try:
        record = _validate_with_retry(gate, candidate, case, config.runner)
    except GateTimeout as exc:
        return reject(FailureKind.COMPILE_FAIL, f"gate timeout after retry: {exc}")
    if record.status is not GateStatus.VALID:
        detail = record.extra.get("detail", "")
        return reject(
            _status_failure(record.status),
            f"removing {proposal.action_category} left an invalid program"
            + (f": {detail}" if detail else ""),
            missing=(proposal.action_category,),
        )
    assert record.latency_ms is not None and state.latency_ms is not None
    if record.latency_ms < state.latency_ms * (1 - config.plausibility_slack):
        return reject(
            FailureKind.SLOWER,
            "simplified program ran faster than its successor (inverted effect); "
            "the rewriter likely changed semantics",
        )
    return candidate.with_validation(record)


def operationalize_forward(
    k_prev: KernelState,
    k_next: KernelState,
    action_category: str,
    locus: Locus,
    config: DeoptConfig,
    case: Any,
) -> ForwardTransition:
    """Re-derive the forward edit K(i-1) -> K(i) and gate it.

    Stored only when the re-derived program is valid and its latency is
    within the plausibility slack of K(i)'s; otherwise the backward step is
    discarded (ForwardDerivationFailed) so the chain stays executable.
    """
    assert k_prev.latency_ms is not None and k_next.latency_ms is not None
    gate = Gate(config.gate)
    last_error = "no attempts made"
    for _ in range(config.forward_retries):
        try:
            response = _call_rewriter(
                config.rewriter,
                {
                    "kind": "forward_add",
                    "action": action_category,
                    "source_text": k_prev.source_text,
                    "locus": locus.to_dict(),
                    "case_spec": case.to_case_spec() if hasattr(case, "to_case_spec") else dict(case),
                },
            )
        except RewriterError as exc:
            last_error = f"rewriter error: {exc}"
            continue
        candidate = KernelState.create(
            source_text=response["source_text"],
            language=k_prev.language,
            platform=k_prev.platform,
            case_id=k_prev.case_id,
            applied_actions=tuple(sorted(set(k_prev.applied_actions) | {action_category})),
        )
        try:
            record = _validate_with_retry(gate, candidate, case, config.runner)
        except GateTimeout as exc:
            last_error = f"gate timeout: {exc}"
            continue
        if record.status is not GateStatus.VALID:
            last_error = f"re-derived edit failed gate with status {record.status.value}"
            continue
        assert record.latency_ms is not None
        if abs(record.latency_ms - k_next.latency_ms) > config.plausibility_slack * k_next.latency_ms:
            last_error = (
                f"re-derived latency {record.latency_ms} outside slack of {k_next.latency_ms}"
            )
            continue
        return ForwardTransition.create(
            from_state_id=k_prev.id,
            to_state_id=k_next.id,
            action_category=action_category,
            locus=locus,
            forward_diff=make_diff(k_prev.source_text, response["source_text"]),
            effect=EffectSignature.from_ratio(k_prev.latency_ms / k_next.latency_ms),
            origin_expert_id="",  # filled by induce_lineage
        )
    raise ForwardDerivationFailed(last_error)


def induce_lineage(expert_state: KernelState, case: Any, config: DeoptConfig) -> InductionResult:
    """Walk the expert backward to its simplest gate-valid ancestor.

    Stops when the applied-action set is empty, max_steps is reached, or a
    state accumulates max_rejections_per_state consecutive rejections.  The
    final simplest state is marked naive; a walk with zero accepted steps
    yields a length-1 lineage flagged empty.
    """
    events: list[dict[str, Any]] = []

    def emit(event: dict[str, Any]) -> None:
        events.append(event)
        if config.event_sink is not None:
            config.event_sink(event)

    gate = Gate(config.gate)
    if expert_state.role is not Role.EXPERT:
        raise ExpertInvalid(f"induction requires role expert, got {expert_state.role.value}")
    record = expert_state.validation
    if record is None or record.status is not GateStatus.VALID:
        record = _validate_with_retry(gate, expert_state, case, config.runner)
        if record.status is not GateStatus.VALID:
            raise ExpertInvalid(f"expert failed the gate: {record.status.value}")
        expert_state = expert_state.with_validation(record)

    chain: list[KernelState] = [expert_state]
    transitions: list[ForwardTransition] = []
    risks: list[RiskEvidence] = []
    current = expert_state
    steps = 0

    while current.applied_actions and steps < config.max_steps:
        proposals = propose_simplifications(current, config.registry, config.soft_order)
        rejections = 0
        advanced = False
        for proposal in proposals:
            if rejections >= config.max_rejections_per_state:
                break
            emit({"event": "proposal", "state_id": current.id, "action": proposal.action_category,
                  "rank": proposal.soft_order_rank})
            outcome = apply_backward(current, proposal, config, case)
            if isinstance(outcome, RiskEvidence):
                risks.append(outcome)
                rejections += 1
                emit({"event": "reject", "state_id": current.id, "action": proposal.action_category,
                      "failure": outcome.observed_failure.value})
                continue
            try:
                transition = operationalize_forward(
                    outcome, current, proposal.action_category, proposal.locus, config, case
                )
            except ForwardDerivationFailed as exc:
                risk = RiskEvidence(
                    action_category=proposal.action_category,
                    locus=proposal.locus,
                    violated_precondition=f"forward re-derivation failed: {exc}",
                    observed_failure=FailureKind.COMPILE_FAIL,
                    source_state_id=current.id,
                )
                risks.append(risk)
                rejections += 1
                emit({"event": "reject", "state_id": current.id, "action": proposal.action_category,
                      "failure": "forward_derivation_failed"})
                continue
            transition = replace(transition, origin_expert_id=expert_state.id)
            transitions.insert(0, transition)
            chain.insert(0, outcome)
            current = outcome
            steps += 1
            advanced = True
            emit({"event": "accept", "state_id": outcome.id, "action": proposal.action_category,
                  "latency_ms": outcome.latency_ms})
            break
        if not advanced:
            break

    empty = len(chain) == 1
    if not empty:
        chain[0] = chain[0].with_role(Role.NAIVE)
    lineage = Lineage(
        expert_id=expert_state.id,
        case_id=expert_state.case_id,
        language=expert_state.language,
        platform=expert_state.platform,
        states=tuple(chain),
        transitions=tuple(transitions),
    )
    return InductionResult(lineage=lineage, risks=tuple(risks), events=tuple(events), empty=empty)


def replay_lineage(lineage: Lineage, config: DeoptConfig, case: Any) -> None:
    """Forward-replay stored diffs from K0; raises InvariantViolation unless
    every stored state id and latency is reproduced exactly."""
    gate = Gate(config.gate)
    current_source = lineage.states[0].source_text
    for idx, transition in enumerate(lineage.transitions):
        current_source = apply_diff(current_source, transition.forward_diff)
        expected = lineage.states[idx + 1]
        rebuilt = KernelState.create(
            source_text=current_source,
            language=lineage.language,
            platform=lineage.platform,
            case_id=lineage.case_id,
            applied_actions=expected.applied_actions,
        )
        if rebuilt.id != expected.id:
            raise InvariantViolation(
                f"replay diverged at transition {idx}: {rebuilt.id[:12]} != {expected.id[:12]}"
            )
        record = gate.validate(rebuilt, case, config.runner)
        if record.status is not GateStatus.VALID or record.latency_ms != expected.latency_ms:
            raise InvariantViolation(
                f"replay latency mismatch at state {idx + 1}: "
                f"{record.latency_ms} != {expected.latency_ms}"
            )
