"""From transitions to skills: aggregation, lifting, and roundtrip admission.

Forward transitions are clustered by shared action category, locus tag, and
adjacent effect bucket; a pluggable lifter turns each cluster into a skill
hypothesis.  The lifter only names the intent, anchor, carrier, and
preconditions.  Everything evidential is filled by the framework: evidence
ids, the observed effect range, matching risk records, and a scope whose
verified entries are exactly the contexts the evidence witnessed.

A hypothesis becomes an admitted skill only after at least one held-out
roundtrip trial succeeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from .errors import HeldOutViolation, LiftRejected
from .gate import Gate, GateConfig, Runner
from .model import (
    AnchorPattern,
    Carrier,
    CarrierKind,
    ForwardTransition,
    GateStatus,
    Intent,
    KernelState,
    Predicate,
    Provenance,
    EffectRange,
    RiskEvidence,
    RoundtripTrial,
    Scope,
    ScopeEntry,
    SkillCard,
    SkillStatus,
    TrialResult,
)

# Single-skill trials accept any effect within a factor-2 window of what the
# evidence observed; the 90%-of-source rule applies to full-lineage recovery.
TRIAL_WINDOW_FACTOR = 2.0


@dataclass(frozen=True)
class TransitionCluster:
    action_category: str
    structural_tag: str
    members: tuple[ForwardTransition, ...]

    @property
    def min_id(self) -> str:
        return min(t.id for t in self.members)


def aggregate_transitions(transitions: Sequence[ForwardTransition]) -> list[TransitionCluster]:
    """Cluster transitions sharing action category, locus tag, and effect.

    Two transitions are directly similar when their action categories and
    locus structural tags match and their effect buckets differ by at most
    one; clusters are the transitive closure of that relation.  Output is
    deterministic: clusters sorted by (action_category, min transition id),
    members sorted by id.
    """
    n = len(transitions)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[rj] = ri

    for i in range(n):
        for j in range(i + 1, n):
            a, b = transitions[i], transitions[j]
            if (
                a.action_category == b.action_category
                and a.locus.structural_tag == b.locus.structural_tag
                and abs(a.effect.ratio_bucket - b.effect.ratio_bucket) <= 1
            ):
                union(i, j)

    groups: dict[int, list[ForwardTransition]] = {}
    for i, t in enumerate(transitions):
        groups.setdefault(find(i), []).append(t)

    clusters = [
        TransitionCluster(
            action_category=members[0].action_category,
            structural_tag=members[0].locus.structural_tag,
            members=tuple(sorted(members, key=lambda t: t.id)),
        )
        for members in groups.values()
    ]
    clusters.sort(key=lambda c: (c.action_category, c.min_id))
    return clusters


class Lifter(Protocol):
    def run(self, request: Mapping[str, Any]) -> Mapping[str, Any]: ...


def _verified_entries(values: Iterable[tuple[Any, str]]) -> tuple[ScopeEntry, ...]:
    """Group (value, witness) pairs into verified entries with merged witnesses."""
    grouped: dict[Any, list[str]] = {}
    for value, witness in values:
        grouped.setdefault(value, [])
        if witness not in grouped[value]:
            grouped[value].append(witness)
    return tuple(
        ScopeEntry(value=value, provenance=Provenance.VERIFIED, witnesses=tuple(witnesses))
        for value, witnesses in grouped.items()
    )


def lift_cluster(
    cluster: TransitionCluster,
    lifter: Lifter,
    states: Mapping[str, KernelState],
    risks: Iterable[RiskEvidence] = (),
    case_spec: Mapping[str, Any] | None = None,
) -> SkillCard:
    """Lift one cluster into a skill hypothesis.

    The lifter sees forward diffs, loci, profile deltas, and the from-state
    sources as local code context; it returns intent, anchor, carrier, and
    preconditions.  Scope is projected from evidence: every observed (case,
    language, platform, prior-action set) tuple becomes a verified entry
    witnessed by its transition; anything extra the lifter asserts is stored
    as declared and never used by verified-scope retrieval.
    """
    if not cluster.members:
        raise LiftRejected("empty cluster")
    request = {
        "cluster": {
            "action_category": cluster.action_category,
            "members": [
                {
                    "transition_id": t.id,
                    "locus": t.locus.to_dict(),
                    "forward_diff": t.forward_diff,
                    "effect_ratio": t.effect.latency_ratio,
                    "from_applied_actions": list(states[t.from_state_id].applied_actions)
                    if t.from_state_id in states
                    else [],
                    "from_source": states[t.from_state_id].source_text
                    if t.from_state_id in states
                    else "",
                }
                for t in cluster.members
            ],
        },
        "case_spec": dict(case_spec) if case_spec is not None else None,
    }
    response = lifter.run(request)
    if not response.get("ok"):
        raise LiftRejected(response.get("detail", "lifter returned not-ok"))
    carrier_data = response.get("carrier") or {}
    if not carrier_data.get("body"):
        raise LiftRejected("lifter returned an empty carrier")

    intent = Intent(
        name=str(response["intent"]["name"]),
        description=str(response["intent"].get("description", "")),
    )
    anchor = AnchorPattern(
        structural_tag=str(response["anchor"]["structural_tag"]),
        symbol_glob=str(response["anchor"].get("symbol_glob", "*")),
    )
    carrier = Carrier(kind=CarrierKind(carrier_data.get("kind", "diff_sketch")), body=carrier_data["body"])
    pre = tuple(Predicate(kind=p["kind"], value=p["value"]) for p in response.get("pre", []))

    ratios = [t.effect.latency_ratio for t in cluster.members]
    effect = EffectRange(min_ratio=min(ratios), max_ratio=max(ratios))

    case_pairs, lang_pairs, plat_pairs, prior_pairs = [], [], [], []
    for t in cluster.members:
        from_state = states.get(t.from_state_id)
        if from_state is None:
            continue
        case_pairs.append((from_state.case_id, t.id))
        lang_pairs.append((from_state.language, t.id))
        plat_pairs.append((from_state.platform, t.id))
        prior_pairs.append((tuple(sorted(from_state.applied_actions)), t.id))

    declared = response.get("declared_scope", {}) or {}

    def declared_entries(dim: str) -> tuple[ScopeEntry, ...]:
        return tuple(
            ScopeEntry(value=v, provenance=Provenance.DECLARED) for v in declared.get(dim, [])
        )

    scope = Scope(
        cases=_verified_entries(case_pairs) + declared_entries("cases"),
        languages=_verified_entries(lang_pairs) + declared_entries("languages"),
        platforms=_verified_entries(plat_pairs) + declared_entries("platforms"),
        prior_action_sets=_verified_entries(prior_pairs),
        prior_actions_required=tuple(p.value for p in pre if p.kind == "requires_action"),
        prior_actions_forbidden=tuple(declared.get("prior_actions_forbidden", [])),
    )
    matching_risks = tuple(r for r in risks if r.action_category == cluster.action_category)
    return SkillCard.create(
        intent=intent,
        anchor=anchor,
        carrier=carrier,
        pre=pre,
        effect=effect,
        evidence=tuple(t.id for t in cluster.members),
        risk=matching_risks,
        scope=scope,
        action_category=cluster.action_category,
    )


def evidence_state_ids(transitions: Iterable[ForwardTransition]) -> frozenset[str]:
    out: set[str] = set()
    for t in transitions:
        out.add(t.from_state_id)
        out.add(t.to_state_id)
    return frozenset(out)


def run_roundtrip(
    hypothesis: SkillCard,
    start_state: KernelState,
    agent: Any,
    case: Any,
    gate_config: GateConfig,
    runner: Runner,
    evidence_states: frozenset[str],
    cost_fn: Callable[[Mapping[str, Any]], Decimal] | None = None,
    transcript_ref: str = "",
) -> RoundtripTrial:
    """Materialize the hypothesis on a fresh state and check its effect.

    The start must be held out: its id may not appear in any evidence
    transition.  The trial succeeds iff the gate passes and the observed
    effect ratio falls within [effect.min / 2, effect.max * 2].
    """
    if start_state.id in evidence_states:
        raise HeldOutViolation(f"start state {start_state.id[:12]} appears in the evidence transitions")
    gate = Gate(gate_config)
    if not start_state.is_valid:
        record = gate.validate(start_state, case, runner)
        if record.status is not GateStatus.VALID:
            raise HeldOutViolation(f"start state failed the gate: {record.status.value}")
        start_state = start_state.with_validation(record)
    start_latency = start_state.latency_ms
    assert start_latency is not None
    low = hypothesis.effect.min_ratio / TRIAL_WINDOW_FACTOR
    high = hypothesis.effect.max_ratio * TRIAL_WINDOW_FACTOR
    target_latency = start_latency / low

    response = agent.run(
        {
            "kind": "materialize",
            "action": hypothesis.action_category,
            "carrier": hypothesis.carrier.to_dict(),
            "anchor": hypothesis.anchor.to_dict(),
            "source_text": start_state.source_text,
            "case_spec": case.to_case_spec() if hasattr(case, "to_case_spec") else dict(case),
        }
    )
    cost = Decimal("0")
    if cost_fn is not None and response.get("usage"):
        cost = cost_fn(response["usage"])

    def trial(result: TrialResult, achieved: float | None) -> RoundtripTrial:
        return RoundtripTrial(
            skill_id=hypothesis.id,
            start_state_id=start_state.id,
            achieved_latency=achieved,
            target_latency=target_latency,
            result=result,
            cost_dollars=cost,
            transcript_ref=transcript_ref,
        )

    if not response.get("ok"):
        return trial(TrialResult.FAILURE, None)
    candidate = KernelState.create(
        source_text=response["source_text"],
        language=start_state.language,
        platform=start_state.platform,
        case_id=start_state.case_id,
        applied_actions=tuple(
            sorted(set(start_state.applied_actions) | {hypothesis.action_category})
        ),
    )
    record = gate.validate(candidate, case, runner)
    if record.status is not GateStatus.VALID:
        return trial(TrialResult.FAILURE, None)
    assert record.latency_ms is not None
    ratio = start_latency / record.latency_ms
    ok = low <= ratio <= high
    return trial(TrialResult.SUCCESS if ok else TrialResult.FAILURE, record.latency_ms)


class TrialRunner(Protocol):
    """Supplies held-out starts and runs one trial for a hypothesis."""

    def starts(self, hypothesis: SkillCard) -> Iterable[KernelState]: ...

    def run(self, hypothesis: SkillCard, start: KernelState) -> RoundtripTrial: ...


@dataclass
class AdmitConfig:
    max_trials: int = 3


@dataclass
class AdmissionReport:
    admitted: list[str] = field(default_factory=list)
    still_hypothesis: list[str] = field(default_factory=list)
    retired: list[str] = field(default_factory=list)
    skipped_no_holdout: list[str] = field(default_factory=list)
    trials_run: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "admitted": list(self.admitted),
            "still_hypothesis": list(self.still_hypothesis),
            "retired": list(self.retired),
            "skipped_no_holdout": list(self.skipped_no_holdout),
            "trials_run": self.trials_run,
        }

    def table(self) -> str:
        lines = [f"{'outcome':<18} {'skills':<6}"]
        for label, ids in (
            ("admitted", self.admitted),
            ("still-hypothesis", self.still_hypothesis),
            ("retired", self.retired),
            ("skipped", self.skipped_no_holdout),
        ):
            lines.append(f"{label:<18} {len(ids):<6}")
        lines.append(f"trials run: {self.trials_run}")
        return "\n".join(lines)


def admit_pending(
    cards: Sequence[SkillCard],
    trial_runner: TrialRunner,
    config: AdmitConfig | None = None,
) -> tuple[AdmissionReport, list[SkillCard]]:
    """Run held-out roundtrips for every hypothesis in the library.

    Each hypothesis gets up to ``max_trials`` trials on distinct held-out
    starts; the first success admits it, zero successes after max_trials
    retires it, and a hypothesis with no available holdout start is left
    untouched.
    """
    config = config or AdmitConfig()
    report = AdmissionReport()
    updated: list[SkillCard] = []
    for card in cards:
        if card.status is not SkillStatus.HYPOTHESIS:
            updated.append(card)
            if card.status is SkillStatus.ADMITTED:
                report.admitted.append(card.id)
            else:
                report.retired.append(card.id)
            continue
        starts = list(card_starts(trial_runner, card, config.max_trials))
        if not starts:
            report.skipped_no_holdout.append(card.id)
            report.still_hypothesis.append(card.id)
            updated.append(card)
            continue
        trials_for_card = 0
        for start in starts:
            trial = trial_runner.run(card, start)
            card = card.record_trial(trial)
            report.trials_run += 1
            trials_for_card += 1
            if card.status is SkillStatus.ADMITTED:
                break
        if card.status is SkillStatus.ADMITTED:
            report.admitted.append(card.id)
        elif trials_for_card >= config.max_trials:
            card = card.retire()
            report.retired.append(card.id)
        else:
            report.still_hypothesis.append(card.id)
        updated.append(card)
    return report, updated


def card_starts(trial_runner: TrialRunner, card: SkillCard, limit: int) -> Iterable[KernelState]:
    """First ``limit`` distinct holdout starts the runner can offer."""
    seen: set[str] = set()
    for start in trial_runner.starts(card):
        if start.id in seen:
            continue
        seen.add(start.id)
        yield start
        if len(seen) >= limit:
            return
