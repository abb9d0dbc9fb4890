"""Scope-conditioned multi-facet retrieval and SkillCard prompt serialization.

Retrieval ranks the admitted library independently along four dimensions of
the target tuple (case, language, platform, prior actions), takes the top-k
of each, and returns the union.  Only verified scope counts: a skill whose
declared scope matches perfectly but has no verified entry is never
retrievable.

Deliberately simple scoring (tag Jaccard, family table, capability order,
prior-action Jaccard); the final display order is the per-dimension score
sum, isolated in :func:`total_score` so it can be swapped without touching
the ranking contract.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .errors import InvariantViolation
from .model import SkillCard, SkillStatus
from .registry import Registry

DIMENSIONS = ("case", "language", "platform", "prior_actions")
DEFAULT_K = 4


@dataclass(frozen=True)
class RetrievalTarget:
    case_id: str
    language: str
    platform: str
    applied_actions: tuple[str, ...] = ()


@dataclass(frozen=True)
class ScoredSkill:
    skill: SkillCard
    case_score: float
    language_score: float
    platform_score: float
    prior_score: float
    matched_dimensions: tuple[str, ...]

    @property
    def total(self) -> float:
        return total_score(self)


def total_score(scored: ScoredSkill) -> float:
    """Final display ordering: plain sum of the per-dimension scores."""
    return scored.case_score + scored.language_score + scored.platform_score + scored.prior_score


def jaccard(a: Iterable[str], b: Iterable[str]) -> float:
    """Set Jaccard with the both-empty case scored as a perfect match."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    union = sa | sb
    return len(sa & sb) / len(union)


def _case_tags(case_id: str, case_tag_table: Mapping[str, set[str]] | None) -> set[str]:
    if case_tag_table and case_id in case_tag_table:
        return set(case_tag_table[case_id]) | {case_id}
    return {case_id}


def score_skill(
    skill: SkillCard,
    target: RetrievalTarget,
    registry: Registry,
    case_tag_table: Mapping[str, set[str]] | None = None,
) -> tuple[float, float, float, float]:
    """Per-dimension similarities of one skill's verified scope to the target."""
    target_tags = _case_tags(target.case_id, case_tag_table)
    skill_tags: set[str] = set()
    for case in skill.scope.verified_cases():
        skill_tags |= _case_tags(case, case_tag_table)
    case_score = jaccard(target_tags, skill_tags) if skill_tags else 0.0

    languages = skill.scope.verified_languages()
    language_score = max(
        (registry.language_similarity(target.language, lang) for lang in languages),
        default=0.0,
    )

    platforms = skill.scope.verified_platforms()
    platform_score = (
        1.0 if any(registry.platform_matches(target.platform, entry) for entry in platforms) else 0.0
    )

    prior_score = jaccard(target.applied_actions, skill.scope.verified_prior_actions())
    return case_score, language_score, platform_score, prior_score


def retrieve(
    target: RetrievalTarget,
    k: int,
    skills: Sequence[SkillCard],
    registry: Registry,
    case_tag_table: Mapping[str, set[str]] | None = None,
) -> list[ScoredSkill]:
    """Union of per-dimension top-k admitted skills, annotated with scores.

    Deterministic for a fixed library and target: per-dimension ranking is
    (score desc, skill id asc); the returned pool is ordered by score sum
    desc, ties by skill id asc.  An empty library yields an empty pool.
    """
    if k < 1:
        raise InvariantViolation("retrieve requires k >= 1")
    considered = [s for s in skills if s.status is SkillStatus.ADMITTED and s.scope.has_verified()]
    if not considered:
        return []
    scores = {s.id: score_skill(s, target, registry, case_tag_table) for s in considered}

    union_ids: dict[str, set[str]] = {}
    for dim_index, dim_name in enumerate(DIMENSIONS):
        ranked = sorted(considered, key=lambda s: (-scores[s.id][dim_index], s.id))
        for s in ranked[:k]:
            union_ids.setdefault(s.id, set()).add(dim_name)

    by_id = {s.id: s for s in considered}
    pool = [
        ScoredSkill(
            skill=by_id[sid],
            case_score=scores[sid][0],
            language_score=scores[sid][1],
            platform_score=scores[sid][2],
            prior_score=scores[sid][3],
            matched_dimensions=tuple(d for d in DIMENSIONS if d in dims),
        )
        for sid, dims in union_ids.items()
    ]
    pool.sort(key=lambda e: (-e.total, e.skill.id))
    return pool


# ---------------------------------------------------------------------------
# prompt serialization
# ---------------------------------------------------------------------------


def _format_ratio(value: float) -> str:
    return f"{value:.2f}×"


def _summarize_scope(skill: SkillCard) -> str:
    scope = skill.scope
    parts = [
        "cases=" + (",".join(sorted(scope.verified_cases())) or "-"),
        "languages=" + (",".join(sorted(scope.verified_languages())) or "-"),
        "platforms=" + (",".join(sorted(scope.verified_platforms())) or "-"),
        "prior=" + (",".join(sorted(scope.verified_prior_actions())) or "-"),
    ]
    if scope.prior_actions_forbidden:
        parts.append("forbidden=" + ",".join(sorted(scope.prior_actions_forbidden)))
    return "; ".join(parts)


def serialize_skillcard_prompt(skill: SkillCard) -> str:
    """Serialize an admitted card for the online prompt.

    Fixed field order (intent, anchor, carrier, precondition, effect,
    evidence, risk, scope, verification log); the carrier body is copied
    verbatim as the code-bearing hint, never rewrapped; evidence and the
    verification log are summarized as counts plus the best observed ratio.
    """
    if skill.status is not SkillStatus.ADMITTED:
        raise InvariantViolation(f"skill {skill.id[:12]} is {skill.status.value}, not admitted")
    pre_text = (
        "; ".join(
            f"requires {p.value}" if p.kind == "requires_action" else f"condition: {p.value}"
            for p in skill.pre
        )
        or "none"
    )
    risk_lines = [
        f"  - {r.observed_failure.value} when {r.violated_precondition}" for r in skill.risk
    ]
    successes = sum(1 for t in skill.ver if t.result.value == "success")
    lines = [
        f"intent: {skill.intent.name}" + (f" :: {skill.intent.description}" if skill.intent.description else ""),
        f"anchor: {skill.anchor.structural_tag} @ {skill.anchor.symbol_glob}",
        f"carrier ({skill.carrier.kind.value}), instantiate on the target surface:",
        skill.carrier.body,
        f"precondition: {pre_text}",
        f"effect: {_format_ratio(skill.effect.min_ratio)} to {_format_ratio(skill.effect.max_ratio)}",
        f"evidence: {len(skill.evidence)} transitions, best {_format_ratio(skill.effect.max_ratio)}",
        f"risk: {len(skill.risk)} observed failures" + (":" if risk_lines else ""),
        *risk_lines,
        f"scope: {_summarize_scope(skill)}",
        f"verification log: {len(skill.ver)} trials, {successes} successful",
    ]
    return "\n".join(lines) + "\n"
