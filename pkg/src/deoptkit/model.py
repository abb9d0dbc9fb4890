"""Persistent domain types and their canonical serialization identity.

Every record the pipeline stores on disk is defined here: kernel states,
validation records, forward transitions, lineages, risk evidence, skill
cards, and roundtrip trials.  All values are immutable after construction
and safe to share between threads.

Serialization contract:

* one JSON document per object, field names equal to attribute names;
* ``serialize -> deserialize -> serialize`` is byte-identical;
* unknown fields survive a rewrite (kept in ``extra`` and merged back);
* a single ``schema_version`` integer; mismatches are rejected, not migrated.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from decimal import Decimal
from enum import Enum
from typing import Any, Iterable, Mapping

from .errors import InvalidEffect, InvalidState, InvariantViolation
from .registry import Registry

SCHEMA_VERSION = 1


class Role(str, Enum):
    EXPERT = "expert"
    INTERMEDIATE = "intermediate"
    NAIVE = "naive"
    CANDIDATE = "candidate"


class GateStatus(str, Enum):
    UNVALIDATED = "unvalidated"
    COMPILE_FAIL = "compile_fail"
    INCORRECT = "incorrect"
    WRAPPER = "wrapper"
    VALID = "valid"


class ProbeResult(str, Enum):
    NOT_RUN = "not_run"
    REAL_KERNEL = "real_kernel"
    WRAPPER = "wrapper"


class FailureKind(str, Enum):
    COMPILE_FAIL = "compile_fail"
    INCORRECT = "incorrect"
    SLOWER = "slower"
    WRAPPER = "wrapper"


class TrialResult(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


class SkillStatus(str, Enum):
    HYPOTHESIS = "hypothesis"
    ADMITTED = "admitted"
    RETIRED = "retired"


class Provenance(str, Enum):
    DECLARED = "declared"
    VERIFIED = "verified"


class CarrierKind(str, Enum):
    DIFF_SKETCH = "diff_sketch"
    PSEUDOCODE = "pseudocode"
    ANNOTATED_SNIPPET = "annotated_snippet"
    SCHEDULE_FRAGMENT = "schedule_fragment"
    NL_ANNOTATION = "nl_annotation"


def canonical_json(value: Any) -> str:
    """Compact, key-sorted JSON used for digests and byte-stable files."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_digest(payload: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def digest_state(source_text: str, language: str, platform: str, case_id: str) -> str:
    """Deterministic 64-hex identity of a kernel state.

    The digest is a pure function of the four identity fields; recomputing it
    anywhere reproduces the stored id byte-for-byte.
    """
    if not source_text:
        raise InvalidState("source_text must be non-empty")
    return content_digest(
        {
            "source_text": source_text,
            "language": language,
            "platform": platform,
            "case_id": case_id,
        }
    )


def ratio_bucket(latency_ratio: float) -> int:
    """Half-octave effect bucket: floor(log2(ratio) * 2)."""
    if not latency_ratio > 0:
        raise InvalidEffect(f"latency_ratio must be > 0, got {latency_ratio!r}")
    return math.floor(math.log2(latency_ratio) * 2)


# ---------------------------------------------------------------------------
# parsing helpers
# ---------------------------------------------------------------------------


def _fail(path: str, message: str) -> None:
    raise InvariantViolation(f"{path}: {message}")


def _check_schema_version(data: Mapping[str, Any], path: str) -> None:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        _fail(path, f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")


def _split_extra(data: Mapping[str, Any], known: Iterable[str]) -> dict[str, Any]:
    known_set = set(known) | {"schema_version"}
    return {k: v for k, v in data.items() if k not in known_set}


def _enum(enum_type: type, value: Any, path: str):
    try:
        return enum_type(value)
    except ValueError:
        allowed = ", ".join(e.value for e in enum_type)
        _fail(path, f"invalid value {value!r}; expected one of: {allowed}")


def _str_tuple(value: Any, path: str) -> tuple[str, ...]:
    if not isinstance(value, (list, tuple)):
        _fail(path, f"expected array, got {type(value).__name__}")
    for item in value:
        if not isinstance(item, str):
            _fail(path, f"expected string items, got {type(item).__name__}")
    return tuple(value)


class Model:
    """Mixin providing the shared JSON surface of every persistent type."""

    _FIELDS: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, raw: str):
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise InvariantViolation(f"{cls.__name__}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvariantViolation(f"{cls.__name__}: JSON root must be an object")
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]):
        raise NotImplementedError


def _base_dict(model: Model, known: Mapping[str, Any], extra: Mapping[str, Any]) -> dict[str, Any]:
    out = dict(extra)
    out.update(known)
    out["schema_version"] = SCHEMA_VERSION
    return out


# ---------------------------------------------------------------------------
# validation records and kernel states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedResult(Model):
    seed: int
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "passed": self.passed}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SeedResult":
        return cls(seed=int(data["seed"]), passed=bool(data["passed"]))


@dataclass(frozen=True)
class ValidationRecord(Model):
    """Gate outcome for one candidate: compile, seeded correctness, timing, probe."""

    status: GateStatus
    compile_ok: bool
    seed_results: tuple[SeedResult, ...] = ()
    latency_ms: float | None = None
    warmups: int = 25
    reps: int = 100
    wrapper_probe: ProbeResult = ProbeResult.NOT_RUN
    gate_version: str = "gate-1"
    timestamp: str = ""
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.status is GateStatus.VALID:
            if not self.compile_ok:
                _fail("ValidationRecord", "status valid requires compile_ok")
            if not self.seed_results or not all(r.passed for r in self.seed_results):
                _fail("ValidationRecord", "status valid requires all seed results passed")
            if self.latency_ms is None:
                _fail("ValidationRecord", "status valid requires latency_ms")
            if self.wrapper_probe is ProbeResult.WRAPPER:
                _fail("ValidationRecord", "status valid incompatible with wrapper probe result")
        else:
            if self.latency_ms is not None:
                _fail("ValidationRecord", "latency_ms is present iff status is valid")
        if self.status is GateStatus.WRAPPER and self.wrapper_probe is not ProbeResult.WRAPPER:
            _fail("ValidationRecord", "status wrapper requires wrapper_probe = wrapper")

    def to_dict(self) -> dict[str, Any]:
        known = {
            "status": self.status.value,
            "compile_ok": self.compile_ok,
            "seed_results": [r.to_dict() for r in self.seed_results],
            "latency_ms": self.latency_ms,
            "warmups": self.warmups,
            "reps": self.reps,
            "wrapper_probe": self.wrapper_probe.value,
            "gate_version": self.gate_version,
            "timestamp": self.timestamp,
        }
        return _base_dict(self, known, self.extra)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ValidationRecord":
        _check_schema_version(data, "ValidationRecord")
        known = (
            "status",
            "compile_ok",
            "seed_results",
            "latency_ms",
            "warmups",
            "reps",
            "wrapper_probe",
            "gate_version",
            "timestamp",
        )
        return cls(
            status=_enum(GateStatus, data["status"], "ValidationRecord.status"),
            compile_ok=bool(data["compile_ok"]),
            seed_results=tuple(SeedResult.from_dict(r) for r in data.get("seed_results", [])),
            latency_ms=data.get("latency_ms"),
            warmups=int(data.get("warmups", 25)),
            reps=int(data.get("reps", 100)),
            wrapper_probe=_enum(
                ProbeResult, data.get("wrapper_probe", "not_run"), "ValidationRecord.wrapper_probe"
            ),
            gate_version=str(data.get("gate_version", "gate-1")),
            timestamp=str(data.get("timestamp", "")),
            extra=_split_extra(data, known),
        )


@dataclass(frozen=True)
class KernelState(Model):
    """One program variant with its tags, applied-action set, and gate record."""

    id: str
    source_text: str
    language: str
    platform: str
    case_id: str
    applied_actions: tuple[str, ...] = ()
    role: Role = Role.CANDIDATE
    validation: ValidationRecord | None = None
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        expected = digest_state(self.source_text, self.language, self.platform, self.case_id)
        if self.id != expected:
            _fail("KernelState.id", f"stored id {self.id} does not match recomputed digest")
        if len(set(self.applied_actions)) != len(self.applied_actions):
            _fail("KernelState.applied_actions", "duplicate action-category ids")

    @classmethod
    def create(
        cls,
        source_text: str,
        language: str,
        platform: str,
        case_id: str,
        applied_actions: Iterable[str] = (),
        role: Role = Role.CANDIDATE,
        validation: ValidationRecord | None = None,
    ) -> "KernelState":
        return cls(
            id=digest_state(source_text, language, platform, case_id),
            source_text=source_text,
            language=language,
            platform=platform,
            case_id=case_id,
            applied_actions=tuple(applied_actions),
            role=role,
            validation=validation,
        )

    @property
    def latency_ms(self) -> float | None:
        return self.validation.latency_ms if self.validation is not None else None

    @property
    def is_valid(self) -> bool:
        return self.validation is not None and self.validation.status is GateStatus.VALID

    def with_validation(self, record: ValidationRecord) -> "KernelState":
        return replace(self, validation=record)

    def with_role(self, role: Role) -> "KernelState":
        return replace(self, role=role)

    def to_dict(self) -> dict[str, Any]:
        known = {
            "id": self.id,
            "source_text": self.source_text,
            "language": self.language,
            "platform": self.platform,
            "case_id": self.case_id,
            "applied_actions": list(self.applied_actions),
            "role": self.role.value,
            "validation": self.validation.to_dict() if self.validation else None,
        }
        return _base_dict(self, known, self.extra)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "KernelState":
        _check_schema_version(data, "KernelState")
        known = (
            "id",
            "source_text",
            "language",
            "platform",
            "case_id",
            "applied_actions",
            "role",
            "validation",
        )
        validation = data.get("validation")
        return cls(
            id=str(data["id"]),
            source_text=str(data["source_text"]),
            language=str(data["language"]),
            platform=str(data["platform"]),
            case_id=str(data["case_id"]),
            applied_actions=_str_tuple(data.get("applied_actions", []), "KernelState.applied_actions"),
            role=_enum(Role, data.get("role", "candidate"), "KernelState.role"),
            validation=ValidationRecord.from_dict(validation) if validation else None,
            extra=_split_extra(data, known),
        )


# ---------------------------------------------------------------------------
# loci, effects, transitions, risk
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Locus(Model):
    """Where an edit acts: file/unit, symbol chain, line span, structural tag."""

    file: str
    symbol_path: str
    line_span: tuple[int, int]
    structural_tag: str

    def __post_init__(self) -> None:
        start, end = self.line_span
        if start > end:
            _fail("Locus.line_span", f"start {start} > end {end}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "file": self.file,
            "symbol_path": self.symbol_path,
            "line_span": list(self.line_span),
            "structural_tag": self.structural_tag,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Locus":
        span = data["line_span"]
        return cls(
            file=str(data["file"]),
            symbol_path=str(data["symbol_path"]),
            line_span=(int(span[0]), int(span[1])),
            structural_tag=str(data["structural_tag"]),
        )


@dataclass(frozen=True)
class EffectSignature(Model):
    """Measured effect of one transition: from_latency / to_latency."""

    latency_ratio: float
    ratio_bucket: int
    aux_metrics: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if not self.latency_ratio > 0:
            raise InvalidEffect(f"latency_ratio must be > 0, got {self.latency_ratio!r}")
        if self.ratio_bucket != ratio_bucket(self.latency_ratio):
            _fail("EffectSignature.ratio_bucket", "not recomputable from latency_ratio")

    @classmethod
    def from_ratio(cls, latency_ratio: float, aux_metrics: dict[str, float] | None = None) -> "EffectSignature":
        return cls(latency_ratio, ratio_bucket(latency_ratio), aux_metrics)

    def to_dict(self) -> dict[str, Any]:
        return {
            "latency_ratio": self.latency_ratio,
            "ratio_bucket": self.ratio_bucket,
            "aux_metrics": dict(self.aux_metrics) if self.aux_metrics is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EffectSignature":
        aux = data.get("aux_metrics")
        return cls(
            latency_ratio=float(data["latency_ratio"]),
            ratio_bucket=int(data["ratio_bucket"]),
            aux_metrics=dict(aux) if aux is not None else None,
        )


@dataclass(frozen=True)
class ForwardTransition(Model):
    """A validated before/after edit, stored as the inverse of an accepted
    backward step and re-derived as an executable forward primitive."""

    id: str
    from_state_id: str
    to_state_id: str
    action_category: str
    locus: Locus
    forward_diff: str
    effect: EffectSignature
    origin_expert_id: str
    validation_match: bool = True
    rejected: bool = False
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.validation_match:
            _fail("ForwardTransition.validation_match", "stored transitions must match validation status")
        if self.rejected:
            _fail("ForwardTransition.rejected", "rejected edits are RiskEvidence, not transitions")

    @classmethod
    def create(
        cls,
        from_state_id: str,
        to_state_id: str,
        action_category: str,
        locus: Locus,
        forward_diff: str,
        effect: EffectSignature,
        origin_expert_id: str,
    ) -> "ForwardTransition":
        tid = content_digest(
            {
                "from": from_state_id,
                "to": to_state_id,
                "action": action_category,
                "diff": forward_diff,
            }
        )
        return cls(tid, from_state_id, to_state_id, action_category, locus, forward_diff, effect, origin_expert_id)

    def to_dict(self) -> dict[str, Any]:
        known = {
            "id": self.id,
            "from_state_id": self.from_state_id,
            "to_state_id": self.to_state_id,
            "action_category": self.action_category,
            "locus": self.locus.to_dict(),
            "forward_diff": self.forward_diff,
            "effect": self.effect.to_dict(),
            "origin_expert_id": self.origin_expert_id,
            "validation_match": self.validation_match,
            "rejected": self.rejected,
        }
        return _base_dict(self, known, self.extra)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ForwardTransition":
        _check_schema_version(data, "ForwardTransition")
        known = (
            "id",
            "from_state_id",
            "to_state_id",
            "action_category",
            "locus",
            "forward_diff",
            "effect",
            "origin_expert_id",
            "validation_match",
            "rejected",
        )
        return cls(
            id=str(data["id"]),
            from_state_id=str(data["from_state_id"]),
            to_state_id=str(data["to_state_id"]),
            action_category=str(data["action_category"]),
            locus=Locus.from_dict(data["locus"]),
            forward_diff=str(data["forward_diff"]),
            effect=EffectSignature.from_dict(data["effect"]),
            origin_expert_id=str(data["origin_expert_id"]),
            validation_match=bool(data.get("validation_match", True)),
            rejected=bool(data.get("rejected", False)),
            extra=_split_extra(data, known),
        )


@dataclass(frozen=True)
class RiskEvidence(Model):
    """What went wrong when an intent was attempted without its conditions."""

    action_category: str
    locus: Locus
    violated_precondition: str
    observed_failure: FailureKind
    source_state_id: str
    missing_actions: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "action_category": self.action_category,
            "locus": self.locus.to_dict(),
            "violated_precondition": self.violated_precondition,
            "observed_failure": self.observed_failure.value,
            "source_state_id": self.source_state_id,
            "missing_actions": list(self.missing_actions),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RiskEvidence":
        return cls(
            action_category=str(data["action_category"]),
            locus=Locus.from_dict(data["locus"]),
            violated_precondition=str(data["violated_precondition"]),
            observed_failure=_enum(FailureKind, data["observed_failure"], "RiskEvidence.observed_failure"),
            source_state_id=str(data["source_state_id"]),
            missing_actions=_str_tuple(data.get("missing_actions", []), "RiskEvidence.missing_actions"),
        )


@dataclass(frozen=True)
class Lineage(Model):
    """Ordered chain K0 -> K* of validated states and forward transitions.

    Well-formedness is checked on construction and therefore on load; a
    violating lineage is rejected, never silently repaired.  A length-1
    lineage (no accepted steps) keeps its single state in the expert role.
    """

    expert_id: str
    case_id: str
    language: str
    platform: str
    states: tuple[KernelState, ...]
    transitions: tuple[ForwardTransition, ...]
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.states:
            _fail("Lineage.states", "must contain at least one state")
        if len(self.transitions) != len(self.states) - 1:
            _fail("Lineage", f"{len(self.transitions)} transitions for {len(self.states)} states")
        for i, t in enumerate(self.transitions, start=1):
            if t.from_state_id != self.states[i - 1].id:
                _fail(f"Lineage.transitions[{i - 1}]", "from_state_id does not match chain")
            if t.to_state_id != self.states[i].id:
                _fail(f"Lineage.transitions[{i - 1}]", "to_state_id does not match chain")
        if self.states[-1].role is not Role.EXPERT:
            _fail("Lineage", "final state must have role expert")
        if len(self.states) > 1 and self.states[0].role is not Role.NAIVE:
            _fail("Lineage", "initial state must have role naive")
        for i, state in enumerate(self.states):
            if not state.is_valid:
                _fail(f"Lineage.states[{i}]", "every lineage state must have validation status valid")
        if self.states[-1].id != self.expert_id:
            _fail("Lineage.expert_id", "must equal the final state id")

    def to_dict(self) -> dict[str, Any]:
        known = {
            "expert_id": self.expert_id,
            "case_id": self.case_id,
            "language": self.language,
            "platform": self.platform,
            "states": [s.to_dict() for s in self.states],
            "transitions": [t.to_dict() for t in self.transitions],
        }
        return _base_dict(self, known, self.extra)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Lineage":
        _check_schema_version(data, "Lineage")
        known = ("expert_id", "case_id", "language", "platform", "states", "transitions")
        return cls(
            expert_id=str(data["expert_id"]),
            case_id=str(data["case_id"]),
            language=str(data["language"]),
            platform=str(data["platform"]),
            states=tuple(KernelState.from_dict(s) for s in data["states"]),
            transitions=tuple(ForwardTransition.from_dict(t) for t in data["transitions"]),
            extra=_split_extra(data, known),
        )


# ---------------------------------------------------------------------------
# scope, skill cards, trials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScopeEntry(Model):
    """One scope assertion with provenance and, when verified, its witnesses.

    ``value`` is a plain string for the case/language/platform dimensions and
    a sorted action-id tuple for the prior-action dimension.
    """

    value: str | tuple[str, ...]
    provenance: Provenance
    witnesses: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.provenance is Provenance.VERIFIED and not self.witnesses:
            _fail("ScopeEntry", "verified entries need at least one backing evidence or ver record id")

    def to_dict(self) -> dict[str, Any]:
        value = list(self.value) if isinstance(self.value, tuple) else self.value
        return {"value": value, "provenance": self.provenance.value, "witnesses": list(self.witnesses)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ScopeEntry":
        raw = data["value"]
        value = tuple(raw) if isinstance(raw, list) else str(raw)
        return cls(
            value=value,
            provenance=_enum(Provenance, data["provenance"], "ScopeEntry.provenance"),
            witnesses=_str_tuple(data.get("witnesses", []), "ScopeEntry.witnesses"),
        )


def _entries(values: Iterable[ScopeEntry], provenance: Provenance | None) -> tuple[ScopeEntry, ...]:
    if provenance is None:
        return tuple(values)
    return tuple(e for e in values if e.provenance is provenance)


@dataclass(frozen=True)
class Scope(Model):
    """Where a skill is known (verified) or asserted (declared) to apply."""

    cases: tuple[ScopeEntry, ...] = ()
    languages: tuple[ScopeEntry, ...] = ()
    platforms: tuple[ScopeEntry, ...] = ()
    prior_action_sets: tuple[ScopeEntry, ...] = ()
    prior_actions_required: tuple[str, ...] = ()
    prior_actions_forbidden: tuple[str, ...] = ()

    def verified_cases(self) -> set[str]:
        return {str(e.value) for e in _entries(self.cases, Provenance.VERIFIED)}

    def verified_languages(self) -> set[str]:
        return {str(e.value) for e in _entries(self.languages, Provenance.VERIFIED)}

    def verified_platforms(self) -> set[str]:
        return {str(e.value) for e in _entries(self.platforms, Provenance.VERIFIED)}

    def verified_prior_actions(self) -> set[str]:
        """Union of all verified prior-action contexts (the d-dimension)."""
        out: set[str] = set()
        for e in _entries(self.prior_action_sets, Provenance.VERIFIED):
            out.update(e.value)
        return out

    def has_verified(self) -> bool:
        dims = (self.cases, self.languages, self.platforms, self.prior_action_sets)
        return any(e.provenance is Provenance.VERIFIED for dim in dims for e in dim)

    def signature(self) -> str:
        """Order-insensitive digest of the scope's values (ignores provenance)."""
        payload = {
            "cases": sorted(str(e.value) for e in self.cases),
            "languages": sorted(str(e.value) for e in self.languages),
            "platforms": sorted(str(e.value) for e in self.platforms),
            "prior_action_sets": sorted(",".join(e.value) for e in self.prior_action_sets),
            "required": sorted(self.prior_actions_required),
            "forbidden": sorted(self.prior_actions_forbidden),
        }
        return content_digest(payload)

    def to_dict(self) -> dict[str, Any]:
        return {
            "cases": [e.to_dict() for e in self.cases],
            "languages": [e.to_dict() for e in self.languages],
            "platforms": [e.to_dict() for e in self.platforms],
            "prior_action_sets": [e.to_dict() for e in self.prior_action_sets],
            "prior_actions_required": list(self.prior_actions_required),
            "prior_actions_forbidden": list(self.prior_actions_forbidden),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Scope":
        return cls(
            cases=tuple(ScopeEntry.from_dict(e) for e in data.get("cases", [])),
            languages=tuple(ScopeEntry.from_dict(e) for e in data.get("languages", [])),
            platforms=tuple(ScopeEntry.from_dict(e) for e in data.get("platforms", [])),
            prior_action_sets=tuple(ScopeEntry.from_dict(e) for e in data.get("prior_action_sets", [])),
            prior_actions_required=_str_tuple(
                data.get("prior_actions_required", []), "Scope.prior_actions_required"
            ),
            prior_actions_forbidden=_str_tuple(
                data.get("prior_actions_forbidden", []), "Scope.prior_actions_forbidden"
            ),
        )


@dataclass(frozen=True)
class Intent(Model):
    name: str
    description: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "description": self.description}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Intent":
        return cls(name=str(data["name"]), description=str(data.get("description", "")))


@dataclass(frozen=True)
class AnchorPattern(Model):
    """The code/IR surface a skill acts on: structural tag + symbol-path glob."""

    structural_tag: str
    symbol_glob: str = "*"

    def to_dict(self) -> dict[str, Any]:
        return {"structural_tag": self.structural_tag, "symbol_glob": self.symbol_glob}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AnchorPattern":
        return cls(structural_tag=str(data["structural_tag"]), symbol_glob=str(data.get("symbol_glob", "*")))


@dataclass(frozen=True)
class Carrier(Model):
    kind: CarrierKind
    body: str

    def __post_init__(self) -> None:
        if not self.body:
            _fail("Carrier.body", "must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "body": self.body}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Carrier":
        return cls(kind=_enum(CarrierKind, data["kind"], "Carrier.kind"), body=str(data["body"]))


@dataclass(frozen=True)
class Predicate(Model):
    """One precondition: a required prior action or a free-text condition."""

    kind: str  # "requires_action" | "text"
    value: str

    def __post_init__(self) -> None:
        if self.kind not in ("requires_action", "text"):
            _fail("Predicate.kind", f"unknown kind {self.kind!r}")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Predicate":
        return cls(kind=str(data["kind"]), value=str(data["value"]))


@dataclass(frozen=True)
class EffectRange(Model):
    min_ratio: float
    max_ratio: float

    def __post_init__(self) -> None:
        if not (0 < self.min_ratio <= self.max_ratio):
            _fail("EffectRange", f"need 0 < min <= max, got ({self.min_ratio}, {self.max_ratio})")

    def to_dict(self) -> dict[str, Any]:
        return {"min_ratio": self.min_ratio, "max_ratio": self.max_ratio}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EffectRange":
        return cls(min_ratio=float(data["min_ratio"]), max_ratio=float(data["max_ratio"]))


@dataclass(frozen=True)
class RoundtripTrial(Model):
    """One held-out materialization attempt recorded in a skill's ver log.

    ``target_latency`` is the latency bound the governing rule required for a
    pass: expert_latency / 0.9 for lineage-recovery trials (achieved speed at
    least 90% of source performance), or the bound implied by the skill's
    effect window for single-skill admission trials.
    """

    skill_id: str
    start_state_id: str
    achieved_latency: float | None
    target_latency: float
    result: TrialResult
    cost_dollars: Decimal = Decimal("0")
    transcript_ref: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "skill_id": self.skill_id,
            "start_state_id": self.start_state_id,
            "achieved_latency": self.achieved_latency,
            "target_latency": self.target_latency,
            "result": self.result.value,
            "cost_dollars": str(self.cost_dollars),
            "transcript_ref": self.transcript_ref,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RoundtripTrial":
        achieved = data.get("achieved_latency")
        return cls(
            skill_id=str(data["skill_id"]),
            start_state_id=str(data["start_state_id"]),
            achieved_latency=float(achieved) if achieved is not None else None,
            target_latency=float(data["target_latency"]),
            result=_enum(TrialResult, data["result"], "RoundtripTrial.result"),
            cost_dollars=Decimal(str(data.get("cost_dollars", "0"))),
            transcript_ref=str(data.get("transcript_ref", "")),
        )


@dataclass(frozen=True)
class SkillCard(Model):
    """The nine-field skill record: intent, anchor, carrier, pre, effect,
    evidence, risk, scope, ver; plus id, status, and the action category the
    evidence cluster shares (needed to extend applied-action sets on reuse).
    """

    id: str
    intent: Intent
    anchor: AnchorPattern
    carrier: Carrier
    pre: tuple[Predicate, ...]
    effect: EffectRange
    evidence: tuple[str, ...]
    risk: tuple[RiskEvidence, ...]
    scope: Scope
    ver: tuple[RoundtripTrial, ...] = ()
    status: SkillStatus = SkillStatus.HYPOTHESIS
    action_category: str = ""
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.evidence:
            _fail("SkillCard.evidence", "must be non-empty")
        successes = sum(1 for t in self.ver if t.result is TrialResult.SUCCESS)
        if self.status is SkillStatus.ADMITTED and successes == 0:
            _fail("SkillCard.status", "admitted requires at least one successful trial in ver")
        if self.status is SkillStatus.HYPOTHESIS and successes > 0:
            _fail("SkillCard.status", "a hypothesis with a successful trial must be admitted")

    @classmethod
    def create(
        cls,
        intent: Intent,
        anchor: AnchorPattern,
        carrier: Carrier,
        pre: Iterable[Predicate],
        effect: EffectRange,
        evidence: Iterable[str],
        risk: Iterable[RiskEvidence],
        scope: Scope,
        action_category: str,
    ) -> "SkillCard":
        sid = content_digest(
            {
                "intent": intent.name,
                "structural_tag": anchor.structural_tag,
                "symbol_glob": anchor.symbol_glob,
                "carrier_kind": carrier.kind.value,
                "carrier_body": carrier.body,
                "action_category": action_category,
            }
        )
        return cls(
            id=sid,
            intent=intent,
            anchor=anchor,
            carrier=carrier,
            pre=tuple(pre),
            effect=effect,
            evidence=tuple(evidence),
            risk=tuple(risk),
            scope=scope,
            action_category=action_category,
        )

    @property
    def required_actions(self) -> tuple[str, ...]:
        return tuple(p.value for p in self.pre if p.kind == "requires_action")

    def record_trial(self, trial: RoundtripTrial) -> "SkillCard":
        """Append a trial; the first success flips hypothesis to admitted."""
        status = self.status
        if trial.result is TrialResult.SUCCESS and status is SkillStatus.HYPOTHESIS:
            status = SkillStatus.ADMITTED
        return replace(self, ver=self.ver + (trial,), status=status)

    def retire(self) -> "SkillCard":
        return replace(self, status=SkillStatus.RETIRED)

    def validate_pre(self, registry: Registry) -> None:
        for action in self.required_actions:
            if not registry.has_action(action):
                _fail("SkillCard.pre", f"action {action!r} not in the action vocabulary registry")

    def to_dict(self) -> dict[str, Any]:
        known = {
            "id": self.id,
            "intent": self.intent.to_dict(),
            "anchor": self.anchor.to_dict(),
            "carrier": self.carrier.to_dict(),
            "pre": [p.to_dict() for p in self.pre],
            "effect": self.effect.to_dict(),
            "evidence": list(self.evidence),
            "risk": [r.to_dict() for r in self.risk],
            "scope": self.scope.to_dict(),
            "ver": [t.to_dict() for t in self.ver],
            "status": self.status.value,
            "action_category": self.action_category,
        }
        return _base_dict(self, known, self.extra)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "SkillCard":
        _check_schema_version(data, "SkillCard")
        known = (
            "id",
            "intent",
            "anchor",
            "carrier",
            "pre",
            "effect",
            "evidence",
            "risk",
            "scope",
            "ver",
            "status",
            "action_category",
        )
        return cls(
            id=str(data["id"]),
            intent=Intent.from_dict(data["intent"]),
            anchor=AnchorPattern.from_dict(data["anchor"]),
            carrier=Carrier.from_dict(data["carrier"]),
            pre=tuple(Predicate.from_dict(p) for p in data.get("pre", [])),
            effect=EffectRange.from_dict(data["effect"]),
            evidence=_str_tuple(data["evidence"], "SkillCard.evidence"),
            risk=tuple(RiskEvidence.from_dict(r) for r in data.get("risk", [])),
            scope=Scope.from_dict(data["scope"]),
            ver=tuple(RoundtripTrial.from_dict(t) for t in data.get("ver", [])),
            status=_enum(SkillStatus, data.get("status", "hypothesis"), "SkillCard.status"),
            action_category=str(data.get("action_category", "")),
            extra=_split_extra(data, known),
        )
