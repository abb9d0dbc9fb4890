"""Content-addressed artifact store and append-only event logs.

Layout under one root directory:

    states/<id>.json        one document per kernel state
    lineages/<expert>.json  self-contained lineage chains
    skills/<id>.json        skill cards (hypotheses and admitted)
    risk/<expert>.jsonl     rejection evidence per induction run
    events/<run_id>.jsonl   one record per proposal/accept/reject
    sessions/<id>.jsonl     one record per online submission

Many concurrent readers are fine; writers serialize through an advisory
lock file.  Malformed documents are reported and skipped on load, never
repaired.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import InvariantViolation, StoreLocked
from .model import (
    KernelState,
    Lineage,
    Provenance,
    RiskEvidence,
    ScopeEntry,
    SkillCard,
    canonical_json,
)
from .registry import Registry, default_registry


class EventLog:
    """Append-only JSON-lines log."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def emit(self, record: dict[str, Any]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(canonical_json(record) + "\n")

    def read(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        out = []
        with self.path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out


@dataclass
class LoadReport:
    """Result of a bulk load: good documents plus isolated failures."""

    skills: list[SkillCard] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def _merge_scope_entries(
    existing: tuple[ScopeEntry, ...], incoming: tuple[ScopeEntry, ...]
) -> tuple[ScopeEntry, ...]:
    merged = {(e.value, e.provenance): list(e.witnesses) for e in existing}
    for e in incoming:
        key = (e.value, e.provenance)
        if key in merged:
            for w in e.witnesses:
                if w not in merged[key]:
                    merged[key].append(w)
        else:
            merged[key] = list(e.witnesses)
    return tuple(
        ScopeEntry(value=value, provenance=prov, witnesses=tuple(wits))
        for (value, prov), wits in merged.items()
    )


class Store:
    def __init__(self, root: Path | str, registry: Registry | None = None):
        self.root = Path(root)
        self.registry = registry or default_registry()
        for sub in ("states", "lineages", "skills", "risk", "events", "sessions"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        registry_path = self.root / "registry.json"
        if registry_path.exists():
            self.registry.merge_dict(json.loads(registry_path.read_text(encoding="utf-8")))

    def save_registry(self) -> Path:
        path = self.root / "registry.json"
        path.write_text(
            json.dumps(self.registry.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return path

    # -- locking -------------------------------------------------------------

    def write_lock(self, timeout: float = 5.0) -> "_WriteLock":
        return _WriteLock(self.root / ".write-lock", timeout)

    # -- states ---------------------------------------------------------------

    def save_state(self, state: KernelState) -> Path:
        path = self.root / "states" / f"{state.id}.json"
        path.write_text(state.to_json(), encoding="utf-8")
        return path

    def load_state(self, state_id: str) -> KernelState:
        path = self.root / "states" / f"{state_id}.json"
        return KernelState.from_json(path.read_text(encoding="utf-8"))

    def iter_states(self) -> Iterator[KernelState]:
        for path in sorted((self.root / "states").glob("*.json")):
            yield KernelState.from_json(path.read_text(encoding="utf-8"))

    # -- lineages ---------------------------------------------------------------

    def save_lineage(self, lineage: Lineage) -> Path:
        path = self.root / "lineages" / f"{lineage.expert_id}.json"
        path.write_text(lineage.to_json(), encoding="utf-8")
        for state in lineage.states:
            self.save_state(state)
        return path

    def load_lineage(self, expert_id: str) -> Lineage:
        path = self.root / "lineages" / f"{expert_id}.json"
        return Lineage.from_json(path.read_text(encoding="utf-8"))

    def iter_lineages(self) -> Iterator[Lineage]:
        for path in sorted((self.root / "lineages").glob("*.json")):
            yield Lineage.from_json(path.read_text(encoding="utf-8"))

    # -- risk evidence ------------------------------------------------------------

    def save_risks(self, expert_id: str, risks: Iterable[RiskEvidence]) -> Path:
        path = self.root / "risk" / f"{expert_id}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            for risk in risks:
                fh.write(canonical_json(risk.to_dict()) + "\n")
        return path

    def iter_risks(self) -> Iterator[RiskEvidence]:
        for path in sorted((self.root / "risk").glob("*.jsonl")):
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        yield RiskEvidence.from_dict(json.loads(line))

    # -- event and session logs ----------------------------------------------------

    def event_log(self, run_id: str) -> EventLog:
        return EventLog(self.root / "events" / f"{run_id}.jsonl")

    def session_log(self, session_id: str) -> EventLog:
        return EventLog(self.root / "sessions" / f"{session_id}.jsonl")

    # -- skills ---------------------------------------------------------------------

    def _skill_path(self, skill_id: str) -> Path:
        return self.root / "skills" / f"{skill_id}.json"

    def _dedup_candidate(self, card: SkillCard) -> SkillCard | None:
        """Find a stored card matching the dedup key (intent name, anchor
        structural tag, scope signature).  A match merges only when the
        carriers agree; a carrier conflict is a distinct realization and is
        stored as its own card."""
        key = (card.intent.name, card.anchor.structural_tag, card.scope.signature())
        for existing in self.load_skills().skills:
            if (existing.intent.name, existing.anchor.structural_tag, existing.scope.signature()) == key:
                if existing.carrier == card.carrier:
                    return existing
        return None

    def store_skill(self, card: SkillCard) -> SkillCard:
        """Content-addressed write with duplicate merging.

        Returns the card as stored (the merged card when deduplicated).
        """
        card.validate_pre(self.registry)
        with self.write_lock():
            existing = self._dedup_candidate(card)
            if existing is not None and existing.id != card.id:
                # Same identity written under a different digest should not
                # happen for cards built through SkillCard.create; treat the
                # stored card as authoritative and merge into it.
                card = self._merge(existing, card)
            elif self._skill_path(card.id).exists():
                stored = SkillCard.from_json(self._skill_path(card.id).read_text(encoding="utf-8"))
                card = self._merge(stored, card)
            self._skill_path(card.id).write_text(card.to_json(), encoding="utf-8")
        return card

    @staticmethod
    def _merge(existing: SkillCard, incoming: SkillCard) -> SkillCard:
        from dataclasses import replace

        evidence = list(existing.evidence)
        for tid in incoming.evidence:
            if tid not in evidence:
                evidence.append(tid)
        risk = list(existing.risk)
        for r in incoming.risk:
            if r not in risk:
                risk.append(r)
        ver = list(existing.ver)
        for t in incoming.ver:
            if t not in ver:
                ver.append(t)
        scope = replace(
            existing.scope,
            cases=_merge_scope_entries(existing.scope.cases, incoming.scope.cases),
            languages=_merge_scope_entries(existing.scope.languages, incoming.scope.languages),
            platforms=_merge_scope_entries(existing.scope.platforms, incoming.scope.platforms),
            prior_action_sets=_merge_scope_entries(
                existing.scope.prior_action_sets, incoming.scope.prior_action_sets
            ),
        )
        status = existing.status
        if incoming.status.value == "admitted" and status.value == "hypothesis":
            status = incoming.status
        return replace(
            existing,
            evidence=tuple(evidence),
            risk=tuple(risk),
            ver=tuple(ver),
            scope=scope,
            status=status,
        )

    _STATUS_RANK = {"hypothesis": 0, "admitted": 1, "retired": 2}

    def replace_skill(self, card: SkillCard) -> None:
        """Overwrite a card in place (status/ver updates keep the same id).

        Admission status only moves forward (hypothesis -> admitted ->
        retired); a rewrite that would move it back is rejected.
        """
        card.validate_pre(self.registry)
        with self.write_lock():
            path = self._skill_path(card.id)
            if path.exists():
                stored = SkillCard.from_json(path.read_text(encoding="utf-8"))
                if self._STATUS_RANK[card.status.value] < self._STATUS_RANK[stored.status.value]:
                    raise InvariantViolation(
                        f"skill {card.id[:12]}: status cannot move back from "
                        f"{stored.status.value} to {card.status.value}"
                    )
            path.write_text(card.to_json(), encoding="utf-8")

    def load_skills(self) -> LoadReport:
        report = LoadReport()
        for path in sorted((self.root / "skills").glob("*.json")):
            try:
                card = SkillCard.from_json(path.read_text(encoding="utf-8"))
                card.validate_pre(self.registry)
                report.skills.append(card)
            except (InvariantViolation, KeyError, ValueError) as exc:
                report.errors.append((str(path), str(exc)))
        return report

    # -- audit -----------------------------------------------------------------------

    def validate_store(self) -> list[str]:
        """Invariant audit over everything on disk; returns violation strings."""
        problems: list[str] = []
        for path in sorted((self.root / "states").glob("*.json")):
            try:
                state = KernelState.from_json(path.read_text(encoding="utf-8"))
                if path.stem != state.id:
                    problems.append(f"{path.name}: filename does not match state id")
            except (InvariantViolation, KeyError, ValueError) as exc:
                problems.append(f"{path.name}: {exc}")
        for path in sorted((self.root / "lineages").glob("*.json")):
            try:
                Lineage.from_json(path.read_text(encoding="utf-8"))
            except (InvariantViolation, KeyError, ValueError) as exc:
                problems.append(f"{path.name}: {exc}")
        load = self.load_skills()
        problems.extend(f"{Path(p).name}: {msg}" for p, msg in load.errors)
        for card in load.skills:
            problems.extend(self._audit_scope(card))
        return problems

    @staticmethod
    def _audit_scope(card: SkillCard) -> list[str]:
        problems = []
        for dim_name, entries in (
            ("cases", card.scope.cases),
            ("languages", card.scope.languages),
            ("platforms", card.scope.platforms),
            ("prior_action_sets", card.scope.prior_action_sets),
        ):
            for entry in entries:
                if entry.provenance is Provenance.VERIFIED and not entry.witnesses:
                    problems.append(f"skill {card.id[:12]}: verified {dim_name} entry lacks witnesses")
        return problems


class _WriteLock:
    def __init__(self, path: Path, timeout: float):
        self.path = path
        self.timeout = timeout
        self._fd: int | None = None

    def __enter__(self) -> "_WriteLock":
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(self._fd, str(os.getpid()).encode())
                return self
            except FileExistsError:
                if time.monotonic() >= deadline:
                    raise StoreLocked(f"could not acquire {self.path} within {self.timeout}s") from None
                time.sleep(0.02)

    def __exit__(self, *exc_info: Any) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
