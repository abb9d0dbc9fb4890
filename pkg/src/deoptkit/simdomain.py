"""Deterministic synthetic kernel domain: a precondition lattice with
multiplicative latency effects.

A sim "kernel" is a canonical text listing the actions applied to a case.
Applying an action without its preconditions fails correctness at the gate,
which is the desk-scale stand-in for vectorizing a misaligned access or
pipelining before staging exists.  Effects multiply and commute, so exact
brute-force oracles stay exact.

The module implements all three pluggable protocols (runner, rewriter,
lifter) both in-process and as a subprocess speaking the same JSON-lines
exchange, so the external-process path can be tested bit-for-bit.
"""

from __future__ import annotations

import itertools
import math
import random
import sys
from dataclasses import dataclass, field
from typing import Any, IO, Iterable, Iterator, Mapping

from .errors import DeoptError, InvalidAction, ProtocolError
from .model import KernelState, Role, canonical_json
from .registry import DEFAULT_STRUCTURAL_TAGS, ActionInfo, Registry, default_registry

SOURCE_HEADER = "sim kernel"
EFFECT_FACTOR_GRID = (0.5, 0.6, 0.7, 0.75, 0.8, 0.85, 0.9)


class CorrectnessFailure(DeoptError):
    """A sim state violates a precondition; the gate reports wrong output."""

    def __init__(self, missing: Iterable[str]):
        self.missing = tuple(sorted(missing))
        super().__init__(f"unmet preconditions: {', '.join(self.missing)}")


# ---------------------------------------------------------------------------
# canonical source encoding
# ---------------------------------------------------------------------------


def encode_source(case_id: str, actions: Iterable[str] = (), wrapper_latency: float | None = None) -> str:
    """Canonical sim program text for an applied-action set.

    Actions are written sorted so that any application order of the same set
    digests to the same state id.  A wrapper program carries the latency its
    fallback path would appear to run at instead of an action list.
    """
    lines = [SOURCE_HEADER, f"case={case_id}"]
    if wrapper_latency is not None:
        lines.append(f"wrapper latency={wrapper_latency!r}")
    else:
        lines.extend(f"action {a}" for a in sorted(actions))
    return "\n".join(lines) + "\n"


def decode_source(source_text: str) -> tuple[str, frozenset[str], float | None]:
    """Parse (case_id, actions, wrapper_latency); raises ProtocolError if malformed."""
    lines = [ln for ln in source_text.splitlines() if ln.strip()]
    if not lines or lines[0] != SOURCE_HEADER:
        raise ProtocolError("not a sim kernel source")
    if len(lines) < 2 or not lines[1].startswith("case="):
        raise ProtocolError("missing case line")
    case_id = lines[1][len("case=") :]
    actions: set[str] = set()
    wrapper_latency: float | None = None
    for line in lines[2:]:
        if line.startswith("action "):
            actions.add(line[len("action ") :].strip())
        elif line.startswith("wrapper latency="):
            wrapper_latency = float(line[len("wrapper latency=") :])
        else:
            raise ProtocolError(f"unknown directive: {line!r}")
    return case_id, frozenset(actions), wrapper_latency


# ---------------------------------------------------------------------------
# lattice and table case specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeAction:
    id: str
    effect_factor: float
    preconditions: frozenset[str] = frozenset()
    locus_tag: str = "other"

    def __post_init__(self) -> None:
        if not 0 < self.effect_factor <= 1:
            raise InvalidAction(f"effect_factor must be in (0, 1], got {self.effect_factor}")


@dataclass(frozen=True)
class LatticeSpec:
    """An acyclic action DAG with multiplicative latency effects."""

    case_id: str
    base_latency: float
    actions: tuple[LatticeAction, ...]
    language: str = "sim"
    platform: str = "sim"
    reference_latency: float | None = None
    noise_sigma: float = 0.0
    noise_seed: int = 0

    def __post_init__(self) -> None:
        if self.base_latency <= 0:
            raise InvalidAction("base_latency must be positive")
        ids = {a.id for a in self.actions}
        for a in self.actions:
            unknown = a.preconditions - ids
            if unknown:
                raise InvalidAction(f"{a.id} requires unknown actions {sorted(unknown)}")
        self._check_acyclic()

    def _check_acyclic(self) -> None:
        color: dict[str, int] = {}

        def visit(aid: str, trail: tuple[str, ...]) -> None:
            if color.get(aid) == 1:
                raise InvalidAction(f"precondition cycle through {aid}: {' -> '.join(trail)}")
            if color.get(aid) == 2:
                return
            color[aid] = 1
            for dep in self.action(aid).preconditions:
                visit(dep, trail + (dep,))
            color[aid] = 2

        for a in self.actions:
            visit(a.id, (a.id,))

    def action(self, action_id: str) -> LatticeAction:
        for a in self.actions:
            if a.id == action_id:
                return a
        raise InvalidAction(f"unknown action id: {action_id!r}")

    def action_ids(self) -> frozenset[str]:
        return frozenset(a.id for a in self.actions)

    def to_case_spec(self) -> dict[str, Any]:
        return {
            "kind": "lattice",
            "case_id": self.case_id,
            "base_latency": self.base_latency,
            "reference_latency": self.reference_latency,
            "language": self.language,
            "platform": self.platform,
            "noise_sigma": self.noise_sigma,
            "noise_seed": self.noise_seed,
            "actions": [
                {
                    "id": a.id,
                    "effect_factor": a.effect_factor,
                    "preconditions": sorted(a.preconditions),
                    "locus_tag": a.locus_tag,
                }
                for a in self.actions
            ],
        }

    @classmethod
    def from_case_spec(cls, spec: Mapping[str, Any]) -> "LatticeSpec":
        return cls(
            case_id=str(spec["case_id"]),
            base_latency=float(spec["base_latency"]),
            actions=tuple(
                LatticeAction(
                    id=str(a["id"]),
                    effect_factor=float(a["effect_factor"]),
                    preconditions=frozenset(a.get("preconditions", [])),
                    locus_tag=str(a.get("locus_tag", "other")),
                )
                for a in spec["actions"]
            ),
            language=str(spec.get("language", "sim")),
            platform=str(spec.get("platform", "sim")),
            reference_latency=spec.get("reference_latency"),
            noise_sigma=float(spec.get("noise_sigma", 0.0)),
            noise_seed=int(spec.get("noise_seed", 0)),
        )

    def state(self, actions: Iterable[str] = (), role: Role = Role.CANDIDATE) -> KernelState:
        """Build the canonical KernelState for an applied-action set."""
        ordered = tuple(sorted(actions))
        return KernelState.create(
            source_text=encode_source(self.case_id, ordered),
            language=self.language,
            platform=self.platform,
            case_id=self.case_id,
            applied_actions=ordered,
            role=role,
        )

    def with_case(self, case_id: str) -> "LatticeSpec":
        """Same lattice under a fresh case id (a held-out instance)."""
        from dataclasses import replace

        return replace(self, case_id=case_id)

    def expert_state(self) -> KernelState:
        return self.state(sorted(self.action_ids()), role=Role.EXPERT)

    def registry(self) -> Registry:
        """Default registry extended with this lattice's action vocabulary."""
        reg = default_registry()
        for a in self.actions:
            reg.register_action(ActionInfo(a.id, a.locus_tag, a.preconditions))
        return reg

    def valid_states(self, max_size: int | None = None) -> Iterator[frozenset[str]]:
        """Enumerate precondition-closed action sets, smallest first."""
        ids = sorted(self.action_ids())
        top = len(ids) if max_size is None else max_size
        for size in range(0, top + 1):
            for combo in itertools.combinations(ids, size):
                chosen = frozenset(combo)
                if all(self.action(a).preconditions <= chosen for a in chosen):
                    yield chosen


def sim_latency(spec: LatticeSpec, applied_actions: Iterable[str]) -> float:
    """Latency of a lattice state, or CorrectnessFailure if any precondition
    of an applied action is missing (the state computes the wrong answer)."""
    applied = frozenset(applied_actions)
    missing: set[str] = set()
    for aid in sorted(applied):
        action = spec.action(aid)
        missing.update(action.preconditions - applied)
    if missing:
        raise CorrectnessFailure(missing)
    latency = spec.base_latency
    for aid in sorted(applied):
        latency *= spec.action(aid).effect_factor
    return latency


@dataclass(frozen=True)
class TableSpec:
    """Scripted case: an explicit map from applied-action set to latency.

    Used to replay recorded deoptimization chains; any state outside the
    table fails correctness.
    """

    case_id: str
    states: tuple[tuple[frozenset[str], float], ...]
    language: str = "sim"
    platform: str = "sim"
    reference_latency: float | None = None

    def latency(self, applied: frozenset[str]) -> float:
        for actions, latency in self.states:
            if actions == applied:
                return latency
        raise CorrectnessFailure(("<not in recorded state table>",))

    def to_case_spec(self) -> dict[str, Any]:
        return {
            "kind": "table",
            "case_id": self.case_id,
            "language": self.language,
            "platform": self.platform,
            "reference_latency": self.reference_latency,
            "states": [
                {"actions": sorted(actions), "latency": latency} for actions, latency in self.states
            ],
        }

    @classmethod
    def from_case_spec(cls, spec: Mapping[str, Any]) -> "TableSpec":
        return cls(
            case_id=str(spec["case_id"]),
            states=tuple(
                (frozenset(s["actions"]), float(s["latency"])) for s in spec["states"]
            ),
            language=str(spec.get("language", "sim")),
            platform=str(spec.get("platform", "sim")),
            reference_latency=spec.get("reference_latency"),
        )

    def state(self, actions: Iterable[str], role: Role = Role.CANDIDATE) -> KernelState:
        ordered = tuple(sorted(actions))
        return KernelState.create(
            source_text=encode_source(self.case_id, ordered),
            language=self.language,
            platform=self.platform,
            case_id=self.case_id,
            applied_actions=ordered,
            role=role,
        )


def load_case_spec(spec: Mapping[str, Any]) -> LatticeSpec | TableSpec:
    kind = spec.get("kind", "lattice")
    if kind == "lattice":
        return LatticeSpec.from_case_spec(spec)
    if kind == "table":
        return TableSpec.from_case_spec(spec)
    raise ProtocolError(f"unknown case spec kind: {kind!r}")


# ---------------------------------------------------------------------------
# oracles and generators
# ---------------------------------------------------------------------------


def brute_force_best(spec: LatticeSpec, max_steps: int) -> tuple[float, tuple[str, ...]]:
    """Exhaustive search over valid application orders up to ``max_steps``.

    Independent of ``sim_latency``: recomputes products itself.  Ties between
    equally fast end states resolve to the lexicographically smallest witness
    order, so the result is deterministic.
    """
    factors = {a.id: a.effect_factor for a in spec.actions}
    pre = {a.id: a.preconditions for a in spec.actions}
    best_latency = spec.base_latency
    best_order: tuple[str, ...] = ()
    frontier: list[tuple[frozenset[str], tuple[str, ...], float]] = [
        (frozenset(), (), spec.base_latency)
    ]
    seen: set[frozenset[str]] = {frozenset()}
    for _ in range(max_steps):
        next_frontier: list[tuple[frozenset[str], tuple[str, ...], float]] = []
        for applied, order, latency in frontier:
            for aid in sorted(factors):
                if aid in applied or not pre[aid] <= applied:
                    continue
                new_applied = applied | {aid}
                new_latency = latency * factors[aid]
                new_order = order + (aid,)
                if new_latency < best_latency or (
                    new_latency == best_latency and new_order < best_order
                ):
                    best_latency = new_latency
                    best_order = new_order
                if new_applied not in seen:
                    seen.add(new_applied)
                    next_frontier.append((new_applied, new_order, new_latency))
        frontier = next_frontier
        if not frontier:
            break
    return best_latency, best_order


def generate_random_lattice(seed: int, n_actions: int, chain_depth: int) -> LatticeSpec:
    """Seeded, reproducible lattice with one guaranteed precondition chain of
    length ``chain_depth``; effect factors come from a fixed grid."""
    if not n_actions >= chain_depth >= 1:
        raise InvalidAction("need n_actions >= chain_depth >= 1")
    rng = random.Random(seed)
    ids = [f"a{idx:02d}" for idx in range(n_actions)]
    actions: list[LatticeAction] = []
    for idx, aid in enumerate(ids):
        if 0 < idx < chain_depth:
            preconditions = frozenset({ids[idx - 1]})
        elif idx >= chain_depth and idx > 0 and rng.random() < 0.5:
            n_pre = rng.randint(1, min(2, idx))
            preconditions = frozenset(rng.sample(ids[:idx], n_pre))
        else:
            preconditions = frozenset()
        actions.append(
            LatticeAction(
                id=aid,
                effect_factor=rng.choice(EFFECT_FACTOR_GRID),
                preconditions=preconditions,
                locus_tag=rng.choice(DEFAULT_STRUCTURAL_TAGS),
            )
        )
    return LatticeSpec(
        case_id=f"lattice-{seed}",
        base_latency=rng.choice((100.0, 250.0, 500.0, 1000.0)),
        actions=tuple(actions),
    )


# ---------------------------------------------------------------------------
# runner protocol
# ---------------------------------------------------------------------------


def _profile_samples(latency: float, reps: int, spec: LatticeSpec | TableSpec, state_id: str) -> list[float]:
    sigma = getattr(spec, "noise_sigma", 0.0)
    if sigma <= 0:
        return [latency] * reps
    rng = random.Random(f"{getattr(spec, 'noise_seed', 0)}:{state_id}:{reps}")
    return [latency * math.exp(rng.gauss(0.0, sigma)) for _ in range(reps)]


class SimRunner:
    """In-process gate runner for sim cases.

    ``run`` mirrors the subprocess exchange exactly: it always returns a
    response dict and never raises, so the in-process and external paths are
    bit-for-bit comparable.
    """

    def run(self, request: Mapping[str, Any]) -> dict[str, Any]:
        try:
            return self._dispatch(request)
        except CorrectnessFailure as exc:
            return {"ok": False, "detail": str(exc), "failure_kind": "incorrect"}
        except (ProtocolError, InvalidAction, KeyError, ValueError) as exc:
            return {"ok": False, "detail": f"{type(exc).__name__}: {exc}", "failure_kind": "protocol_error"}

    def _dispatch(self, request: Mapping[str, Any]) -> dict[str, Any]:
        phase = request["phase"]
        spec = load_case_spec(request["case"])
        source = request["state"]["source_text"]
        if phase == "compile":
            return self._compile(spec, source)
        if phase in ("correctness", "probe"):
            poison = bool(request.get("poison_reference", phase == "probe"))
            return self._correctness(spec, source, poison)
        if phase == "profile":
            reps = int(request["config"]["reps"])
            return self._profile(spec, source, reps, request["state"].get("id", ""))
        raise ProtocolError(f"unknown phase: {phase!r}")

    def _parse(self, spec: LatticeSpec | TableSpec, source: str) -> tuple[frozenset[str], float | None]:
        case_id, actions, wrapper_latency = decode_source(source)
        if case_id != spec.case_id:
            raise CorrectnessFailure((f"<case mismatch: {case_id}>",))
        return actions, wrapper_latency

    def _compile(self, spec: LatticeSpec | TableSpec, source: str) -> dict[str, Any]:
        try:
            _, actions, wrapper_latency = decode_source(source)
        except ProtocolError as exc:
            return {"ok": False, "detail": str(exc), "failure_kind": "compile_fail"}
        if wrapper_latency is None and isinstance(spec, LatticeSpec):
            unknown = actions - spec.action_ids()
            if unknown:
                return {
                    "ok": False,
                    "detail": f"undefined actions: {', '.join(sorted(unknown))}",
                    "failure_kind": "compile_fail",
                }
        return {"ok": True, "detail": ""}

    def _correctness(self, spec: LatticeSpec | TableSpec, source: str, poison: bool) -> dict[str, Any]:
        actions, wrapper_latency = self._parse(spec, source)
        if wrapper_latency is not None:
            if poison:
                return {
                    "ok": False,
                    "detail": "reference path poisoned; wrapper fallback raised",
                    "failure_kind": "wrapper",
                }
            return {"ok": True, "detail": "matches reference (via fallback)"}
        self._latency(spec, actions)
        return {"ok": True, "detail": "matches reference"}

    def _profile(self, spec: LatticeSpec | TableSpec, source: str, reps: int, state_id: str) -> dict[str, Any]:
        actions, wrapper_latency = self._parse(spec, source)
        latency = wrapper_latency if wrapper_latency is not None else self._latency(spec, actions)
        return {"ok": True, "detail": "", "samples": _profile_samples(latency, reps, spec, state_id)}

    @staticmethod
    def _latency(spec: LatticeSpec | TableSpec, actions: frozenset[str]) -> float:
        if isinstance(spec, LatticeSpec):
            return sim_latency(spec, actions)
        return spec.latency(actions)


# ---------------------------------------------------------------------------
# rewriter protocol
# ---------------------------------------------------------------------------


def _synthetic_usage(action: str) -> dict[str, int]:
    # Fixed per-action token table so budget logic is testable offline.
    return {
        "input_tokens": 400 + 60 * len(action),
        "output_tokens": 120 + 30 * len(action),
    }


class SimRewriter:
    """Deterministic rewriter over the canonical source encoding.

    Edits always "succeed" textually even when the result is invalid: adding
    an action whose precondition is unmet, or removing an action something
    else depends on, produces a well-formed source that the gate then fails.
    That is how the sim reproduces forward-search failures.
    """

    def run(self, request: Mapping[str, Any]) -> dict[str, Any]:
        try:
            return self._dispatch(request)
        except (ProtocolError, KeyError, ValueError) as exc:
            return {"ok": False, "detail": f"{type(exc).__name__}: {exc}"}

    def _dispatch(self, request: Mapping[str, Any]) -> dict[str, Any]:
        kind = request["kind"]
        action = request["action"]
        case_id, actions, wrapper_latency = decode_source(request["source_text"])
        if wrapper_latency is not None:
            raise ProtocolError("cannot edit a wrapper program")
        if kind == "backward_remove":
            edited = actions - {action}
        elif kind in ("forward_add", "materialize"):
            edited = actions | {action}
        else:
            raise ProtocolError(f"unknown rewrite kind: {kind!r}")
        return {
            "ok": True,
            "source_text": encode_source(case_id, edited),
            "usage": _synthetic_usage(action),
        }


# ---------------------------------------------------------------------------
# lifter protocol
# ---------------------------------------------------------------------------


class SimLifter:
    """Deterministic stand-in for the LLM lift.

    Given a cluster payload it names the intent after the shared action,
    anchors on the cluster's structural tag, and copies the smallest
    transition's forward diff as a diff-sketch carrier.  Preconditions come
    from the case spec when one is attached (modeling a competent reader of
    the domain); otherwise from the intersection of the observed from-state
    action sets.
    """

    def run(self, request: Mapping[str, Any]) -> dict[str, Any]:
        try:
            return self._dispatch(request)
        except (ProtocolError, KeyError, ValueError, IndexError) as exc:
            return {"ok": False, "detail": f"{type(exc).__name__}: {exc}"}

    def _dispatch(self, request: Mapping[str, Any]) -> dict[str, Any]:
        cluster = request["cluster"]
        action = cluster["action_category"]
        members = sorted(cluster["members"], key=lambda m: m["transition_id"])
        first = members[0]
        case_spec = request.get("case_spec")
        if case_spec and case_spec.get("kind", "lattice") == "lattice":
            spec = LatticeSpec.from_case_spec(case_spec)
            required = sorted(spec.action(action).preconditions)
        else:
            observed = [frozenset(m.get("from_applied_actions", [])) for m in members]
            required = sorted(frozenset.intersection(*observed)) if observed else []
        return {
            "ok": True,
            "intent": {
                "name": action,
                "description": f"restore the {action} optimization at {first['locus']['structural_tag']} sites",
            },
            "anchor": {"structural_tag": first["locus"]["structural_tag"], "symbol_glob": action},
            "carrier": {"kind": "diff_sketch", "body": first["forward_diff"]},
            "pre": [{"kind": "requires_action", "value": r} for r in required],
        }


# ---------------------------------------------------------------------------
# subprocess serving (JSON lines on stdin/stdout)
# ---------------------------------------------------------------------------

_HANDLERS = {"runner": SimRunner, "rewriter": SimRewriter, "lifter": SimLifter}


def serve(kind: str, stdin: IO[str] | None = None, stdout: IO[str] | None = None) -> int:
    """Serve one of the sim protocols over newline-delimited JSON."""
    import json as _json

    if kind not in _HANDLERS:
        raise ProtocolError(f"unknown sim service: {kind!r}")
    handler = _HANDLERS[kind]()
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = _json.loads(line)
            response = handler.run(request)
        except Exception as exc:  # malformed request line
            response = {"ok": False, "detail": f"{type(exc).__name__}: {exc}", "failure_kind": "protocol_error"}
        stdout.write(canonical_json(response) + "\n")
        stdout.flush()
    return 0


# ---------------------------------------------------------------------------
# trial runner (holdout pool over lattice states)
# ---------------------------------------------------------------------------


class LatticeTrialRunner:
    """Admission trial runner over a lattice's valid states.

    Holdout starts are valid states that satisfy the hypothesis's required
    prior actions, do not already contain its action, and are not evidence
    states.  Same-case non-evidence states are offered first (smallest
    first); when the lineage walk has consumed them all, starts come from a
    held-out instance of the same case, whose states are never evidence
    because the case id participates in every state digest.
    """

    def __init__(
        self,
        spec: LatticeSpec,
        gate_config: Any,
        evidence_states: frozenset[str],
        holdout_spec: LatticeSpec | None = None,
    ):
        from .gate import GateConfig

        self.spec = spec
        self.holdout_spec = holdout_spec or spec.with_case(f"{spec.case_id}-holdout")
        self.gate_config = gate_config if gate_config is not None else GateConfig()
        self.evidence_states = evidence_states
        self.runner = SimRunner()
        self.agent = SimRewriter()

    def _candidates(self, spec: LatticeSpec, hypothesis: Any) -> Iterator[KernelState]:
        required = frozenset(hypothesis.required_actions)
        forbidden = frozenset(hypothesis.scope.prior_actions_forbidden)
        for actions in spec.valid_states():
            if not required <= actions:
                continue
            if hypothesis.action_category in actions:
                continue
            if forbidden & actions:
                continue
            state = spec.state(actions)
            if state.id in self.evidence_states:
                continue
            yield state

    def starts(self, hypothesis: Any) -> Iterator[KernelState]:
        yield from self._candidates(self.spec, hypothesis)
        yield from self._candidates(self.holdout_spec, hypothesis)

    def _case_for(self, start: KernelState) -> LatticeSpec:
        return self.spec if start.case_id == self.spec.case_id else self.holdout_spec

    def run(self, hypothesis: Any, start: KernelState) -> Any:
        from .lift import run_roundtrip

        return run_roundtrip(
            hypothesis,
            start,
            agent=self.agent,
            case=self._case_for(start),
            gate_config=self.gate_config,
            runner=self.runner,
            evidence_states=self.evidence_states,
            transcript_ref=f"sim://trial/{hypothesis.id[:12]}/{start.id[:12]}",
        )


# A small built-in lattice used by docs, demos, and the `sim` CLI command.
def demo_lattice() -> LatticeSpec:
    return LatticeSpec(
        case_id="demo",
        base_latency=1000.0,
        actions=(
            LatticeAction("tile", 0.5, frozenset(), "loop_nest"),
            LatticeAction("vectorize", 0.8, frozenset({"tile"}), "global_memory_op"),
            LatticeAction("pipeline", 0.7, frozenset({"vectorize"}), "smem_stage"),
        ),
    )
