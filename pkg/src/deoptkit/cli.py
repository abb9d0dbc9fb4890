"""Command-line interface.

Subcommands mirror the pipeline stages: ``induce``, ``lift``, ``admit``,
``retrieve``, ``optimize``, ``report``, plus ``sim`` (demo / protocol
server) and ``validate-store`` (invariant audit).

Exit codes: 0 success, 2 validation or invariant failure, 3 budget
exhausted, 4 protocol error.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
import uuid
from decimal import Decimal
from pathlib import Path
from typing import Any, Mapping

from . import analytics, simdomain
from .deopt import DeoptConfig, induce_lineage
from .errors import (
    BudgetExceeded,
    DeoptError,
    GateTimeout,
    InvariantViolation,
    MaterializationParseError,
    ProtocolError,
    RewriterError,
    StoreLocked,
)
from .gate import ExternalRunner, GateConfig
from .library import DEFAULT_K, RetrievalTarget, retrieve, serialize_skillcard_prompt
from .lift import AdmitConfig, admit_pending, aggregate_transitions, evidence_state_ids, lift_cluster
from .materialize import HttpRewriter, MaterializeConfig, PriceTable, SessionStatus, optimize
from .model import Role, SkillStatus
from .store import Store

EXIT_OK = 0
EXIT_INVARIANT = 2
EXIT_BUDGET = 3
EXIT_PROTOCOL = 4

log = logging.getLogger("deoptkit")


def _load_json(path: str) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _load_config(path: str | None) -> dict[str, Any]:
    return _load_json(path) if path else {}


def _gate_config(config: Mapping[str, Any], reps: int | None = None) -> GateConfig:
    gate = dict(config.get("gate", {}))
    if reps is not None:
        gate["reps"] = reps
    return GateConfig(
        seeds=tuple(gate.get("seeds", (0, 1, 2))),
        warmups=int(gate.get("warmups", 25)),
        reps=int(gate.get("reps", 100)),
        correctness_tolerance=gate.get("correctness_tolerance", {}),
        probe_enabled=bool(gate.get("probe_enabled", True)),
        timeout_s=gate.get("timeout_s", {}),
    )


def _runner(config: Mapping[str, Any], name: str):
    if name == "sim":
        return simdomain.SimRunner()
    runners = config.get("runners", {})
    if name not in runners:
        raise ProtocolError(f"runner {name!r} not registered in config")
    return ExternalRunner(runners[name])


def _rewriter(config: Mapping[str, Any], name: str):
    if name == "sim":
        return simdomain.SimRewriter()
    endpoints = config.get("rewriters", {})
    spec = endpoints.get(name)
    if spec is None:
        raise ProtocolError(f"rewriter {name!r} not registered in config")
    if spec.get("kind") == "http":
        return HttpRewriter(
            url=spec["url"],
            model=spec.get("model", ""),
            api_key_env=spec.get("api_key_env", "DEOPTKIT_API_KEY"),
        )
    if spec.get("kind") == "external":
        return ExternalRunner(spec["argv"])
    raise ProtocolError(f"unknown rewriter kind {spec.get('kind')!r}")


def _lifter(config: Mapping[str, Any], name: str):
    if name == "sim":
        return simdomain.SimLifter()
    endpoints = config.get("lifters", {})
    spec = endpoints.get(name)
    if spec is None:
        raise ProtocolError(f"lifter {name!r} not registered in config")
    if spec.get("kind") == "external":
        return ExternalRunner(spec["argv"])
    raise ProtocolError(f"unknown lifter kind {spec.get('kind')!r}")


def _session_scope(runner: Any) -> contextlib.AbstractContextManager:
    """Hold one external-runner process open for a whole command."""
    if isinstance(runner, ExternalRunner):
        return runner
    return contextlib.nullcontext(runner)


def _case_and_store(args: argparse.Namespace) -> tuple[Any, Store]:
    case_spec = _load_json(args.case)
    case = simdomain.load_case_spec(case_spec)
    store = Store(args.store)
    if isinstance(case, simdomain.LatticeSpec):
        store.registry.merge_dict(case.registry().to_dict())
        store.save_registry()
    return case, store


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_induce(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    case, store = _case_and_store(args)
    if args.expert_state:
        expert = store.load_state(args.expert_state)
    elif isinstance(case, simdomain.LatticeSpec):
        expert = case.expert_state()
    else:
        print("induce: table cases need --expert-state", file=sys.stderr)
        return EXIT_INVARIANT
    run_id = args.run_id or uuid.uuid4().hex[:12]
    events = store.event_log(run_id)
    runner = _runner(config, args.runner)
    with _session_scope(runner):
        deopt_config = DeoptConfig(
            rewriter=_rewriter(config, args.rewriter),
            runner=runner,
            registry=store.registry,
            gate=_gate_config(config, args.reps),
            event_sink=events.emit,
        )
        result = induce_lineage(expert, case, deopt_config)
    store.save_lineage(result.lineage)
    store.save_risks(result.lineage.expert_id, result.risks)
    print(f"lineage {result.lineage.expert_id[:12]}: {len(result.lineage.states)} states, "
          f"{len(result.lineage.transitions)} transitions, {len(result.risks)} risk records"
          + (" (EMPTY: no accepted steps)" if result.empty else ""))
    print(f"events: events/{run_id}.jsonl")
    return EXIT_OK


def cmd_lift(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    case, store = _case_and_store(args)
    lineages = list(store.iter_lineages())
    if not lineages:
        print("lift: no lineages in store", file=sys.stderr)
        return EXIT_INVARIANT
    transitions = [t for lin in lineages for t in lin.transitions]
    states = {s.id: s for lin in lineages for s in lin.states}
    risks = list(store.iter_risks())
    lifter = _lifter(config, args.lifter)
    clusters = aggregate_transitions(transitions)
    stored = 0
    for cluster in clusters:
        card = lift_cluster(cluster, lifter, states, risks, case.to_case_spec())
        store.store_skill(card)
        stored += 1
    print(f"lifted {stored} hypotheses from {len(clusters)} clusters over {len(transitions)} transitions")
    return EXIT_OK


def cmd_admit(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    case, store = _case_and_store(args)
    if not isinstance(case, simdomain.LatticeSpec):
        print("admit: built-in trial runner needs a lattice case", file=sys.stderr)
        return EXIT_INVARIANT
    load = store.load_skills()
    for path, message in load.errors:
        log.warning("skipping malformed skill %s: %s", path, message)
    transitions = [t for lin in store.iter_lineages() for t in lin.transitions]
    trial_runner = simdomain.LatticeTrialRunner(
        case, _gate_config(config, args.reps), evidence_state_ids(transitions)
    )
    report, updated = admit_pending(load.skills, trial_runner, AdmitConfig(max_trials=args.max_trials))
    for card in updated:
        store.replace_skill(card)
    print(report.table())
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_retrieve(args: argparse.Namespace) -> int:
    store = Store(args.store)
    load = store.load_skills()
    target = RetrievalTarget(
        case_id=args.case,
        language=args.language,
        platform=args.platform,
        applied_actions=tuple(a for a in (args.applied or "").split(",") if a),
    )
    for card in load.skills:
        for action in card.required_actions:
            if not store.registry.has_action(action):
                from .registry import ActionInfo

                store.registry.register_action(ActionInfo(action))
    pool = retrieve(target, args.k, load.skills, store.registry)
    rows = [f"{'skill':<14} {'intent':<28} {'total':>6}  {'case':>5} {'lang':>5} {'plat':>5} {'prior':>5}  dims"]
    for entry in pool:
        rows.append(
            f"{entry.skill.id[:12]:<14} {entry.skill.intent.name[:28]:<28} {entry.total:>6.2f}  "
            f"{entry.case_score:>5.2f} {entry.language_score:>5.2f} {entry.platform_score:>5.2f} "
            f"{entry.prior_score:>5.2f}  {','.join(entry.matched_dimensions)}"
        )
    print("\n".join(rows))
    print(
        json.dumps(
            [
                {
                    "skill_id": e.skill.id,
                    "intent": e.skill.intent.name,
                    "scores": {
                        "case": e.case_score,
                        "language": e.language_score,
                        "platform": e.platform_score,
                        "prior_actions": e.prior_score,
                        "total": e.total,
                    },
                    "matched_dimensions": list(e.matched_dimensions),
                }
                for e in pool
            ],
            indent=2,
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    case, store = _case_and_store(args)
    load = store.load_skills()
    if args.root == "naive":
        if not isinstance(case, simdomain.LatticeSpec):
            print("optimize: --root naive needs a lattice case", file=sys.stderr)
            return EXIT_INVARIANT
        root = case.state([], role=Role.CANDIDATE)
    else:
        root = store.load_state(args.root)
    session_id = args.session_id or uuid.uuid4().hex[:12]
    session_log = store.session_log(session_id)
    mat_config = MaterializeConfig(
        budget_cap=Decimal(args.budget),
        prices=PriceTable.from_config(config.get("prices", {})),
        gate=_gate_config(config, args.reps),
        max_submissions=args.max_submissions,
        retrieval_k=args.k,
        ablation=args.ablation,
        ablation_seed=args.ablation_seed,
    )
    runner = _runner(config, args.runner)
    with _session_scope(runner):
        session = optimize(
            case,
            root,
            load.skills,
            _rewriter(config, args.rewriter),
            runner,
            mat_config,
            store.registry,
            session_id=session_id,
            event_sink=session_log.emit,
        )
    best = session.running_best_latency
    print(
        f"session {session_id}: status={session.status} submissions={len(session.trajectory)} "
        f"best={'FAIL' if best is None else analytics.format_ms(best) + ' ms'}"
    )
    print(f"events: sessions/{session_id}.jsonl")
    return EXIT_BUDGET if session.status == SessionStatus.BUDGET_EXHAUSTED else EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    store = Store(args.store)
    bench = _load_json(args.bench) if args.bench else None
    roundtrips = _load_json(args.roundtrips) if args.roundtrips else None
    lineages = list(store.iter_lineages())
    sessions = {
        path.stem: store.session_log(path.stem).read()
        for path in sorted((store.root / "sessions").glob("*.jsonl"))
    }
    written = analytics.emit_report(
        args.out,
        bench=bench,
        roundtrips=roundtrips,
        lineages=lineages,
        sessions=sessions,
        include_rules=args.include_rules,
    )
    for path in written:
        print(path)
    return EXIT_OK


def cmd_sim(args: argparse.Namespace) -> int:
    if args.serve:
        return simdomain.serve(args.serve)
    # End-to-end demo on the built-in lattice.
    spec = simdomain.demo_lattice()
    store = Store(args.store, registry=spec.registry())
    store.save_registry()
    gate_config = GateConfig(reps=args.reps or 9)
    deopt_config = DeoptConfig(
        rewriter=simdomain.SimRewriter(),
        runner=simdomain.SimRunner(),
        registry=spec.registry(),
        gate=gate_config,
    )
    result = induce_lineage(spec.expert_state(), spec, deopt_config)
    store.save_lineage(result.lineage)
    store.save_risks(result.lineage.expert_id, result.risks)
    print(f"[1/4] induced lineage: {len(result.lineage.states)} states "
          f"{[s.latency_ms for s in result.lineage.states]}")
    states = {s.id: s for s in result.lineage.states}
    clusters = aggregate_transitions(result.lineage.transitions)
    cards = [
        store.store_skill(
            lift_cluster(c, simdomain.SimLifter(), states, result.risks, spec.to_case_spec())
        )
        for c in clusters
    ]
    print(f"[2/4] lifted {len(cards)} hypotheses: {[c.intent.name for c in cards]}")
    trial_runner = simdomain.LatticeTrialRunner(
        spec, gate_config, evidence_state_ids(result.lineage.transitions)
    )
    report, updated = admit_pending(cards, trial_runner)
    for card in updated:
        store.replace_skill(card)
    print(f"[3/4] admission: {len(report.admitted)} admitted, {len(report.retired)} retired")
    session_log = store.session_log("sim-demo")
    session = optimize(
        spec,
        spec.state([]),
        updated,
        simdomain.SimRewriter(),
        simdomain.SimRunner(),
        MaterializeConfig(gate=gate_config, max_submissions=16),
        spec.registry(),
        session_id="sim-demo",
        event_sink=session_log.emit,
    )
    print(f"[4/4] optimize from naive: status={session.status} "
          f"best={session.running_best_latency} (expert {result.lineage.states[-1].latency_ms})")
    retrievable = [s for s in updated if s.status is SkillStatus.ADMITTED]
    if retrievable:
        print("\nexample prompt serialization of one admitted skill:\n")
        print(serialize_skillcard_prompt(retrievable[0]))
    return EXIT_OK


def cmd_validate_store(args: argparse.Namespace) -> int:
    store = Store(args.store)
    problems = store.validate_store()
    if problems:
        for problem in problems:
            print(f"VIOLATION: {problem}")
        return EXIT_INVARIANT
    print("store ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deoptkit", description=__doc__)
    parser.add_argument("--store", default="store", help="artifact store directory")
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--log-level", default="warning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("induce", help="walk an expert backward into a lineage")
    p.add_argument("--case", required=True, help="case spec JSON file")
    p.add_argument("--expert-state", default=None, help="state id in the store")
    p.add_argument("--runner", default="sim")
    p.add_argument("--rewriter", default="sim")
    p.add_argument("--run-id", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(fn=cmd_induce)

    p = sub.add_parser("lift", help="aggregate transitions and lift skill hypotheses")
    p.add_argument("--case", required=True)
    p.add_argument("--lifter", default="sim")
    p.set_defaults(fn=cmd_lift)

    p = sub.add_parser("admit", help="run held-out roundtrip admission trials")
    p.add_argument("--case", required=True)
    p.add_argument("--max-trials", type=int, default=3)
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(fn=cmd_admit)

    p = sub.add_parser("retrieve", help="scope-conditioned multi-facet retrieval")
    p.add_argument("--case", required=True)
    p.add_argument("--language", required=True)
    p.add_argument("--platform", required=True)
    p.add_argument("--applied", default="", help="comma-separated applied action ids")
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.set_defaults(fn=cmd_retrieve)

    p = sub.add_parser("optimize", help="budget-metered optimization session")
    p.add_argument("--case", required=True)
    p.add_argument("--root", default="naive", help="'naive' or a state id in the store")
    p.add_argument("--budget", default="10.00")
    p.add_argument("--runner", default="sim")
    p.add_argument("--rewriter", default="sim")
    p.add_argument("--max-submissions", type=int, default=32)
    p.add_argument("--k", type=int, default=DEFAULT_K)
    p.add_argument("--ablation", choices=["generated-only"], default=None)
    p.add_argument("--ablation-seed", type=int, default=0)
    p.add_argument("--session-id", default=None)
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("report", help="emit benchmark report and budget curves")
    p.add_argument("--bench", default=None, help="latency fixture JSON")
    p.add_argument("--roundtrips", default=None, help="roundtrip tally JSON")
    p.add_argument("--out", default="report")
    p.add_argument("--include-rules", choices=["as_submitted", "audit"], default="as_submitted")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("sim", help="end-to-end demo, or serve a sim protocol")
    p.add_argument("--serve", choices=["runner", "rewriter", "lifter"], default=None)
    p.add_argument("--reps", type=int, default=None)
    p.set_defaults(fn=cmd_sim)

    p = sub.add_parser("validate-store", help="audit every stored document's invariants")
    p.set_defaults(fn=cmd_validate_store)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING))
    try:
        return args.fn(args)
    except BudgetExceeded as exc:
        print(f"budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ProtocolError, RewriterError, MaterializationParseError, GateTimeout) as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (InvariantViolation, StoreLocked) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except DeoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def entrypoint() -> None:
    sys.exit(main())
