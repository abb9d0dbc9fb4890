"""The compile/correctness/profile validation gate.

One gate is used everywhere a candidate program needs a verdict: backward
deoptimization steps, forward re-derivations, roundtrip admission trials,
and online materializations.  Actual execution is delegated to a runner via
a JSON-over-stdio protocol (or an in-process equivalent), so the gate never
knows whether it is talking to a simulated lattice or a real kernel stack.

Phase order is fixed: compile, correctness at every seed, profile, probe.
The first failure short-circuits; no profile samples are ever recorded for
a state that failed compile or correctness.
"""

from __future__ import annotations

import json
import os
import select
import statistics
import subprocess
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Mapping, Protocol, Sequence

from .errors import GateTimeout, InvalidSamples, ProbeUnsupported, ProtocolError
from .model import (
    GateStatus,
    KernelState,
    ProbeResult,
    SeedResult,
    ValidationRecord,
    canonical_json,
)

GATE_VERSION = "gate-1"

DEFAULT_TIMEOUTS = {"compile": 120.0, "correctness": 60.0, "profile": 120.0, "probe": 60.0}
DEFAULT_TOLERANCE = {"atol": 1e-5, "rtol": 1e-5}


@dataclass(frozen=True)
class GateConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    warmups: int = 25
    reps: int = 100
    correctness_tolerance: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    probe_enabled: bool = True
    timeout_s: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_TIMEOUTS))

    def __post_init__(self) -> None:
        if len(self.seeds) < 1:
            raise ValueError("GateConfig.seeds must contain at least one seed")
        if self.warmups < 0 or self.reps < 1:
            raise ValueError("GateConfig requires warmups >= 0 and reps >= 1")

    def tolerance(self, case_id: str) -> dict[str, float]:
        return dict(self.correctness_tolerance.get(case_id, DEFAULT_TOLERANCE))

    def timeout(self, phase: str) -> float:
        return float(self.timeout_s.get(phase, DEFAULT_TIMEOUTS[phase]))


@dataclass(frozen=True)
class RunnerRequest:
    """One phase request as it crosses the runner protocol."""

    phase: str  # compile | correctness | profile | probe
    state: dict[str, Any]
    case: dict[str, Any]
    config: dict[str, Any]
    seed: int | None = None
    poison_reference: bool = False

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "phase": self.phase,
            "state": self.state,
            "case": self.case,
            "config": self.config,
        }
        if self.seed is not None:
            out["seed"] = self.seed
        if self.poison_reference:
            out["poison_reference"] = True
        return out


@dataclass(frozen=True)
class RunnerResponse:
    ok: bool
    detail: str = ""
    samples: tuple[float, ...] | None = None
    failure_kind: str | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunnerResponse":
        if "ok" not in data:
            raise ProtocolError("runner response missing 'ok' field")
        samples = data.get("samples")
        return cls(
            ok=bool(data["ok"]),
            detail=str(data.get("detail", "")),
            samples=tuple(float(s) for s in samples) if samples is not None else None,
            failure_kind=data.get("failure_kind"),
        )


class Runner(Protocol):
    """Anything that can answer one runner request with one response dict."""

    def run(self, request: Mapping[str, Any]) -> Mapping[str, Any]: ...


class InProcessRunner:
    """Adapts an in-process handler (e.g. the sim runner) to the gate."""

    def __init__(self, handler: Runner):
        self._handler = handler

    def run(self, request: Mapping[str, Any]) -> Mapping[str, Any]:
        return self._handler.run(request)


class ExternalRunner:
    """Spawns a registered runner command and speaks newline-delimited JSON.

    One process serves the requests of a single validation sequentially; a
    fresh process is spawned per validation so concurrent gates never share
    a pipe.
    """

    def __init__(self, argv: Sequence[str]):
        self.argv = tuple(argv)
        self._proc: subprocess.Popen[bytes] | None = None
        self._buffer = b""

    def __enter__(self) -> "ExternalRunner":
        self._proc = subprocess.Popen(
            self.argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
        )
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    def close(self) -> None:
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.wait(timeout=10)
            self._proc = None

    def run(self, request: Mapping[str, Any]) -> Mapping[str, Any]:
        timeout = float(request.get("config", {}).get("timeout_s", 120.0))
        spawned_here = self._proc is None
        if spawned_here:
            self.__enter__()
        try:
            return self._exchange(request, timeout)
        finally:
            if spawned_here:
                self.close()

    def _exchange(self, request: Mapping[str, Any], timeout: float) -> dict[str, Any]:
        assert self._proc is not None and self._proc.stdin is not None
        line = canonical_json(dict(request)) + "\n"
        try:
            self._proc.stdin.write(line.encode("utf-8"))
            self._proc.stdin.flush()
        except BrokenPipeError as exc:
            raise ProtocolError(f"runner process closed stdin pipe: {self.argv}") from exc
        raw = self._read_line(timeout)
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"unparseable runner response: {raw[:200]!r}") from exc
        if not isinstance(data, dict):
            raise ProtocolError("runner response must be a JSON object")
        return data

    def _read_line(self, timeout: float) -> str:
        assert self._proc is not None and self._proc.stdout is not None
        fd = self._proc.stdout.fileno()
        deadline = time.monotonic() + timeout
        while b"\n" not in self._buffer:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self._proc.kill()
                raise GateTimeout(f"runner exceeded {timeout}s: {self.argv}")
            ready, _, _ = select.select([fd], [], [], min(remaining, 0.5))
            if not ready:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                code = self._proc.poll()
                raise ProtocolError(f"runner exited (code {code}) without a response")
            self._buffer += chunk
        line, _, self._buffer = self._buffer.partition(b"\n")
        return line.decode("utf-8")


def run_external(request: Mapping[str, Any], endpoint: Runner | Sequence[str]) -> RunnerResponse:
    """Send one request to a registered runner and parse the response.

    ``endpoint`` is either an in-process runner or an argv template.  A
    nonzero exit after a parseable response is a phase failure, not a
    protocol error; unparseable output raises ProtocolError and a timeout
    raises GateTimeout.
    """
    if isinstance(endpoint, (list, tuple)):
        with ExternalRunner(endpoint) as runner:
            return RunnerResponse.from_dict(runner.run(dict(request)))
    return RunnerResponse.from_dict(endpoint.run(dict(request)))


def bench_median(samples: Sequence[float]) -> float:
    """Median latency; even-count inputs take the mean of the two middle values."""
    if not samples:
        raise InvalidSamples("cannot take the median of zero samples")
    return float(statistics.median(samples))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Gate:
    """Runs the phase sequence against one runner and issues verdicts."""

    def __init__(self, config: GateConfig | None = None):
        self.config = config or GateConfig()

    def _request(
        self,
        phase: str,
        state: KernelState,
        case_payload: dict[str, Any],
        seed: int | None = None,
        poison: bool = False,
    ) -> dict[str, Any]:
        cfg = {
            "warmups": self.config.warmups,
            "reps": self.config.reps,
            "tolerance": self.config.tolerance(state.case_id),
            "timeout_s": self.config.timeout(phase),
        }
        return RunnerRequest(
            phase=phase,
            state=state.to_dict(),
            case=case_payload,
            config=cfg,
            seed=seed,
            poison_reference=poison,
        ).to_dict()

    def validate(self, state: KernelState, case: Any, runner: Runner) -> ValidationRecord:
        """Full gate pass; returns the verdict for ``state`` on ``case``."""
        case_payload = case.to_case_spec() if hasattr(case, "to_case_spec") else dict(case)
        base = dict(
            warmups=self.config.warmups,
            reps=self.config.reps,
            gate_version=GATE_VERSION,
            timestamp=_now(),
        )

        compile_resp = run_external(self._request("compile", state, case_payload), runner)
        if not compile_resp.ok:
            return ValidationRecord(
                status=GateStatus.COMPILE_FAIL,
                compile_ok=False,
                extra={"detail": compile_resp.detail},
                **base,
            )

        seed_results: list[SeedResult] = []
        for seed in self.config.seeds:
            resp = run_external(self._request("correctness", state, case_payload, seed=seed), runner)
            seed_results.append(SeedResult(seed=seed, passed=resp.ok))
            if not resp.ok:
                return ValidationRecord(
                    status=GateStatus.INCORRECT,
                    compile_ok=True,
                    seed_results=tuple(seed_results),
                    extra={"detail": resp.detail},
                    **base,
                )

        profile_resp = run_external(self._request("profile", state, case_payload), runner)
        if not profile_resp.ok or profile_resp.samples is None:
            return ValidationRecord(
                status=GateStatus.INCORRECT,
                compile_ok=True,
                seed_results=tuple(seed_results),
                extra={"detail": profile_resp.detail or "profile phase failed"},
                **base,
            )
        if len(profile_resp.samples) != self.config.reps:
            raise ProtocolError(
                f"profile response carried {len(profile_resp.samples)} samples, expected {self.config.reps}"
            )
        latency = bench_median(profile_resp.samples)

        if not self.config.probe_enabled:
            return ValidationRecord(
                status=GateStatus.VALID,
                compile_ok=True,
                seed_results=tuple(seed_results),
                latency_ms=latency,
                wrapper_probe=ProbeResult.NOT_RUN,
                **base,
            )

        try:
            probe = self.wrapper_probe(state, case_payload, runner)
        except ProbeUnsupported:
            # Not eligible for running-best credit: without a probe verdict the
            # candidate cannot be promoted to valid while probing is required.
            return ValidationRecord(
                status=GateStatus.UNVALIDATED,
                compile_ok=True,
                seed_results=tuple(seed_results),
                wrapper_probe=ProbeResult.NOT_RUN,
                extra={"detail": "probe unsupported by runner", "measured_latency_ms": latency},
                **base,
            )
        if probe is ProbeResult.WRAPPER:
            return ValidationRecord(
                status=GateStatus.WRAPPER,
                compile_ok=True,
                seed_results=tuple(seed_results),
                wrapper_probe=ProbeResult.WRAPPER,
                extra={"measured_latency_ms": latency},
                **base,
            )
        return ValidationRecord(
            status=GateStatus.VALID,
            compile_ok=True,
            seed_results=tuple(seed_results),
            latency_ms=latency,
            wrapper_probe=ProbeResult.REAL_KERNEL,
            **base,
        )

    def wrapper_probe(self, state: KernelState, case: Any, runner: Runner) -> ProbeResult:
        """Re-run correctness with the reference path poisoned.

        A candidate that still passes computes its own output; one that now
        fails was delegating to the reference.  Runners that cannot poison
        their reference raise ProbeUnsupported.
        """
        case_payload = case.to_case_spec() if hasattr(case, "to_case_spec") else dict(case)
        for seed in self.config.seeds:
            resp = run_external(
                self._request("probe", state, case_payload, seed=seed, poison=True), runner
            )
            if resp.failure_kind == "probe_unsupported":
                raise ProbeUnsupported(resp.detail or "runner lacks probe support")
            if not resp.ok:
                return ProbeResult.WRAPPER
        return ProbeResult.REAL_KERNEL


def validate(state: KernelState, case: Any, config: GateConfig, runner: Runner) -> ValidationRecord:
    """Module-level convenience over ``Gate.validate``."""
    return Gate(config).validate(state, case, runner)
