"""Exception taxonomy shared across the toolkit.

Exit-code mapping for the CLI lives in ``cli.py``; everything here is a
plain exception type so library callers can catch precisely.
"""

from __future__ import annotations


class DeoptError(Exception):
    """Base class for all toolkit errors."""


class InvariantViolation(DeoptError):
    """A domain object failed its declared invariants (reject, never repair)."""


class InvalidState(DeoptError):
    """A kernel state is malformed (e.g. empty source text)."""


class InvalidEffect(DeoptError):
    """An effect signature is malformed (non-positive latency ratio)."""


class InvalidSamples(DeoptError):
    """A latency sample list is unusable (e.g. empty)."""


class InvalidLatency(DeoptError):
    """A latency or speedup input is non-positive."""


class InvalidAction(DeoptError):
    """An action id is unknown to the active registry or lattice."""


class GateTimeout(DeoptError):
    """A runner exceeded its per-phase timeout; the verdict is retryable."""


class ProtocolError(DeoptError):
    """A runner, rewriter, or lifter produced an unparseable exchange."""


class ProbeUnsupported(DeoptError):
    """The runner cannot poison its reference path; probe recorded not_run."""


class NothingToRemove(DeoptError):
    """Backward proposal requested on a state with no applied actions."""


class RewriterError(DeoptError):
    """The rewriter failed to produce a candidate after retries."""


class ForwardDerivationFailed(DeoptError):
    """Forward re-derivation failed the gate after all retries."""


class ExpertInvalid(DeoptError):
    """The expert state failed the gate; induction aborts."""


class LiftRejected(DeoptError):
    """The lifter returned an unusable hypothesis (e.g. empty carrier)."""


class HeldOutViolation(DeoptError):
    """A roundtrip trial was requested on a non-held-out start state."""


class BudgetExceeded(DeoptError):
    """Charging this event would push cumulative spend above the cap.

    Raised before the spend is committed; the meter stays at its prior total.
    """


class MaterializationParseError(DeoptError):
    """A rewriter response carried no usable code block."""


class StoreLocked(DeoptError):
    """The library's single-writer lock could not be acquired."""
