"""deoptkit: validation-gated deoptimization of expert kernels into
reusable, scope-conditioned optimization skills.

Pipeline: walk an expert program backward through gate-checked
simplifications (``deopt``), lift the recovered forward transitions into
skill hypotheses and admit them via held-out roundtrips (``lift``), then
reuse admitted skills in a budget-metered optimization loop
(``materialize``) with multi-facet retrieval (``library``).  The ``simdomain``
module provides a deterministic synthetic kernel domain so the whole
pipeline is verifiable without GPUs or LLM access.
"""

from .model import (
    digest_state,
    ratio_bucket,
    KernelState,
    ValidationRecord,
    Locus,
    EffectSignature,
    ForwardTransition,
    RiskEvidence,
    Lineage,
    Scope,
    SkillCard,
    RoundtripTrial,
)
from .gate import Gate, GateConfig, bench_median, run_external, validate
from .deopt import DeoptConfig, induce_lineage, propose_simplifications, replay_lineage
from .lift import admit_pending, aggregate_transitions, lift_cluster, run_roundtrip
from .library import RetrievalTarget, retrieve, serialize_skillcard_prompt
from .materialize import BudgetMeter, CostEvent, MaterializeConfig, PriceTable, optimize
from .analytics import (
    emit_report,
    roundtrip_score,
    running_best_curve,
    speedup,
    success_only_geomean,
)
from .store import Store

__version__ = "0.1.0"

__all__ = [
    "digest_state",
    "ratio_bucket",
    "KernelState",
    "ValidationRecord",
    "Locus",
    "EffectSignature",
    "ForwardTransition",
    "RiskEvidence",
    "Lineage",
    "Scope",
    "SkillCard",
    "RoundtripTrial",
    "Gate",
    "GateConfig",
    "bench_median",
    "run_external",
    "validate",
    "DeoptConfig",
    "induce_lineage",
    "propose_simplifications",
    "replay_lineage",
    "admit_pending",
    "aggregate_transitions",
    "lift_cluster",
    "run_roundtrip",
    "RetrievalTarget",
    "retrieve",
    "serialize_skillcard_prompt",
    "BudgetMeter",
    "CostEvent",
    "MaterializeConfig",
    "PriceTable",
    "optimize",
    "emit_report",
    "roundtrip_score",
    "running_best_curve",
    "speedup",
    "success_only_geomean",
    "Store",
]
