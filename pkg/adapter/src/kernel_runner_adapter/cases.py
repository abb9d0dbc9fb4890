"""Case descriptors: reference entry point, seeded input spec, tolerance.

A case is one Python file in the cases directory defining:

    def make_inputs(seed):  # -> tuple of arrays, deterministic per seed
    def reference(*inputs): # -> expected output
    TOLERANCE = {"atol": ..., "rtol": ...}   # optional default

Submitted kernels are validated against the reference on seeded inputs.
Tolerances can be overridden per request; the adapter itself owns no
thresholds.
"""

from __future__ import annotations

import importlib.util
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

DEFAULT_TOLERANCE = {"atol": 1e-5, "rtol": 1e-5}


class CaseError(Exception):
    pass


@dataclass(frozen=True)
class CaseDef:
    case_id: str
    make_inputs: Callable[[int], tuple]
    reference: Callable[..., Any]
    tolerance: dict[str, float]


def load_case(cases_dir: Path, case_id: str) -> CaseDef:
    path = cases_dir / f"{case_id}.py"
    if not path.exists():
        raise CaseError(f"no case descriptor {path}")
    spec = importlib.util.spec_from_file_location(f"adapter_case_{case_id}", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    for attr in ("make_inputs", "reference"):
        if not callable(getattr(module, attr, None)):
            raise CaseError(f"case {case_id} must define a callable {attr}")
    return CaseDef(
        case_id=case_id,
        make_inputs=module.make_inputs,
        reference=module.reference,
        tolerance=dict(getattr(module, "TOLERANCE", DEFAULT_TOLERANCE)),
    )
