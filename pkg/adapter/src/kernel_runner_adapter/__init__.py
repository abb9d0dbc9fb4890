"""Reference implementation of the gate's external runner protocol."""

from .cases import CaseDef, load_case
from .runner import AdapterRunner, serve

__all__ = ["CaseDef", "load_case", "AdapterRunner", "serve"]
