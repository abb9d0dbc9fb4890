"""Unified-diff generation and application for forward transitions.

Transitions store their edit as a plain unified diff so lineages can be
replayed without the rewriter: applying each stored diff in order from K0
must reproduce every stored state.
"""

from __future__ import annotations

import difflib
import re

from .errors import DeoptError

_HUNK_HEADER = re.compile(r"^@@ -(\d+)(?:,(\d+))? \+(\d+)(?:,(\d+))? @@")


class PatchFailed(DeoptError):
    """A stored diff did not apply cleanly to the given source."""


def make_diff(before: str, after: str, label: str = "kernel") -> str:
    """Unified diff of two program texts; empty string when identical."""
    lines = difflib.unified_diff(
        before.splitlines(keepends=True),
        after.splitlines(keepends=True),
        fromfile=f"a/{label}",
        tofile=f"b/{label}",
    )
    return "".join(lines)


def apply_diff(before: str, patch: str) -> str:
    """Apply a unified diff produced by :func:`make_diff`."""
    if not patch:
        return before
    source = before.splitlines(keepends=True)
    out: list[str] = []
    cursor = 0
    lines = patch.splitlines(keepends=True)
    i = 0
    while i < len(lines) and lines[i].startswith(("---", "+++")):
        i += 1
    while i < len(lines):
        match = _HUNK_HEADER.match(lines[i])
        if match is None:
            raise PatchFailed(f"malformed hunk header: {lines[i]!r}")
        start = int(match.group(1))
        length = int(match.group(2) or "1")
        # A zero-length old range addresses the position after `start`.
        old_start = start - 1 if length > 0 else start
        if old_start < cursor:
            raise PatchFailed("hunks out of order")
        out.extend(source[cursor:old_start])
        cursor = old_start
        i += 1
        while i < len(lines) and not lines[i].startswith("@@"):
            line = lines[i]
            if line.startswith("\\"):  # "\ No newline at end of file"
                i += 1
                continue
            tag, body = line[0], line[1:]
            if tag == " ":
                if cursor >= len(source) or source[cursor] != body:
                    raise PatchFailed(f"context mismatch at line {cursor + 1}")
                out.append(body)
                cursor += 1
            elif tag == "-":
                if cursor >= len(source) or source[cursor] != body:
                    raise PatchFailed(f"deletion mismatch at line {cursor + 1}")
                cursor += 1
            elif tag == "+":
                out.append(body)
            else:
                raise PatchFailed(f"unknown diff line tag: {line!r}")
            i += 1
    out.extend(source[cursor:])
    return "".join(out)
