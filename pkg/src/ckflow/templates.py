"""Placeholder expansion for command and environment templates.

Placeholders look like ``{name}`` or ``{env.VAR}``. Shell-style ``${VAR}``
is left untouched, and ``{{`` / ``}}`` produce literal braces.
"""

from __future__ import annotations

import re
from typing import Any, Mapping

from .errors import GENERIC, CKError

_PLACEHOLDER = re.compile(r"\{\{|\}\}|(?<!\$)\{([A-Za-z_][A-Za-z0-9_.\-]*)\}")


def placeholders(template: str) -> list[str]:
    return [m.group(1) for m in _PLACEHOLDER.finditer(template) if m.group(1)]


def expand(template: str, values: Mapping[str, Any]) -> str:
    """Substitute every placeholder; an unknown name is an error."""

    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name is None:
            return match.group(0)[0]
        if name not in values:
            raise CKError(GENERIC, f"unknown placeholder {{{name}}} in template {template!r}")
        return str(values[name])

    return _PLACEHOLDER.sub(sub, template)


def flatten_namespace(prefix: str, mapping: Mapping[str, Any]) -> dict[str, Any]:
    return {f"{prefix}.{k}": v for k, v in mapping.items()}
