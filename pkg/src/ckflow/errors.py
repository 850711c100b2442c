"""Error codes shared by every action.

Handlers raise :class:`CKError`; the action layer turns it into the
``{"return": code, "error": message}`` envelope.
"""

from __future__ import annotations

from typing import Any

OK = 0
GENERIC = 1
UNKNOWN = 4
NOT_FOUND = 8
IO = 16
DEPENDENCY = 32
EXECUTION = 64


class CKError(Exception):
    """Failure carrying a non-zero return code and optional extra payload."""

    def __init__(self, code: int, message: str, **payload: Any):
        if code <= 0:
            raise ValueError("CKError code must be positive")
        super().__init__(message)
        self.code = code
        self.message = message or "unspecified error"
        self.payload = payload

    def __str__(self) -> str:
        return self.message
