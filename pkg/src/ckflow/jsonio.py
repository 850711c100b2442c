"""Canonical JSON on disk, atomic writes, and JSON/YAML input documents."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any

import yaml

from .errors import GENERIC, IO, CKError


def dumps(doc: Any) -> str:
    """UTF-8 friendly, 2-space indent, sorted keys, trailing newline."""
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_json(path: Path, doc: Any) -> None:
    atomic_write_text(path, dumps(doc))


def read_json(path: Path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_document(path: str | Path) -> dict:
    """Load a JSON or YAML input file (chosen by extension) into a dict."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CKError(IO, f"cannot read input file {path}: {exc.strerror or exc}") from exc

    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}" if mark is not None else ""
            raise CKError(GENERIC, f"malformed YAML in {path}{where}: {exc}") from exc
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CKError(GENERIC, f"malformed JSON in {path} at line {exc.lineno}: {exc.msg}") from exc

    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise CKError(GENERIC, f"input file {path} must contain a mapping at top level")
    return doc


def deep_merge(base: dict, update: dict) -> dict:
    """Merge ``update`` into a copy of ``base``; maps merge, everything else replaces."""
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out
