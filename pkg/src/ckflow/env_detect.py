"""Detect installed software with declarative plugins and record it as ``env`` entries.

A plugin (``soft:<name>``) is pure data: where to look, how to ask for a
version, and which environment variables to export once found::

    {"name": "GNU bash", "tags": "shell,bash",
     "probe_commands": [{"exe": "bash", "arg": "--version"}],
     "version_regex": "version (\\d+\\.\\d+\\.\\d+)",
     "file_hints": ["/opt/*/bin/bash"],
     "env_template": {"CK_ENV_BASH_BIN": "{path}"}}
"""

from __future__ import annotations

import glob
import hashlib
import logging
import os
import re
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import templates
from .errors import GENERIC, CKError
from .registry import Component, ComponentRef, Registry, parse_tags

log = logging.getLogger(__name__)

PROBE_TIMEOUT_S = 10.0
DETECTED_TAG = "vdetected"


def parse_version(text: str) -> list[int]:
    """Lenient dotted-version parser: ``"2.0.0-rc1"`` -> ``[2, 0, 0]``.

    Each dot-separated segment contributes its leading integer; parsing
    stops at the first segment without one.
    """
    text = (text or "").strip()
    if text[:1] in ("v", "V") and text[1:2].isdigit():
        text = text[1:]
    out: list[int] = []
    if not text:
        return out
    for segment in text.split("."):
        m = re.match(r"\d+", segment)
        if not m:
            break
        out.append(int(m.group(0)))
    return out


def version_str(version: list[int]) -> str:
    return ".".join(str(v) for v in version)


@dataclass
class SoftPlugin:
    name: str
    tags: frozenset[str]
    probe_commands: list[tuple[str, str]]
    version_regex: re.Pattern | None
    file_hints: list[str] = field(default_factory=list)
    env_template: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_meta(cls, meta: dict) -> "SoftPlugin":
        if not isinstance(meta, dict):
            raise CKError(GENERIC, "plugin meta must be a mapping")
        try:
            probes = []
            for p in meta.get("probe_commands") or []:
                exe, arg = p["exe"], p.get("arg", "--version")
                if not isinstance(exe, str) or not exe or not isinstance(arg, str):
                    raise ValueError(f"bad probe {p!r}")
                probes.append((exe, arg))
            regex = None
            if probes:
                regex = re.compile(meta["version_regex"])
                if regex.groups < 1:
                    raise ValueError("version_regex needs one capture group")
            hints = list(meta.get("file_hints") or [])
            env_template = dict(meta.get("env_template") or {})
            if not all(isinstance(h, str) for h in hints):
                raise ValueError("file_hints must be strings")
            if not all(isinstance(k, str) and isinstance(v, str) for k, v in env_template.items()):
                raise ValueError("env_template must map strings to strings")
            for value in env_template.values():
                unknown = set(templates.placeholders(value)) - {"path", "dir", "version"}
                if unknown:
                    raise ValueError(f"unknown env_template placeholders {sorted(unknown)}")
            if not probes and not hints:
                raise ValueError("plugin needs probe_commands or file_hints")
            return cls(name=str(meta.get("name", "")), tags=parse_tags(meta.get("tags")),
                       probe_commands=probes, version_regex=regex, file_hints=hints,
                       env_template=env_template)
        except (KeyError, TypeError, ValueError, re.error) as exc:
            raise CKError(GENERIC, f"invalid detection plugin meta: {exc}") from exc


@dataclass
class EnvEntry:
    uid: str
    tags: frozenset[str]
    version: list[int]
    env: dict[str, str]
    detected_path: str
    source: str
    alias: str = ""

    @classmethod
    def from_component(cls, comp: Component) -> "EnvEntry":
        meta = comp.meta
        version = meta.get("version") or []
        if isinstance(version, str):
            version = parse_version(version)
        return cls(uid=comp.uid, tags=parse_tags(meta.get("tags")),
                   version=[int(v) for v in version],
                   env={str(k): str(v) for k, v in (meta.get("env") or {}).items()},
                   detected_path=str(meta.get("detected_path", "")),
                   source=str(meta.get("source", "detected")), alias=comp.data_name)

    def to_meta(self, **extra) -> dict:
        meta = {"tags": ",".join(sorted(self.tags)), "version": list(self.version),
                "version_str": version_str(self.version), "env": dict(self.env),
                "detected_path": self.detected_path, "source": self.source}
        meta.update(extra)
        return meta


def expand_env(template: dict[str, str], path: str, version: list[int]) -> dict[str, str]:
    values = {"path": path, "dir": str(Path(path).parent), "version": version_str(version)}
    return {k: templates.expand(v, values) for k, v in template.items()}


def _candidates(plugin: SoftPlugin, search_paths: list[str]) -> list[tuple[str, str | None]]:
    """(real path, version argument) pairs; hints fall back to the first probe's argument."""
    seen: dict[str, str | None] = {}
    for exe, arg in plugin.probe_commands:
        for d in search_paths:
            p = os.path.join(d, exe)
            if os.path.isfile(p) and os.access(p, os.X_OK):
                seen.setdefault(os.path.realpath(p), arg)
    fallback = plugin.probe_commands[0][1] if plugin.probe_commands else None
    by_name = {exe: arg for exe, arg in plugin.probe_commands}
    for pattern in plugin.file_hints:
        for p in sorted(glob.glob(os.path.expanduser(pattern))):
            if os.path.isfile(p):
                seen.setdefault(os.path.realpath(p), by_name.get(os.path.basename(p), fallback))
    return sorted(seen.items())


def _probe(path: str, arg: str, timeout: float) -> str:
    proc = subprocess.run([path, arg], stdin=subprocess.DEVNULL, stdout=subprocess.PIPE,
                          stderr=subprocess.STDOUT, timeout=timeout, check=False)
    return proc.stdout.decode("utf-8", errors="replace")


def detect(registry: Registry, plugin_ref: ComponentRef | str, search_paths: list[str] | None = None,
           timeout: float = PROBE_TIMEOUT_S, warnings: list[str] | None = None) -> list[EnvEntry]:
    """Probe the host for the plugin's tool and register one ``env`` entry per hit.

    Re-detection at an already-known path updates that entry in place.
    Problems with individual candidates are reported through ``warnings``.
    """
    if warnings is None:
        warnings = []
    plugin_comp = registry.load(plugin_ref)
    plugin = SoftPlugin.from_meta(plugin_comp.meta)
    if search_paths is None:
        search_paths = [p for p in os.environ.get("PATH", "").split(os.pathsep) if p]
    cands = _candidates(plugin, search_paths)

    def evaluate(cand: tuple[str, str | None]) -> tuple[str, list[int] | None, str | None]:
        path, arg = cand
        if plugin.version_regex is None or arg is None:
            return path, [0], None
        try:
            out = _probe(path, arg, timeout)
        except subprocess.TimeoutExpired:
            return path, None, f"probe timed out after {timeout:g}s: {path} {arg}"
        except OSError as exc:
            return path, None, f"probe failed: {path} {arg}: {exc}"
        m = plugin.version_regex.search(out)
        if not m:
            return path, None, f"version regex did not match output of {path} {arg}"
        version = parse_version(m.group(1))
        if not version:
            return path, None, f"unparseable version {m.group(1)!r} from {path}"
        return path, version, None

    with ThreadPoolExecutor(max_workers=max(1, min(8, len(cands)))) as pool:
        results = list(pool.map(evaluate, cands))

    existing = {}
    for comp in registry.iter_components("env"):
        if comp.repo == "local" and comp.meta.get("plugin_uid") == plugin_comp.uid:
            existing.setdefault(comp.meta.get("detected_path"), comp)

    entries = []
    for path, version, problem in results:
        if problem:
            warnings.append(problem)
            log.warning(problem)
            continue
        entry = EnvEntry(uid="", tags=plugin.tags | {DETECTED_TAG}, version=version,
                         env=expand_env(plugin.env_template, path, version),
                         detected_path=path, source="detected")
        meta = entry.to_meta(plugin=str(plugin_comp.ref), plugin_uid=plugin_comp.uid)
        if path in existing:
            comp = registry.update(existing[path].ref, meta=meta)
        else:
            alias = f"{plugin_comp.data_name}-{hashlib.sha256(path.encode()).hexdigest()[:10]}"
            comp = registry.add(ComponentRef("env", alias, "local"), meta,
                                info={"detected_by": str(plugin_comp.ref)})
        entries.append(EnvEntry.from_component(comp))
    if not cands:
        warnings.append(f"no candidates found for {plugin.name or plugin_comp.data_name}")
    return entries


def env_entries(registry: Registry) -> list[EnvEntry]:
    return [EnvEntry.from_component(c) for c in registry.iter_components("env")]
