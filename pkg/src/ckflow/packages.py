"""Dependency resolution against ``env`` entries and installable ``package`` recipes.

A dependency map looks like::

    {"compiler": {"name": "C++ compiler", "sort": 10, "tags": "compiler,lang-cpp"},
     "library": {"name": "TensorFlow C++ API", "sort": 20,
                 "tags": "lib,tensorflow,vstatic", "no_tags": "tensorflow-lite",
                 "version_from": [1, 13, 1], "version_to": [2, 0, 0]}}

``version_from`` is inclusive and ``version_to`` exclusive. Specs resolve in
ascending ``sort`` order; each takes the highest matching version.
"""

from __future__ import annotations

import functools
import hashlib
import logging
import os
import platform
import re
import shutil
import subprocess
import tarfile
import tempfile
import urllib.parse
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

from . import templates
from .env_detect import EnvEntry, detect, env_entries, parse_version, version_str
from .errors import DEPENDENCY, EXECUTION, GENERIC, IO, CKError
from .registry import Component, ComponentRef, Registry, parse_tags, safe_extract_tar, safe_extract_zip

log = logging.getLogger(__name__)

INSTALL_LOG = ".ck-install-log.txt"
MAX_DEPTH = 8
SHA256_RE = re.compile(r"^[0-9a-f]{64}$")


def compare_versions(a: list[int], b: list[int]) -> int:
    """-1, 0 or 1; missing trailing segments count as 0."""
    n = max(len(a), len(b))
    pa = list(a) + [0] * (n - len(a))
    pb = list(b) + [0] * (n - len(b))
    return (pa > pb) - (pa < pb)


def _as_version(value, what: str) -> list[int] | None:
    if value is None:
        return None
    if isinstance(value, str):
        return parse_version(value)
    if isinstance(value, (list, tuple)) and all(isinstance(v, int) and not isinstance(v, bool) and v >= 0
                                                for v in value):
        return list(value)
    raise CKError(GENERIC, f"{what} must be a list of non-negative integers, got {value!r}")


@dataclass(frozen=True)
class DependencySpec:
    key: str
    tags: frozenset[str]
    name: str = ""
    no_tags: frozenset[str] = frozenset()
    version_from: list[int] | None = None
    version_to: list[int] | None = None
    sort: int = 0

    @classmethod
    def from_meta(cls, key: str, meta: dict) -> "DependencySpec":
        if isinstance(meta, DependencySpec):
            return meta
        if not isinstance(meta, dict):
            raise CKError(GENERIC, f"dependency {key!r} must be a mapping")
        tags = parse_tags(meta.get("tags"))
        if not tags:
            raise CKError(GENERIC, f"dependency {key!r} needs at least one tag")
        vfrom = _as_version(meta.get("version_from"), f"{key}.version_from")
        vto = _as_version(meta.get("version_to"), f"{key}.version_to")
        if vfrom is not None and vto is not None and compare_versions(vfrom, vto) > 0:
            raise CKError(GENERIC, f"dependency {key!r}: version_from {vfrom} is above version_to {vto}")
        sort = meta.get("sort", 0)
        try:
            sort = int(sort)
        except (TypeError, ValueError) as exc:
            raise CKError(GENERIC, f"dependency {key!r}: sort must be an integer") from exc
        return cls(key=key, name=str(meta.get("name", key)), tags=tags,
                   no_tags=parse_tags(meta.get("no_tags")), version_from=vfrom, version_to=vto, sort=sort)

    def accepts(self, tags: frozenset[str], version: list[int]) -> bool:
        return rejection_reason(self, tags, version) is None


def rejection_reason(spec: DependencySpec, tags: frozenset[str], version: list[int]) -> str | None:
    missing = spec.tags - tags
    if missing:
        return f"tag miss: {','.join(sorted(missing))}"
    hit = spec.no_tags & tags
    if hit:
        return f"no_tag hit: {','.join(sorted(hit))}"
    if spec.version_from is not None and compare_versions(version, spec.version_from) < 0:
        return f"version out of range: {version_str(version)} < {version_str(spec.version_from)}"
    if spec.version_to is not None and compare_versions(version, spec.version_to) >= 0:
        return f"version out of range: {version_str(version)} >= {version_str(spec.version_to)}"
    return None


def _preference(a: EnvEntry, b: EnvEntry) -> int:
    c = compare_versions(b.version, a.version)
    if c:
        return c
    sa, sb = a.source != "detected", b.source != "detected"
    if sa != sb:
        return -1 if sb else 1
    return (a.uid > b.uid) - (a.uid < b.uid)


def match_dep(spec: DependencySpec, candidates: list[EnvEntry]) -> EnvEntry | None:
    """Best candidate passing the tag and version filters, or None.

    Ranking: highest version, then detected over installed, then lowest uid.
    """
    survivors = [c for c in candidates if spec.accepts(c.tags, c.version)]
    if not survivors:
        return None
    return sorted(survivors, key=functools.cmp_to_key(_preference))[0]


@dataclass
class PackageSpec:
    tags: frozenset[str]
    version: list[int]
    fetch: dict = field(default_factory=dict)
    install_steps: list[str] = field(default_factory=list)
    env_template: dict[str, str] = field(default_factory=dict)
    platform_filter: list[tuple[str, str]] | None = None
    deps: dict = field(default_factory=dict)

    @classmethod
    def from_meta(cls, meta: dict) -> "PackageSpec":
        if not isinstance(meta, dict):
            raise CKError(GENERIC, "package meta must be a mapping")
        fetch = meta.get("fetch") or {}
        if not isinstance(fetch, dict):
            raise CKError(GENERIC, "package fetch must be a mapping")
        if fetch.get("url") and not SHA256_RE.match(str(fetch.get("sha256", "")).lower()):
            raise CKError(GENERIC, "package fetch.sha256 must be 64 hex characters when fetch.url is set")
        steps = meta.get("install_steps") or []
        if not isinstance(steps, list) or not all(isinstance(s, str) for s in steps):
            raise CKError(GENERIC, "install_steps must be a list of strings")
        env_template = meta.get("env_template") or {}
        if not isinstance(env_template, dict):
            raise CKError(GENERIC, "env_template must be a mapping")
        pf = meta.get("platform_filter")
        if pf is not None:
            try:
                pf = [(str(o).lower(), str(a).lower()) for o, a in pf]
            except (TypeError, ValueError) as exc:
                raise CKError(GENERIC, "platform_filter must be a list of [os, arch] pairs") from exc
        deps = meta.get("deps") or {}
        if not isinstance(deps, dict):
            raise CKError(GENERIC, "package deps must be a mapping")
        return cls(tags=parse_tags(meta.get("tags")),
                   version=_as_version(meta.get("version"), "package version") or [],
                   fetch=fetch, install_steps=steps,
                   env_template={str(k): str(v) for k, v in env_template.items()},
                   platform_filter=pf, deps=deps)

    def supports_host(self) -> bool:
        if self.platform_filter is None:
            return True
        host_os, host_arch = host_platform()
        return any(o in ("*", host_os) and a in ("*", host_arch) for o, a in self.platform_filter)


def host_platform() -> tuple[str, str]:
    return platform.system().lower(), platform.machine().lower()


@dataclass
class ResolvedDeps:
    entries: list[tuple[str, str, list[int]]] = field(default_factory=list)
    merged_env: dict[str, str] = field(default_factory=dict)
    installed: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"entries": [{"key": k, "uid": u, "version": list(v)} for k, u, v in self.entries],
                "merged_env": dict(self.merged_env)}

    @classmethod
    def from_dict(cls, doc: dict) -> "ResolvedDeps":
        return cls(entries=[(e["key"], e["uid"], list(e["version"])) for e in doc.get("entries", [])],
                   merged_env=dict(doc.get("merged_env", {})))


def normalize_specs(specs: dict) -> list[DependencySpec]:
    if not isinstance(specs, dict):
        raise CKError(GENERIC, "dependencies must be a mapping of key -> spec")
    out = [DependencySpec.from_meta(k, v) for k, v in specs.items()]
    return sorted(out, key=lambda s: (s.sort, s.key))


def _detect_for(registry: Registry, spec: DependencySpec) -> None:
    for comp in registry.iter_components("soft"):
        tags = parse_tags(comp.meta.get("tags")) | {"vdetected"}
        if not spec.tags <= tags or spec.no_tags & tags:
            continue
        try:
            detect(registry, comp.ref)
        except CKError as exc:
            log.warning("detection with %s failed: %s", comp.ref, exc)


def _package_candidates(registry: Registry, spec: DependencySpec) -> list[tuple[Component, PackageSpec]]:
    out = []
    for comp in registry.iter_components("package"):
        try:
            pkg = PackageSpec.from_meta(comp.meta)
        except CKError as exc:
            log.warning("skipping invalid package %s: %s", comp.ref, exc)
            continue
        if spec.accepts(pkg.tags, pkg.version):
            out.append((comp, pkg))

    def order(a, b):
        c = compare_versions(b[1].version, a[1].version)
        return c or (a[0].uid > b[0].uid) - (a[0].uid < b[0].uid)

    return sorted(out, key=functools.cmp_to_key(order))


def resolve(specs: dict, registry: Registry, allow_install: bool = False, allow_detect: bool = True,
            base_env: dict | None = None, _depth: int = 0, _stack: tuple = ()) -> ResolvedDeps:
    """Resolve every spec, in ascending ``sort`` order, to one ``env`` entry.

    Unmatched specs first trigger detection plugins whose tags fit, then
    (with ``allow_install``) installation of the best matching package.
    """
    result = ResolvedDeps()
    for spec in normalize_specs(specs):
        candidates = env_entries(registry)
        entry = match_dep(spec, candidates)
        if entry is None and allow_detect:
            _detect_for(registry, spec)
            candidates = env_entries(registry)
            entry = match_dep(spec, candidates)

        package_reasons = []
        if entry is None and allow_install:
            for comp, pkg in _package_candidates(registry, spec):
                if not pkg.supports_host():
                    package_reasons.append(f"package {comp.ref}: package not available for this platform")
                    continue
                env = {**(base_env or {}), **result.merged_env}
                install_package(registry, comp.ref, base_env=env, _depth=_depth, _stack=_stack)
                result.installed.append(str(comp.ref))
                candidates = env_entries(registry)
                entry = match_dep(spec, candidates)
                if entry is not None:
                    break

        if entry is None:
            reasons = [f"env {c.alias or c.uid} v{version_str(c.version)}: "
                       f"{rejection_reason(spec, c.tags, c.version)}" for c in candidates]
            reasons += package_reasons
            detail = "; ".join(reasons) if reasons else "no candidates"
            raise CKError(DEPENDENCY, f"unsatisfied dependency {spec.key!r} ({spec.name}): {detail}",
                          unsatisfied=spec.key, rejections=reasons)

        result.entries.append((spec.key, entry.uid, list(entry.version)))
        result.merged_env.update(entry.env)
    return result


def _fetch(url: str, base: Path, dest: Path) -> Path:
    parsed = urllib.parse.urlparse(url)
    target = dest / (Path(parsed.path).name or "download")
    try:
        if parsed.scheme in ("http", "https", "ftp", "file"):
            with urllib.request.urlopen(url, timeout=120) as resp, open(target, "wb") as fh:
                shutil.copyfileobj(resp, fh)
        else:
            shutil.copyfile(base / url, target)
    except OSError as exc:
        raise CKError(IO, f"cannot fetch {url}: {exc}") from exc
    return target


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _unpack(archive: Path, dest: Path) -> None:
    try:
        if zipfile.is_zipfile(archive):
            with zipfile.ZipFile(archive) as zf:
                safe_extract_zip(zf, dest)
        elif tarfile.is_tarfile(archive):
            with tarfile.open(archive) as tf:
                safe_extract_tar(tf, dest)
    except (zipfile.BadZipFile, tarfile.TarError, OSError) as exc:
        raise CKError(IO, f"cannot unpack {archive.name}: {exc}") from exc


def install_package(registry: Registry, pkg_ref: ComponentRef | str, target_dir: Path | None = None,
                    base_env: dict | None = None, _depth: int = 0, _stack: tuple = ()) -> EnvEntry:
    """Fetch, verify and install a package, then register an ``env`` entry for it.

    The install is all-or-nothing: a failing step removes the install dir.
    """
    comp = registry.load(pkg_ref)
    pkg = PackageSpec.from_meta(comp.meta)
    if not pkg.supports_host():
        raise CKError(GENERIC, f"package not available for this platform: {comp.ref} ({'/'.join(host_platform())})")

    signature = (tuple(sorted(pkg.tags)), tuple(pkg.version))
    if signature in _stack:
        raise CKError(DEPENDENCY, f"dependency cycle through package {comp.ref}")
    if _depth >= MAX_DEPTH:
        raise CKError(DEPENDENCY, f"package dependency depth limit {MAX_DEPTH} exceeded at {comp.ref}")

    env = {"PATH": os.environ.get("PATH", os.defpath), **(base_env or {})}
    if pkg.deps:
        sub = resolve(pkg.deps, registry, allow_install=True, base_env=base_env,
                      _depth=_depth + 1, _stack=_stack + (signature,))
        env.update(sub.merged_env)

    install_dir = Path(target_dir) if target_dir else registry.install_dir / f"{comp.data_name}-{version_str(pkg.version) or '0'}"
    local = registry.repo("local")
    with registry.write_lock(local):
        tmp_dir = Path(tempfile.mkdtemp(prefix="ck-install-"))
        created = False
        try:
            if pkg.fetch.get("url"):
                archive = _fetch(pkg.fetch["url"], comp.payload_dir, tmp_dir)
                digest = _sha256(archive)
                if digest != pkg.fetch["sha256"].lower():
                    raise CKError(IO, f"integrity failure: {pkg.fetch['url']} has sha256 {digest}, "
                                      f"expected {pkg.fetch['sha256']}")
                _unpack(archive, tmp_dir)

            if install_dir.exists():
                shutil.rmtree(install_dir)
            install_dir.mkdir(parents=True)
            created = True

            values = {"install_dir": str(install_dir), "tmp_dir": str(tmp_dir),
                      "os": host_platform()[0], "pkg_dir": str(comp.payload_dir)}
            transcript = []
            for step in pkg.install_steps:
                cmd = templates.expand(step, values)
                proc = subprocess.run(cmd, shell=True, cwd=tmp_dir, env=env, stdin=subprocess.DEVNULL,
                                      stdout=subprocess.PIPE, stderr=subprocess.STDOUT, check=False)
                output = proc.stdout.decode("utf-8", errors="replace")
                transcript.append(f"$ {cmd}\n{output}[exit {proc.returncode}]\n")
                if proc.returncode != 0:
                    raise CKError(EXECUTION, f"install step failed with exit {proc.returncode}: {cmd}\n{output[-2000:]}",
                                  output=output)
            (install_dir / INSTALL_LOG).write_text("".join(transcript), encoding="utf-8")

            tvalues = {"path": str(install_dir), "dir": str(install_dir), "install_dir": str(install_dir),
                       "version": version_str(pkg.version)}
            entry = EnvEntry(uid="", tags=pkg.tags, version=list(pkg.version),
                             env={k: templates.expand(v, tvalues) for k, v in pkg.env_template.items()},
                             detected_path=str(install_dir), source="installed")
            meta = entry.to_meta(package=str(comp.ref), package_uid=comp.uid)
            alias = f"{comp.data_name}-{version_str(pkg.version) or '0'}"
            try:
                stored = registry.update(ComponentRef("env", alias, "local"), meta=meta)
            except CKError:
                stored = registry.add(ComponentRef("env", alias, "local"), meta,
                                      info={"installed_from": str(comp.ref)})
            return EnvEntry.from_component(stored)
        except BaseException:
            if created:
                shutil.rmtree(install_dir, ignore_errors=True)
            raise
        finally:
            shutil.rmtree(tmp_dir, ignore_errors=True)
