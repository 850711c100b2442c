"""On-disk component database.

A repository is a directory with a ``.ckr.json`` descriptor and a two-level
``<module>/<data>/`` layout. Each component keeps its metadata in a ``.cm``
directory::

    <repo>/<module>/<data>/.cm/meta.json       free-form meta document
    <repo>/<module>/<data>/.cm/info.json       provenance
    <repo>/<module>/<data>/.cm/meta-lock.json  {"uid": ..., "alias": ...}

The registry index (``repos.json`` in the config dir) lists every known
repository. Two are always present: ``default`` ships with the package and
is read-only, ``local`` is a writable scratch pad inside the config dir.
"""

from __future__ import annotations

import fnmatch
import logging
import os
import re
import secrets
import shutil
import tarfile
import tempfile
import threading
import urllib.parse
import urllib.request
import zipfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator

from filelock import FileLock

from . import jsonio
from .errors import GENERIC, IO, NOT_FOUND, CKError

log = logging.getLogger(__name__)

DEFAULT_REPO_PATH = Path(__file__).parent / "repo_default"
SAMPLES_PATH = Path(__file__).parent / "samples"

NAME_RE = re.compile(r"^[a-z0-9._-]+$")
UID_RE = re.compile(r"^[0-9a-f]{16}$")
GLOB_CHARS = set("*?[")
CM = ".cm"
LOCK_NAME = ".ck.lock"
CKR = ".ckr.json"
INDEX = "repos.json"


def new_uid() -> str:
    return secrets.token_hex(8)


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def check_name(name: str, what: str = "data name") -> str:
    if not isinstance(name, str) or not NAME_RE.match(name) or name.startswith("."):
        raise CKError(GENERIC, f"invalid {what} {name!r}: expected [a-z0-9._-]+ not starting with '.'")
    return name


def parse_tags(tags) -> frozenset[str]:
    """Comma-separated string (or list) -> trimmed lowercase tag set."""
    if tags is None:
        return frozenset()
    if isinstance(tags, str):
        items = tags.split(",")
    elif isinstance(tags, (list, tuple, set, frozenset)):
        items = [str(t) for t in tags]
    else:
        raise CKError(GENERIC, f"tags must be a string or list, got {type(tags).__name__}")
    return frozenset(t.strip().lower() for t in items if t.strip())


@dataclass(frozen=True)
class ComponentRef:
    module: str
    data: str | None = None
    repo: str | None = None

    @classmethod
    def parse(cls, text: str) -> "ComponentRef":
        if not isinstance(text, str) or not text:
            raise CKError(GENERIC, "empty component reference")
        parts = text.split(":")
        if len(parts) == 1:
            return cls(module=parts[0])
        if len(parts) == 2:
            return cls(module=parts[0], data=parts[1] or None)
        if len(parts) == 3:
            return cls(repo=parts[0] or None, module=parts[1], data=parts[2] or None)
        raise CKError(GENERIC, f"malformed component reference {text!r}")

    def __str__(self) -> str:
        if self.repo:
            return f"{self.repo}:{self.module}:{self.data or ''}"
        if self.data:
            return f"{self.module}:{self.data}"
        return self.module


@dataclass(frozen=True)
class RepoDescriptor:
    name: str
    uid: str
    path: Path
    deps: tuple[str, ...] = ()
    readonly: bool = False

    def to_dict(self) -> dict:
        return {"name": self.name, "uid": self.uid, "path": str(self.path),
                "deps": list(self.deps), "readonly": self.readonly}


@dataclass
class Component:
    repo: str
    module_name: str
    data_name: str
    uid: str
    meta: dict
    info: dict
    payload_dir: Path = field(repr=False)

    @property
    def ref(self) -> ComponentRef:
        return ComponentRef(module=self.module_name, data=self.data_name, repo=self.repo)

    def to_dict(self) -> dict:
        return {"repo_uoa": self.repo, "module_uoa": self.module_name, "data_uoa": self.data_name,
                "data_uid": self.uid, "meta": self.meta, "info": self.info,
                "path": str(self.payload_dir)}


_thread_locks: dict[str, FileLock] = {}
_thread_locks_guard = threading.Lock()


def _file_lock(path: Path) -> FileLock:
    key = str(path)
    with _thread_locks_guard:
        lock = _thread_locks.get(key)
        if lock is None:
            lock = _thread_locks[key] = FileLock(key)
        return lock


def read_ckr(path: Path) -> dict:
    ckr = path / CKR
    if not ckr.is_file():
        raise CKError(GENERIC, f"not a component repository: no {CKR} in {path}")
    try:
        doc = jsonio.read_json(ckr)
    except (OSError, ValueError) as exc:
        raise CKError(GENERIC, f"not a component repository: unreadable {ckr}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("name"), str) or not UID_RE.match(str(doc.get("uid", ""))):
        raise CKError(GENERIC, f"not a component repository: {ckr} lacks a valid name/uid")
    return doc


def _clean_deps(name: str, deps) -> tuple[str, ...]:
    out: list[str] = []
    for d in deps or []:
        if isinstance(d, str) and d != name and d not in out:
            out.append(d)
    return tuple(out)


class Registry:
    """Handle on one config directory and the repositories it indexes.

    The handle holds no mutable cache, so it can be shared between threads.
    """

    def __init__(self, config_dir: Path):
        self.config_dir = Path(config_dir).resolve()

    # -- registry index -------------------------------------------------

    @property
    def index_path(self) -> Path:
        return self.config_dir / INDEX

    @property
    def repos_dir(self) -> Path:
        return self.config_dir / "repos"

    @property
    def install_dir(self) -> Path:
        return self.config_dir / "install"

    def _read_index(self) -> dict:
        try:
            return jsonio.read_json(self.index_path)
        except FileNotFoundError:
            return {}
        except (OSError, ValueError) as exc:
            raise CKError(IO, f"cannot read registry index {self.index_path}: {exc}") from exc

    def _write_index(self, index: dict) -> None:
        try:
            jsonio.write_json(self.index_path, index)
        except OSError as exc:
            raise CKError(IO, f"cannot write registry index {self.index_path}: {exc}") from exc

    def repos(self) -> list[RepoDescriptor]:
        """All repositories in registration order."""
        index = self._read_index()
        out = []
        for name, entry in sorted(index.items(), key=lambda kv: (kv[1].get("order", 0), kv[0])):
            path = Path(entry["path"])
            deps: tuple[str, ...] = ()
            try:
                deps = _clean_deps(name, read_ckr(path).get("deps"))
            except CKError:
                log.warning("repository %s at %s has no readable %s", name, path, CKR)
            out.append(RepoDescriptor(name=name, uid=entry["uid"], path=path, deps=deps,
                                      readonly=bool(entry.get("readonly", False))))
        return out

    def repo(self, name: str) -> RepoDescriptor:
        for r in self.repos():
            if r.name == name:
                return r
        raise CKError(NOT_FOUND, f"repository {name!r} not found")

    def resolution_order(self) -> list[RepoDescriptor]:
        """local first, then user repos in registration order, then default."""
        repos = self.repos()
        local = [r for r in repos if r.name == "local"]
        default = [r for r in repos if r.name == "default"]
        rest = [r for r in repos if r.name not in ("local", "default")]
        return local + rest + default

    @contextmanager
    def write_lock(self, repo: RepoDescriptor) -> Iterator[None]:
        if repo.readonly:
            raise CKError(IO, f"repository is read-only: {repo.name}")
        with _file_lock(repo.path / LOCK_NAME):
            yield

    # -- repositories ---------------------------------------------------

    def pull_repo(self, source: str, name: str | None = None) -> dict:
        """Fetch a repository archive or directory and register it.

        Returns ``{"repo": RepoDescriptor, "warnings": [...], "already_registered": bool}``.
        """
        with tempfile.TemporaryDirectory(prefix="ck-pull-") as tmp:
            root = _materialize(source, Path(tmp))
            ckr = read_ckr(root)
            repo_name = check_name(name or ckr["name"], "repository name")
            uid = ckr["uid"]
            warnings = []
            deps = _clean_deps(repo_name, ckr.get("deps"))
            if list(deps) != list(ckr.get("deps") or []):
                warnings.append("duplicate or self-referencing deps dropped")

            with _file_lock(self.config_dir / LOCK_NAME):
                index = self._read_index()
                if repo_name in index:
                    if index[repo_name]["uid"] != uid:
                        raise CKError(GENERIC, f"repository name conflict: {repo_name!r} already registered "
                                               f"with uid {index[repo_name]['uid']}")
                    return {"repo": self.repo(repo_name), "warnings": warnings, "already_registered": True}

                dest = self.repos_dir / repo_name
                if dest.exists():
                    shutil.rmtree(dest)
                try:
                    self.repos_dir.mkdir(parents=True, exist_ok=True)
                    staging = Path(tempfile.mkdtemp(prefix=f".{repo_name}.", dir=self.repos_dir))
                    shutil.rmtree(staging)
                    shutil.copytree(root, staging, ignore=shutil.ignore_patterns(LOCK_NAME))
                    os.replace(staging, dest)
                except OSError as exc:
                    raise CKError(IO, f"cannot place repository under {self.repos_dir}: {exc}") from exc

                order = max((e.get("order", 0) for e in index.values()), default=0) + 1
                index[repo_name] = {"uid": uid, "path": str(dest), "order": order}
                self._write_index(index)

            known = set(index)
            for dep in deps:
                if dep not in known:
                    warnings.append(f"missing dependency repository: {dep}")
            return {"repo": self.repo(repo_name), "warnings": warnings, "already_registered": False}

    # -- component lookup ------------------------------------------------

    def _repos_for(self, ref: ComponentRef) -> list[RepoDescriptor]:
        if ref.repo:
            return [self.repo(ref.repo)]
        return self.resolution_order()

    def _component_dirs(self, repo: RepoDescriptor, module: str) -> list[Path]:
        mdir = repo.path / module
        if not mdir.is_dir():
            return []
        return sorted(p for p in mdir.iterdir()
                      if p.is_dir() and not p.name.startswith(".") and (p / CM / "meta.json").is_file())

    def _read_component(self, repo: RepoDescriptor, module: str, path: Path) -> Component:
        cm = path / CM
        try:
            meta = jsonio.read_json(cm / "meta.json")
            info = jsonio.read_json(cm / "info.json") if (cm / "info.json").is_file() else {}
            lock = jsonio.read_json(cm / "meta-lock.json") if (cm / "meta-lock.json").is_file() else {}
        except (OSError, ValueError) as exc:
            raise CKError(IO, f"cannot read component at {path}: {exc}") from exc
        return Component(repo=repo.name, module_name=module, data_name=path.name,
                         uid=lock.get("uid", ""), meta=meta, info=info, payload_dir=path)

    def _uid_of(self, path: Path) -> str | None:
        try:
            return jsonio.read_json(path / CM / "meta-lock.json").get("uid")
        except (OSError, ValueError):
            return None

    def load(self, ref: ComponentRef | str) -> Component:
        if isinstance(ref, str):
            ref = ComponentRef.parse(ref)
        if not ref.data:
            raise CKError(GENERIC, f"data name required to load {ref}")
        repos = self._repos_for(ref)

        if GLOB_CHARS & set(ref.data):
            seen: dict[str, Component] = {}
            for repo in repos:
                for p in self._component_dirs(repo, ref.module):
                    if fnmatch.fnmatchcase(p.name, ref.data) and p.name not in seen:
                        seen[p.name] = self._read_component(repo, ref.module, p)
            if not seen:
                raise CKError(NOT_FOUND, f"entry not found: {ref}")
            if len(seen) > 1:
                raise CKError(GENERIC, f"more than one match for {ref}: {', '.join(sorted(seen))}")
            return next(iter(seen.values()))

        # alias anywhere in resolution order wins over a UID match
        for repo in repos:
            direct = repo.path / ref.module / ref.data
            if NAME_RE.match(ref.data) and not ref.data.startswith(".") and (direct / CM / "meta.json").is_file():
                return self._read_component(repo, ref.module, direct)
        if UID_RE.match(ref.data):
            for repo in repos:
                for p in self._component_dirs(repo, ref.module):
                    if self._uid_of(p) == ref.data:
                        return self._read_component(repo, ref.module, p)
        raise CKError(NOT_FOUND, f"entry not found: {ref}")

    def iter_components(self, module: str) -> Iterator[Component]:
        """Every component of ``module`` in registration order, then name order."""
        for repo in self.repos():
            for p in self._component_dirs(repo, module):
                yield self._read_component(repo, module, p)

    def search(self, module: str, tags=None, name_glob: str | None = None) -> list[ComponentRef]:
        want = parse_tags(tags)
        out = []
        for repo in self.repos():
            for p in self._component_dirs(repo, module):
                if name_glob and not fnmatch.fnmatchcase(p.name, name_glob):
                    continue
                if want:
                    try:
                        have = parse_tags(jsonio.read_json(p / CM / "meta.json").get("tags"))
                    except (OSError, ValueError, AttributeError, CKError):
                        continue
                    if not want <= have:
                        continue
                out.append(ComponentRef(module=module, data=p.name, repo=repo.name))
        return out

    def modules(self) -> list[str]:
        """Names of every module directory present in any repository."""
        names = set()
        for repo in self.repos():
            if repo.path.is_dir():
                names.update(p.name for p in repo.path.iterdir()
                             if p.is_dir() and NAME_RE.match(p.name) and not p.name.startswith("."))
        return sorted(names)

    # -- mutation ---------------------------------------------------------

    def _target_repo(self, ref: ComponentRef) -> RepoDescriptor:
        return self.repo(ref.repo or "local")

    def _write_cm(self, path: Path, uid: str, alias: str, meta: dict, info: dict) -> None:
        cm = path / CM
        jsonio.write_json(cm / "meta.json", meta)
        jsonio.write_json(cm / "info.json", info)
        jsonio.write_json(cm / "meta-lock.json", {"alias": alias, "uid": uid})

    def _uid_taken(self, repo: RepoDescriptor, module: str, uid: str) -> bool:
        return any(self._uid_of(p) == uid for p in self._component_dirs(repo, module))

    def add(self, ref: ComponentRef | str, meta: dict, info: dict | None = None,
            uid: str | None = None, payload_from: Path | None = None) -> Component:
        if isinstance(ref, str):
            ref = ComponentRef.parse(ref)
        check_name(ref.module, "module name")
        check_name(ref.data or "", "data name")
        if not isinstance(meta, dict):
            raise CKError(GENERIC, "meta must be a mapping")
        if uid is None:
            uid = new_uid()
        elif not UID_RE.match(uid):
            raise CKError(GENERIC, f"invalid uid {uid!r}: expected 16 lowercase hex characters")
        info = dict(info or {})
        info.setdefault("created_iso8601", utc_now())

        repo = self._target_repo(ref)
        with self.write_lock(repo):
            dest = repo.path / ref.module / ref.data
            if dest.exists():
                raise CKError(GENERIC, f"entry already exists: {repo.name}:{ref.module}:{ref.data}")
            if self._uid_taken(repo, ref.module, uid):
                raise CKError(GENERIC, f"entry already exists: uid {uid} in {repo.name}:{ref.module}")
            staging = None
            try:
                dest.parent.mkdir(parents=True, exist_ok=True)
                staging = Path(tempfile.mkdtemp(prefix=f".{ref.data}.", suffix=".staging", dir=dest.parent))
                if payload_from is not None:
                    shutil.rmtree(staging)
                    shutil.copytree(payload_from, staging, ignore=_ignore_top(payload_from, {"tmp", CM}))
                self._write_cm(staging, uid, ref.data, meta, info)
                os.replace(staging, dest)
            except OSError as exc:
                if staging is not None:
                    shutil.rmtree(staging, ignore_errors=True)
                raise CKError(IO, f"cannot write component {ref} in {repo.path}: {exc}") from exc
        return self._read_component(repo, ref.module, dest)

    def update(self, ref: ComponentRef | str, meta: dict | None = None, info: dict | None = None) -> Component:
        comp = self.load(ref)
        repo = self.repo(comp.repo)
        with self.write_lock(repo):
            cm = comp.payload_dir / CM
            try:
                if meta is not None:
                    jsonio.write_json(cm / "meta.json", meta)
                if info is not None:
                    jsonio.write_json(cm / "info.json", info)
            except OSError as exc:
                raise CKError(IO, f"cannot update {comp.ref}: {exc}") from exc
        return self._read_component(repo, comp.module_name, comp.payload_dir)

    def copy(self, src: ComponentRef | str, dst: ComponentRef | str) -> Component:
        """Duplicate payload, meta and info under a fresh uid; ``tmp/`` is skipped."""
        if isinstance(src, str):
            src = ComponentRef.parse(src)
        if isinstance(dst, str):
            dst = ComponentRef.parse(dst)
        comp = self.load(src)
        info = dict(comp.info)
        info.pop("created_iso8601", None)
        info["copied_from_uid"] = comp.uid
        return self.add(ComponentRef(module=dst.module or comp.module_name, data=dst.data, repo=dst.repo),
                        comp.meta, info=info, payload_from=comp.payload_dir)

    def rename(self, src: ComponentRef | str, new_name: str) -> Component:
        comp = self.load(src)
        check_name(new_name)
        repo = self.repo(comp.repo)
        with self.write_lock(repo):
            dest = comp.payload_dir.parent / new_name
            if dest.exists():
                raise CKError(GENERIC, f"entry already exists: {repo.name}:{comp.module_name}:{new_name}")
            try:
                os.replace(comp.payload_dir, dest)
                jsonio.write_json(dest / CM / "meta-lock.json", {"alias": new_name, "uid": comp.uid})
            except OSError as exc:
                raise CKError(IO, f"cannot rename {comp.ref}: {exc}") from exc
        return self._read_component(repo, comp.module_name, dest)

    def remove(self, ref: ComponentRef | str) -> None:
        comp = self.load(ref)
        repo = self.repo(comp.repo)
        with self.write_lock(repo):
            # rename first so readers never see a half-deleted component
            doomed = comp.payload_dir.parent / f".{comp.data_name}.{new_uid()}.removing"
            try:
                os.replace(comp.payload_dir, doomed)
                shutil.rmtree(doomed)
            except OSError as exc:
                raise CKError(IO, f"cannot remove {comp.ref}: {exc}") from exc

    # -- scratch space ------------------------------------------------------

    def work_dir(self, comp: Component) -> Path:
        """Writable ``tmp`` area for a component (inside ``local`` for read-only repos)."""
        if self.repo(comp.repo).readonly:
            return self.repo("local").path / ".cktmp" / f"{comp.module_name}-{comp.uid}"
        return comp.payload_dir / "tmp"


def _ignore_top(root: Path, names: set[str]):
    root = Path(root).resolve()

    def ignore(directory, entries):
        if Path(directory).resolve() == root:
            return [e for e in entries if e in names]
        return []

    return ignore


_ARCHIVE_SUFFIXES = (".zip", ".tar", ".tar.gz", ".tgz", ".tar.bz2", ".tbz2", ".tar.xz", ".txz")


def _materialize(source: str, tmp: Path) -> Path:
    """Turn a URL, archive path or directory into a local directory holding ``.ckr.json``."""
    source = str(source)
    parsed = urllib.parse.urlparse(source)
    if parsed.scheme in ("http", "https", "ftp"):
        name = Path(parsed.path).name or "repo.zip"
        if not name.endswith(_ARCHIVE_SUFFIXES):
            name += ".zip"
        local = tmp / name
        try:
            with urllib.request.urlopen(source, timeout=60) as resp, open(local, "wb") as fh:
                shutil.copyfileobj(resp, fh)
        except OSError as exc:
            raise CKError(IO, f"cannot fetch {source}: {exc}") from exc
    elif parsed.scheme == "file":
        local = Path(urllib.request.url2pathname(parsed.path))
    else:
        local = Path(source)

    if local.is_dir():
        return _find_repo_root(local)
    if not local.is_file():
        raise CKError(NOT_FOUND, f"repository source not found: {source}")

    unpack = tmp / "unpacked"
    unpack.mkdir()
    try:
        if zipfile.is_zipfile(local):
            with zipfile.ZipFile(local) as zf:
                safe_extract_zip(zf, unpack)
        elif tarfile.is_tarfile(local):
            with tarfile.open(local) as tf:
                safe_extract_tar(tf, unpack)
        else:
            raise CKError(GENERIC, f"not a component repository: {source} is neither a directory nor an archive")
    except (OSError, zipfile.BadZipFile, tarfile.TarError) as exc:
        raise CKError(GENERIC, f"not a component repository: cannot unpack {source}: {exc}") from exc
    return _find_repo_root(unpack)


def _find_repo_root(path: Path) -> Path:
    if (path / CKR).is_file():
        return path
    children = [p for p in path.iterdir() if p.is_dir()]
    if len(children) == 1 and (children[0] / CKR).is_file():
        return children[0]
    raise CKError(GENERIC, f"not a component repository: no {CKR} found")


def _within(base: Path, target: Path) -> bool:
    base = base.resolve()
    try:
        target.resolve().relative_to(base)
        return True
    except ValueError:
        return False


def safe_extract_zip(zf: zipfile.ZipFile, dest: Path) -> None:
    for member in zf.namelist():
        if not _within(dest, dest / member):
            raise CKError(GENERIC, f"archive member escapes target directory: {member}")
    zf.extractall(dest)


def safe_extract_tar(tf: tarfile.TarFile, dest: Path) -> None:
    safe = []
    for member in tf.getmembers():
        if member.issym() or member.islnk() or member.isdev():
            continue
        if not _within(dest, dest / member.name):
            raise CKError(GENERIC, f"archive member escapes target directory: {member.name}")
        safe.append(member)
    tf.extractall(dest, members=safe)


def init_registry(config_dir: str | Path) -> Registry:
    """Open (creating on first use) the registry rooted at ``config_dir``."""
    config_dir = Path(config_dir)
    try:
        config_dir.mkdir(parents=True, exist_ok=True)
        local = config_dir / "local"
        local.mkdir(exist_ok=True)
        probe = local / f".write-probe-{os.getpid()}"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise CKError(IO, f"cannot create local repository in {config_dir}: {exc}") from exc

    reg = Registry(config_dir)
    with _file_lock(reg.config_dir / LOCK_NAME):
        index = reg._read_index()
        before = jsonio.dumps(index)

        if not (local / CKR).is_file():
            jsonio.write_json(local / CKR, {"deps": [], "format_version": 1, "name": "local", "uid": new_uid()})
        local_uid = read_ckr(local)["uid"]
        default_uid = read_ckr(DEFAULT_REPO_PATH)["uid"]

        index["default"] = {"order": 0, "path": str(DEFAULT_REPO_PATH.resolve()),
                            "readonly": True, "uid": default_uid}
        index["local"] = {"order": 1, "path": str(local.resolve()), "uid": local_uid}
        if jsonio.dumps(index) != before:
            reg._write_index(index)
    return reg
