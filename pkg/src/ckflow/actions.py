"""Unified map-in/map-out access to every action.

    >>> k = Kernel.open("~/.ckflow")
    >>> r = k.access({"action": "load", "module_uoa": "program", "data_uoa": "hello-benchmark"})
    >>> if r["return"] > 0: print(r["error"])

Handlers raise :class:`~ckflow.errors.CKError`; :meth:`Kernel.access` never
lets an exception escape and always answers with the ``{"return": ...}``
envelope.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Callable

from . import autotune, env_detect, experiments, packages, pipeline
from .errors import GENERIC, NOT_FOUND, UNKNOWN, CKError
from .registry import ComponentRef, Registry, init_registry

log = logging.getLogger(__name__)

DEFAULT_HOME = "~/.ckflow"

Handler = Callable[["Kernel", "Request"], dict]


def default_config_dir() -> Path:
    return Path(os.environ.get("CKFLOW_HOME") or os.path.expanduser(DEFAULT_HOME))


def to_bool(value) -> bool:
    if isinstance(value, str):
        return value.strip().lower() in ("1", "yes", "true", "on", "y")
    return bool(value)


def to_int(value, name: str) -> int:
    if isinstance(value, bool):
        raise CKError(GENERIC, f"{name} must be an integer")
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise CKError(GENERIC, f"{name} must be an integer, got {value!r}") from exc


def to_float(value, name: str) -> float:
    if isinstance(value, bool):
        raise CKError(GENERIC, f"{name} must be a number")
    try:
        return float(value)
    except (TypeError, ValueError) as exc:
        raise CKError(GENERIC, f"{name} must be a number, got {value!r}") from exc


def to_map(value, name: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise CKError(GENERIC, f"{name} must be a mapping")
    return value


class Request:
    """Parsed request: action, target reference and remaining params."""

    RESERVED = {"action", "module_uoa", "module", "data_uoa", "data", "repo_uoa", "repo"}

    def __init__(self, doc: dict):
        if not isinstance(doc, dict):
            raise CKError(GENERIC, "request must be a mapping")
        action = doc.get("action")
        module = doc.get("module_uoa", doc.get("module"))
        data = doc.get("data_uoa", doc.get("data"))
        repo = doc.get("repo_uoa", doc.get("repo"))
        if not isinstance(action, str) or not action:
            raise CKError(GENERIC, "request needs an 'action' string")
        if not isinstance(module, str) or not module:
            raise CKError(GENERIC, "request needs a 'module_uoa' string")
        for what, value in (("data_uoa", data), ("repo_uoa", repo)):
            if value is not None and not isinstance(value, str):
                raise CKError(GENERIC, f"{what} must be a string")
        self.action = action
        self.ref = ComponentRef(module=module, data=data or None, repo=repo or None)
        self.params = {k: v for k, v in doc.items() if k not in self.RESERVED}

    def get(self, key: str, default=None):
        return self.params.get(key, default)

    def need_data(self) -> ComponentRef:
        if not self.ref.data:
            raise CKError(GENERIC, f"action {self.action!r} needs a data name ({self.ref.module}:<name>)")
        return self.ref

    def extra(self, index: int = 0, *keys: str):
        for k in keys:
            if self.params.get(k):
                return self.params[k]
        args = self.params.get("extra_args") or []
        if isinstance(args, list) and len(args) > index:
            return args[index]
        return None


# -- generic actions -------------------------------------------------------------

def _add(k: "Kernel", r: Request) -> dict:
    ref = r.need_data()
    meta = dict(to_map(r.get("meta"), "meta"))
    if r.get("tags") is not None:
        meta["tags"] = r.get("tags")
    info = to_map(r.get("info"), "info")
    uid = r.get("uid")
    if uid is not None and not isinstance(uid, str):
        raise CKError(GENERIC, "uid must be a string")
    comp = k.registry.add(ref, meta, info=info, uid=uid)
    return comp.to_dict()


def _load(k: "Kernel", r: Request) -> dict:
    return k.registry.load(r.need_data()).to_dict()


def _search(k: "Kernel", r: Request) -> dict:
    tags = r.get("tags")
    if tags is not None and not isinstance(tags, (str, list)):
        raise CKError(GENERIC, "tags must be a comma-separated string")
    refs = k.registry.search(r.ref.module, tags=tags, name_glob=r.ref.data)
    if r.ref.repo:
        refs = [x for x in refs if x.repo == r.ref.repo]
    return {"lst": [{"repo_uoa": x.repo, "module_uoa": x.module, "data_uoa": x.data, "ref": str(x)}
                    for x in refs]}


def _find(k: "Kernel", r: Request) -> dict:
    comp = k.registry.load(r.need_data())
    return {"path": str(comp.payload_dir), "repo_uoa": comp.repo, "data_uid": comp.uid}


def _cp(k: "Kernel", r: Request) -> dict:
    target = r.extra(0, "target", "new_ref")
    if not isinstance(target, str) or not target:
        raise CKError(GENERIC, "cp needs a target reference, e.g. local:program:new-name")
    dst = ComponentRef.parse(target)
    if dst.data is None:
        # a bare name is a new data name within the same module
        dst = ComponentRef(module=r.ref.module, data=dst.module)
    return k.registry.copy(r.need_data(), dst).to_dict()


def _rm(k: "Kernel", r: Request) -> dict:
    comp = k.registry.load(r.need_data())
    k.registry.remove(comp.ref)
    return {"removed": str(comp.ref), "data_uid": comp.uid}


def _rename(k: "Kernel", r: Request) -> dict:
    new_name = r.extra(0, "new_data_uoa", "new_name")
    if not isinstance(new_name, str) or not new_name:
        raise CKError(GENERIC, "rename needs a new name")
    return k.registry.rename(r.need_data(), new_name).to_dict()


def _help(k: "Kernel", r: Request) -> dict:
    actions = k.list_actions(r.ref.module)
    return {"module": r.ref.module, "actions": [{"name": n, "help": h} for n, h in actions]}


GENERIC_ACTIONS: dict[str, tuple[Handler, str]] = {
    "add": (_add, "create a component (--meta via @file, --tags=a,b)"),
    "load": (_load, "print a component's meta and info"),
    "search": (_search, "list components by --tags and name glob"),
    "find": (_find, "print a component's directory"),
    "cp": (_cp, "copy a component under a new uid (target like local:module:name)"),
    "rm": (_rm, "delete a component"),
    "rename": (_rename, "change a component's alias, keeping its uid"),
    "help": (_help, "list actions available for a module"),
}


# -- module actions -------------------------------------------------------------

def _repo_pull(k: "Kernel", r: Request) -> dict:
    source = r.get("url") or r.get("path") or r.extra(0) or r.ref.data
    if not isinstance(source, str) or not source:
        raise CKError(GENERIC, "pull needs --url=<archive or directory>")
    name = r.get("name")
    if name is not None and not isinstance(name, str):
        raise CKError(GENERIC, "name must be a string")
    res = k.registry.pull_repo(source, name=name)
    return {"repo": res["repo"].to_dict(), "warnings": res["warnings"],
            "already_registered": res["already_registered"]}


def _repo_list(k: "Kernel", r: Request) -> dict:
    return {"repos": [x.to_dict() for x in k.registry.repos()]}


def _pipeline_args(r: Request) -> dict:
    return {"env_overrides": to_map(r.get("env"), "env"), "choices": to_map(r.get("choices"), "choices")}


def _program_compile(k: "Kernel", r: Request) -> dict:
    rec = pipeline.build(k.registry, r.need_data(), speed=to_bool(r.get("speed", False)), **_pipeline_args(r))
    return {"build": rec}


def _program_run(k: "Kernel", r: Request) -> dict:
    cmd_key = r.get("cmd_key")
    if cmd_key is not None and not isinstance(cmd_key, str):
        raise CKError(GENERIC, "cmd_key must be a string")
    results = pipeline.run(k.registry, r.need_data(), cmd_key=cmd_key,
                           repetitions=to_int(r.get("repetitions", 1), "repetitions"), **_pipeline_args(r))
    payload = {"runs": [x.to_dict() for x in results],
               "characteristics": pipeline.aggregate(results)}
    if all(x.exit_code != 0 for x in results):
        raise CKError(64, f"all {len(results)} repetition(s) exited non-zero "
                          f"(last exit {results[-1].exit_code})", **payload)
    return payload


def _program_benchmark(k: "Kernel", r: Request) -> dict:
    cmd_key = r.get("cmd_key")
    if cmd_key is not None and not isinstance(cmd_key, str):
        raise CKError(GENERIC, "cmd_key must be a string")
    record_uoa = r.get("record_uoa")
    if record_uoa is not None and not isinstance(record_uoa, str):
        raise CKError(GENERIC, "record_uoa must be a string")
    config = pipeline.PipelineConfig(
        cmd_key=cmd_key, repetitions=to_int(r.get("repetitions", 1), "repetitions"),
        record=to_bool(r.get("record", False)) or bool(record_uoa), record_uoa=record_uoa,
        speed=to_bool(r.get("speed", False)), rebuild=to_bool(r.get("rebuild", False)), **_pipeline_args(r))
    point = pipeline.benchmark(k.registry, r.need_data(), config)
    payload = {"point": point.to_dict(), "recorded": config.record,
               "record_uoa": (config.record_uoa or r.ref.data) if config.record else None}
    if point.failed:
        raise CKError(64, "all repetitions exited non-zero", **payload)
    return payload


def _program_tune(k: "Kernel", r: Request) -> dict:
    doc = dict(r.params)
    doc.pop("extra_args", None)
    doc.setdefault("program", str(r.need_data()))
    return autotune.tune(k.registry, autotune.TuningSpec.from_dict(doc))


def _experiment_replay(k: "Kernel", r: Request) -> dict:
    report = experiments.replay(k.registry, r.need_data().data, point_uid=r.get("point_uid"),
                                tolerance_rel=to_float(r.get("tolerance", experiments.DEFAULT_REPLAY_TOLERANCE),
                                                       "tolerance"))
    if not report["consistent"]:
        bad = [m["metric"] for m in report["metrics"] if not m["within_tolerance"]]
        parts = []
        if bad:
            parts.append(f"metrics outside tolerance: {', '.join(bad)}")
        if report["dependency_diff"]:
            parts.append(f"dependency versions changed: {', '.join(d['key'] for d in report['dependency_diff'])}")
        raise CKError(GENERIC, "replay mismatch: " + "; ".join(parts), **report)
    return report


def _query(r: Request):
    metrics = r.get("metrics")
    if metrics is None:
        return None
    return experiments.FrontierQuery.parse(metrics)


def _experiment_pareto(k: "Kernel", r: Request) -> dict:
    query = _query(r)
    if query is None:
        raise CKError(GENERIC, "pareto needs --metrics=name:min,name:max")
    points = [p for p in experiments.load_points(k.registry, r.need_data().data) if not p.failed]
    front = experiments.pareto_frontier(points, query)
    return {"frontier": [p.to_dict() for p in front], "frontier_uids": [p.point_uid for p in front]}


def _experiment_report(k: "Kernel", r: Request) -> dict:
    out_dir = r.get("out_dir", ".")
    if not isinstance(out_dir, str):
        raise CKError(GENERIC, "out_dir must be a path string")
    return experiments.emit_report(k.registry, r.need_data().data, _query(r), out_dir)


def _soft_detect(k: "Kernel", r: Request) -> dict:
    paths = r.get("search_paths")
    if isinstance(paths, str):
        paths = [p for p in paths.split(os.pathsep) if p]
    if paths is not None and not (isinstance(paths, list) and all(isinstance(p, str) for p in paths)):
        raise CKError(GENERIC, "search_paths must be a path list")
    warnings: list[str] = []
    entries = env_detect.detect(k.registry, r.need_data(), search_paths=paths, warnings=warnings)
    return {"entries": [{"uid": e.uid, "alias": e.alias, "version": e.version, "tags": sorted(e.tags),
                         "env": e.env, "detected_path": e.detected_path} for e in entries],
            "warnings": warnings}


def _package_install(k: "Kernel", r: Request) -> dict:
    target = r.get("target_dir")
    if target is not None and not isinstance(target, str):
        raise CKError(GENERIC, "target_dir must be a path string")
    entry = packages.install_package(k.registry, r.need_data(), target_dir=Path(target) if target else None)
    return {"entry": {"uid": entry.uid, "alias": entry.alias, "version": entry.version, "env": entry.env,
                      "install_dir": entry.detected_path}}


def _package_resolve(k: "Kernel", r: Request) -> dict:
    deps = to_map(r.get("deps"), "deps")
    resolved = packages.resolve(deps, k.registry, allow_install=to_bool(r.get("install", False)))
    return {"resolved": resolved.to_dict()}


MODULE_ACTIONS: dict[str, dict[str, tuple[Handler, str]]] = {
    "repo": {"pull": (_repo_pull, "fetch a repository archive or directory and register it"),
             "list": (_repo_list, "list registered repositories")},
    "program": {"compile": (_program_compile, "resolve deps and build (--speed, --env.VAR=value)"),
                "run": (_program_run, "run a built program (--cmd_key, --env.VAR=value, --repetitions)"),
                "benchmark": (_program_benchmark, "build if needed, run, aggregate (--record --record_uoa=NAME)"),
                "tune": (_program_tune, "explore choices and report the Pareto frontier (@tuning.json)")},
    "experiment": {"replay": (_experiment_replay, "re-run a recorded point and compare (--point_uid, --tolerance)"),
                   "pareto": (_experiment_pareto, "Pareto frontier of a record (--metrics=a:min,b:max)"),
                   "report": (_experiment_report, "write report.json/report.html (--out_dir, --metrics)")},
    "env": {},
    "package": {"install": (_package_install, "install a package and register its env entry"),
                "resolve": (_package_resolve, "resolve a dependency map (@deps.json, --install)")},
    "soft": {"detect": (_soft_detect, "probe the host and register env entries")},
}

ALIASES = {"ren": "rename", "mv": "rename", "build": "compile", "delete": "rm", "remove": "rm"}


class Kernel:
    """Action dispatcher bound to one registry."""

    def __init__(self, registry: Registry):
        self.registry = registry

    @classmethod
    def open(cls, config_dir: str | Path | None = None) -> "Kernel":
        path = Path(os.path.expanduser(str(config_dir))) if config_dir else default_config_dir()
        return cls(init_registry(path))

    def known_module(self, module: str) -> bool:
        if module in MODULE_ACTIONS or module == "module":
            return True
        try:
            self.registry.load(ComponentRef("module", module))
            return True
        except CKError as exc:
            if exc.code == NOT_FOUND:
                return False
            raise

    def _module_help(self, module: str) -> dict:
        try:
            meta = self.registry.load(ComponentRef("module", module)).meta
        except CKError:
            return {}
        actions = meta.get("actions")
        return actions if isinstance(actions, dict) else {}

    def list_actions(self, module: str) -> list[tuple[str, str]]:
        if not isinstance(module, str) or not self.known_module(module):
            raise CKError(UNKNOWN, f"module not found: {module!r}")
        overrides = self._module_help(module)
        table = {**GENERIC_ACTIONS, **MODULE_ACTIONS.get(module, {})}
        return sorted((name, str(overrides.get(name) or help_)) for name, (_, help_) in table.items())

    def handler(self, module: str, action: str) -> Handler:
        if not self.known_module(module):
            raise CKError(UNKNOWN, f"module not found: {module!r}")
        action = ALIASES.get(action, action)
        specific = MODULE_ACTIONS.get(module, {})
        if action in specific:
            return specific[action][0]
        if action in GENERIC_ACTIONS:
            return GENERIC_ACTIONS[action][0]
        raise CKError(UNKNOWN, f"action not implemented: {action!r} for module {module!r}")

    def access(self, request: dict) -> dict:
        """Run one action; always returns ``{"return": code, ["error": msg], ...payload}``."""
        try:
            req = Request(request)
            handler = self.handler(req.ref.module, req.action)
            if to_bool(req.params.get("help", False)) and req.action != "help":
                name = ALIASES.get(req.action, req.action)
                helps = dict(self.list_actions(req.ref.module))
                return {"return": 0, "module": req.ref.module, "action": name, "help": helps.get(name, "")}
            payload = handler(self, req)
            return {"return": 0, **_jsonable(payload or {})}
        except CKError as exc:
            out = {}
            try:
                out = _jsonable(exc.payload)
            except Exception:  # noqa: BLE001 - payload is best effort
                out = {}
            out.pop("return", None)
            out.update({"return": exc.code, "error": exc.message or "error"})
            return out
        except RecursionError as exc:
            return {"return": GENERIC, "error": f"internal error: recursion limit: {exc}"}
        except Exception as exc:  # noqa: BLE001 - the envelope must never be escaped
            log.debug("unexpected failure in access", exc_info=True)
            return {"return": GENERIC, "error": f"internal error: {type(exc).__name__}: {exc}"}


def _jsonable(payload: Any) -> dict:
    doc = json.loads(json.dumps(payload, default=str, allow_nan=False))
    if not isinstance(doc, dict):
        return {"result": doc}
    doc.pop("return", None)
    doc.pop("error", None)
    return doc


def access(request: dict, config_dir: str | Path | None = None) -> dict:
    """One-shot convenience wrapper around :meth:`Kernel.access`."""
    try:
        kernel = Kernel.open(config_dir)
    except CKError as exc:
        return {"return": exc.code, "error": exc.message}
    return kernel.access(request)
