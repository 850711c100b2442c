"""Build, run and benchmark ``program`` components.

Program meta::

    {"deps": {...dependency map...},
     "build_cmds": ["cc -O{choice.opt_level} {src_dir}/main.c -o {bin_dir}/main"],
     "run_cmds": {"default": {"cmd": "{bin_dir}/main", "expected_output_file": "out.txt",
                              "validation": {"reference_file": "ref.txt", "comparison": "numeric",
                                             "tolerance": 1e-5}}},
     "default_cmd_key": "default",
     "exposed_choices": {"opt_level": {"domain": [0, 1, 2, 3], "default": 0}}}

Commands run through the host shell with the run (or build) directory as
cwd, stdin closed and a scrubbed environment. A program may report extra
metrics by writing a flat JSON object to ``tmp-ck-output.json``.
"""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
import os
import platform
import re
import shutil
import socket
import statistics
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from filelock import FileLock

from . import jsonio, templates
from .errors import EXECUTION, GENERIC, UNKNOWN, CKError
from .experiments import ExperimentPoint, record_point
from .packages import ResolvedDeps, resolve
from .registry import Component, ComponentRef, Registry, new_uid, utc_now

log = logging.getLogger(__name__)

METRICS_FILE = "tmp-ck-output.json"
BUILD_RECORD = "build-record.json"
DEFAULT_TOLERANCE = 1e-5
BASE_ENV_KEYS = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "SYSTEMROOT")
MAX_RANGE = 1_000_000


def expand_domain(domain) -> list:
    """A choice domain as an explicit list: either the list itself or a ``{from, to, step}`` range."""
    if isinstance(domain, list):
        return list(domain)
    if isinstance(domain, dict):
        try:
            lo, hi, step = int(domain["from"]), int(domain["to"]), int(domain.get("step", 1))
        except (KeyError, TypeError, ValueError) as exc:
            raise CKError(GENERIC, f"range domain needs integer from/to/step: {domain!r}") from exc
        if step <= 0:
            raise CKError(GENERIC, f"range step must be positive: {domain!r}")
        if hi >= lo and (hi - lo) // step + 1 > MAX_RANGE:
            raise CKError(GENERIC, f"range domain too large: {domain!r}")
        return list(range(lo, hi + 1, step))
    raise CKError(GENERIC, f"choice domain must be a list or a range mapping, got {domain!r}")


def domain_size(domain) -> int:
    if isinstance(domain, dict):
        try:
            lo, hi, step = int(domain["from"]), int(domain["to"]), int(domain.get("step", 1))
        except (KeyError, TypeError, ValueError) as exc:
            raise CKError(GENERIC, f"range domain needs integer from/to/step: {domain!r}") from exc
        if step <= 0:
            raise CKError(GENERIC, f"range step must be positive: {domain!r}")
        return max(0, (hi - lo) // step + 1)
    return len(expand_domain(domain))


_ALLOWED_PLACEHOLDER = re.compile(r"^(bin_dir|src_dir|tmp_dir|env\..+|choice\..+)$")


@dataclass
class ProgramMeta:
    deps: dict
    build_cmds: list[str]
    run_cmds: dict[str, dict]
    default_cmd_key: str
    exposed_choices: dict[str, dict]
    build_free: bool = False

    @classmethod
    def from_meta(cls, meta: dict) -> "ProgramMeta":
        if not isinstance(meta, dict):
            raise CKError(GENERIC, "program meta must be a mapping")
        run_cmds = meta.get("run_cmds") or {}
        if not isinstance(run_cmds, dict) or not run_cmds:
            raise CKError(GENERIC, "program meta needs a non-empty run_cmds mapping")
        run_cmds = dict(run_cmds)
        for key, rc in run_cmds.items():
            if isinstance(rc, str):
                run_cmds[key] = {"cmd": rc}
            elif not isinstance(rc, dict) or not isinstance(rc.get("cmd"), str):
                raise CKError(GENERIC, f"run_cmds.{key} needs a 'cmd' string")
        default_key = meta.get("default_cmd_key") or (next(iter(run_cmds)) if len(run_cmds) == 1 else None)
        if default_key not in run_cmds:
            raise CKError(GENERIC, f"default_cmd_key {default_key!r} is not one of run_cmds")
        build_cmds = meta.get("build_cmds") or []
        if not isinstance(build_cmds, list) or not all(isinstance(c, str) for c in build_cmds):
            raise CKError(GENERIC, "build_cmds must be a list of strings")
        choices = meta.get("exposed_choices") or {}
        if not isinstance(choices, dict):
            raise CKError(GENERIC, "exposed_choices must be a mapping")
        for name, spec in choices.items():
            if not isinstance(spec, dict) or "domain" not in spec:
                raise CKError(GENERIC, f"exposed choice {name!r} needs a domain")
            values = expand_domain(spec["domain"])
            if not values:
                raise CKError(GENERIC, f"exposed choice {name!r} has an empty domain")
            if "default" in spec and spec["default"] not in values:
                raise CKError(GENERIC, f"default of choice {name!r} is outside its domain")
        for tmpl in build_cmds + [rc["cmd"] for rc in run_cmds.values()]:
            for name in templates.placeholders(tmpl):
                if not _ALLOWED_PLACEHOLDER.match(name):
                    raise CKError(GENERIC, f"placeholder {{{name}}} not allowed in {tmpl!r}")
        deps = meta.get("deps") or {}
        if not isinstance(deps, dict):
            raise CKError(GENERIC, "deps must be a mapping")
        return cls(deps=deps, build_cmds=build_cmds, run_cmds=run_cmds, default_cmd_key=default_key,
                   exposed_choices=choices, build_free=bool(meta.get("build_free", not build_cmds)))

    def default_choices(self) -> dict:
        return {name: spec.get("default", expand_domain(spec["domain"])[0])
                for name, spec in self.exposed_choices.items()}

    def fill_choices(self, choices: dict | None) -> dict:
        """Defaults overlaid with ``choices``; CLI strings are coerced to domain values."""
        out = self.default_choices()
        for name, value in (choices or {}).items():
            if name not in self.exposed_choices:
                raise CKError(GENERIC, f"unknown choice {name!r}; exposed: {sorted(self.exposed_choices)}")
            out[name] = _coerce_choice(value, expand_domain(self.exposed_choices[name]["domain"]))
        return out


def _coerce_choice(value, domain: list):
    if value in domain:
        return value
    for candidate in domain:
        if str(candidate) == str(value):
            return candidate
    if isinstance(value, str) and domain and all(isinstance(v, int) and not isinstance(v, bool) for v in domain):
        try:
            return int(value)
        except ValueError:
            pass
    return value


def compose_env(merged_env: dict, overrides: dict | None) -> dict[str, str]:
    """Scrubbed base environment, then resolved dependency env, then user overrides."""
    env = {k: os.environ[k] for k in BASE_ENV_KEYS if k in os.environ}
    env.setdefault("PATH", os.defpath)
    env.update({str(k): str(v) for k, v in merged_env.items()})
    env.update({str(k): _env_str(v) for k, v in (overrides or {}).items()})
    return env


def _env_str(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (dict, list)):
        raise CKError(GENERIC, f"environment override values must be scalars, got {value!r}")
    return str(value)


def _template_values(bin_dir: Path, src_dir: Path, tmp_dir: Path, env: dict, choices: dict) -> dict:
    values = {"bin_dir": str(bin_dir), "src_dir": str(src_dir), "tmp_dir": str(tmp_dir)}
    values.update(templates.flatten_namespace("env", env))
    values.update(templates.flatten_namespace("choice", choices))
    return values


def platform_descriptor() -> dict:
    cpu = platform.processor() or ""
    try:
        with open("/proc/cpuinfo", encoding="utf-8") as fh:
            for line in fh:
                if line.lower().startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return {"os": platform.system().lower(), "os_release": platform.release(),
            "arch": platform.machine().lower(), "cpu_model": cpu,
            "logical_cores": os.cpu_count() or 0,
            "hostname_hash": hashlib.sha256(socket.gethostname().encode()).hexdigest()[:16]}


def _build_lock(work: Path) -> FileLock:
    work.mkdir(parents=True, exist_ok=True)
    return FileLock(str(work / ".build.lock"))


def build(registry: Registry, program: ComponentRef | str, speed: bool = False,
          env_overrides: dict | None = None, choices: dict | None = None) -> dict:
    """Resolve dependencies and run ``build_cmds`` in a fresh build dir; return the build record."""
    comp = registry.load(program)
    pm = ProgramMeta.from_meta(comp.meta)
    choices = pm.fill_choices(choices)
    if speed and "opt_level" in pm.exposed_choices:
        choices["opt_level"] = max(expand_domain(pm.exposed_choices["opt_level"]["domain"]))

    resolved = resolve(pm.deps, registry, allow_install=True)
    env = compose_env(resolved.merged_env, env_overrides)

    work = registry.work_dir(comp)
    with _build_lock(work):
        build_dir = work / "build"
        if build_dir.exists():
            shutil.rmtree(build_dir)
        build_dir.mkdir(parents=True)
        values = _template_values(build_dir, comp.payload_dir, build_dir, env, choices)
        transcript_path = work / "build-transcript.txt"
        transcript, commands = [], []
        failure = None
        for tmpl in pm.build_cmds:
            cmd = templates.expand(tmpl, values)
            proc = subprocess.run(cmd, shell=True, cwd=build_dir, env=env, stdin=subprocess.DEVNULL,
                                  stdout=subprocess.PIPE, stderr=subprocess.STDOUT, check=False)
            output = proc.stdout.decode("utf-8", errors="replace")
            transcript.append(f"$ {cmd}\n{output}[exit {proc.returncode}]\n")
            commands.append({"cmd": cmd, "exit_code": proc.returncode})
            if proc.returncode != 0:
                failure = (cmd, proc.returncode)
                break
        transcript_path.write_text("".join(transcript), encoding="utf-8")
        if failure:
            raise CKError(EXECUTION, f"build command failed with exit {failure[1]}: {failure[0]} "
                                     f"(transcript: {transcript_path})", transcript=str(transcript_path))

        record = {"program": str(comp.ref), "program_uid": comp.uid, "timestamp": utc_now(),
                  "speed": bool(speed), "choices": choices, "env_overrides": dict(env_overrides or {}),
                  "resolved": resolved.to_dict(), "env": env, "commands": commands,
                  "build_dir": str(build_dir), "transcript": str(transcript_path)}
        jsonio.write_json(work / BUILD_RECORD, record)
    return record


def load_build_record(registry: Registry, comp: Component) -> dict | None:
    path = registry.work_dir(comp) / BUILD_RECORD
    try:
        return jsonio.read_json(path)
    except FileNotFoundError:
        return None
    except (OSError, ValueError) as exc:
        log.warning("ignoring unreadable build record %s: %s", path, exc)
        return None


@dataclass
class RunResult:
    exit_code: int
    wall_time_s: float
    characteristics: dict[str, float]
    stdout_path: str
    stderr_path: str
    validated: bool | None = None
    contended: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class _Activity:
    """Tracks overlapping runs so timings taken under contention can be flagged."""

    def __init__(self):
        self._lock = threading.Lock()
        self._active: dict[int, list[bool]] = {}
        self._ids = itertools.count()

    def start(self) -> tuple[int, list[bool]]:
        with self._lock:
            token, flag = next(self._ids), [bool(self._active)]
            for other in self._active.values():
                other[0] = True
            self._active[token] = flag
            return token, flag

    def stop(self, token: int) -> None:
        with self._lock:
            self._active.pop(token, None)


_activity = _Activity()


def harvest_metrics(path: Path) -> dict[str, float]:
    """Numeric top-level values of a metrics file; anything else is ignored."""
    try:
        doc = jsonio.read_json(path)
    except FileNotFoundError:
        return {}
    except (OSError, ValueError) as exc:
        log.warning("unreadable metrics file %s: %s", path, exc)
        return {}
    if not isinstance(doc, dict):
        return {}
    return {k: v for k, v in doc.items()
            if isinstance(k, str) and k and isinstance(v, (int, float)) and not isinstance(v, bool)
            and math.isfinite(v)}


def _numeric(token: str) -> float | None:
    try:
        return float(token)
    except ValueError:
        return None


def compare_outputs(produced: str, reference: str, comparison: str = "exact",
                    tolerance: float = DEFAULT_TOLERANCE) -> bool:
    """Exact text equality, or token-wise numeric comparison within a relative tolerance."""
    if comparison == "exact":
        return produced == reference
    if comparison != "numeric":
        raise CKError(GENERIC, f"unknown comparison {comparison!r}")
    got, ref = produced.split(), reference.split()
    if len(got) != len(ref):
        return False
    for g, r in zip(got, ref):
        gv, rv = _numeric(g), _numeric(r)
        if gv is None or rv is None:
            if g != r:
                return False
        elif abs(gv - rv) > tolerance * abs(rv):
            return False
    return True


def _validate(run_dir: Path, src_dir: Path, rc: dict) -> bool | None:
    validation = rc.get("validation")
    if not validation:
        return None
    expected = run_dir / rc.get("expected_output_file", "")
    reference = src_dir / validation.get("reference_file", "")
    if not rc.get("expected_output_file") or not expected.is_file():
        return False
    try:
        produced_text = expected.read_text(encoding="utf-8", errors="replace")
        reference_text = reference.read_text(encoding="utf-8", errors="replace")
    except OSError:
        return False
    comparison = validation.get("comparison", "exact")
    tolerance = float(validation.get("tolerance", DEFAULT_TOLERANCE))
    if isinstance(comparison, dict):
        tolerance = float(comparison.get("numeric", tolerance))
        comparison = "numeric"
    return compare_outputs(produced_text, reference_text, comparison, tolerance)


def run(registry: Registry, program: ComponentRef | str, cmd_key: str | None = None,
        env_overrides: dict | None = None, choices: dict | None = None, repetitions: int = 1,
        timeout: float | None = None) -> list[RunResult]:
    """Execute a run command ``repetitions`` times, each in a fresh directory.

    Non-zero exits are recorded in the results rather than raised.
    """
    comp = registry.load(program)
    pm = ProgramMeta.from_meta(comp.meta)
    key = cmd_key or pm.default_cmd_key
    if key not in pm.run_cmds:
        raise CKError(UNKNOWN, f"unknown cmd_key {key!r}; available: {', '.join(sorted(pm.run_cmds))}")
    repetitions = int(repetitions)
    if repetitions < 1:
        raise CKError(GENERIC, "repetitions must be a positive integer")

    record = load_build_record(registry, comp)
    if record is not None:
        merged_env = record["resolved"]["merged_env"]
        bin_dir = Path(record["build_dir"])
    elif pm.build_free:
        merged_env = resolve(pm.deps, registry, allow_install=True).merged_env
        bin_dir = comp.payload_dir
    else:
        raise CKError(EXECUTION, f"{comp.ref} has not been built; compile it first")

    filled = pm.fill_choices(choices)
    env = compose_env(merged_env, env_overrides)
    rc = pm.run_cmds[key]
    work = registry.work_dir(comp)
    results = []
    for rep in range(repetitions):
        run_dir = work / f"run-{time.strftime('%Y%m%d-%H%M%S')}-{rep}-{new_uid()[:8]}"
        run_dir.mkdir(parents=True)
        cmd = templates.expand(rc["cmd"], _template_values(bin_dir, comp.payload_dir, run_dir, env, filled))
        out_path, err_path = run_dir / "stdout.txt", run_dir / "stderr.txt"
        token, contended = _activity.start()
        try:
            with open(out_path, "wb") as out, open(err_path, "wb") as err:
                start = time.perf_counter()
                try:
                    proc = subprocess.run(cmd, shell=True, cwd=run_dir, env=env, stdin=subprocess.DEVNULL,
                                          stdout=out, stderr=err, timeout=timeout, check=False)
                    exit_code = proc.returncode
                except subprocess.TimeoutExpired:
                    exit_code = 124
                wall = time.perf_counter() - start
        finally:
            _activity.stop(token)
        characteristics = harvest_metrics(run_dir / METRICS_FILE)
        characteristics.update({"wall_time_s": wall, "exit_code": exit_code})
        results.append(RunResult(exit_code=exit_code, wall_time_s=wall, characteristics=characteristics,
                                 stdout_path=str(out_path), stderr_path=str(err_path),
                                 validated=_validate(run_dir, comp.payload_dir, rc), contended=contended[0]))
    return results


def aggregate(results: list[RunResult]) -> dict[str, dict]:
    """Per-metric min/median/max across repetitions."""
    series: dict[str, list] = {}
    for r in results:
        for name, value in r.characteristics.items():
            series.setdefault(name, []).append(value)
    return {name: {"min": min(vals), "median": statistics.median(vals), "max": max(vals)}
            for name, vals in sorted(series.items())}


@dataclass
class PipelineConfig:
    cmd_key: str | None = None
    env_overrides: dict = field(default_factory=dict)
    choices: dict = field(default_factory=dict)
    repetitions: int = 1
    record: bool = False
    record_uoa: str | None = None
    speed: bool = False
    rebuild: bool = False


def _needs_build(record: dict | None, pm: ProgramMeta, choices: dict, overrides: dict, speed: bool) -> bool:
    if record is None:
        return True
    if not pm.build_cmds:
        return False
    return (record.get("choices") != choices or record.get("env_overrides") != overrides
            or bool(record.get("speed")) != bool(speed))


def benchmark(registry: Registry, program: ComponentRef | str,
              config: PipelineConfig | None = None) -> ExperimentPoint:
    """Build if needed, run, aggregate, and optionally record the resulting point."""
    config = config or PipelineConfig()
    comp = registry.load(program)
    pm = ProgramMeta.from_meta(comp.meta)
    choices = pm.fill_choices(config.choices)
    if config.speed and "opt_level" in pm.exposed_choices:
        choices["opt_level"] = max(expand_domain(pm.exposed_choices["opt_level"]["domain"]))
    overrides = dict(config.env_overrides or {})

    record = load_build_record(registry, comp)
    if config.rebuild or _needs_build(record, pm, choices, overrides, config.speed):
        record = build(registry, comp.ref, speed=config.speed, env_overrides=overrides, choices=choices)
    resolved = ResolvedDeps.from_dict(record["resolved"])

    results = run(registry, comp.ref, cmd_key=config.cmd_key, env_overrides=overrides,
                  choices=choices, repetitions=config.repetitions)
    validations = [r.validated for r in results if r.validated is not None]
    point = ExperimentPoint(
        point_uid=new_uid(), timestamp=utc_now(), program_ref=str(comp.ref), program_uid=comp.uid,
        cmd_key=config.cmd_key or pm.default_cmd_key, choices=choices, env_overrides=overrides,
        resolved_deps=[[k, u, list(v)] for k, u, v in resolved.entries], platform=platform_descriptor(),
        characteristics=aggregate(results), validated=all(validations) if validations else None,
        repetitions=config.repetitions, failed=all(r.exit_code != 0 for r in results),
        contended=any(r.contended for r in results))
    if config.record:
        record_point(registry, config.record_uoa or comp.data_name, point)
    return point
