"""Design-space exploration over a program's exposed choices.

A tuning spec (JSON or YAML)::

    {"program": "program:tune-quadratic", "cmd_key": null,
     "space": {"x": {"from": 0, "to": 5, "step": 1}, "flags": ["-O1", "-O2"]},
     "strategy": "exhaustive",            # or {"random": {"n": 5, "seed": 42}}
     "repetitions": 1, "record_name": "tune-quadratic",
     "objective": [["cost", "min"]]}
"""

from __future__ import annotations

import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import GENERIC, CKError
from .experiments import ExperimentPoint, FrontierQuery, load_points, pareto_frontier, record_point, split_eligible
from .pipeline import PipelineConfig, ProgramMeta, benchmark, build, domain_size, expand_domain, platform_descriptor
from .registry import ComponentRef, Registry, check_name, new_uid, utc_now

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 100_000


def _check_space(space: dict) -> list[str]:
    if not isinstance(space, dict) or not space:
        raise CKError(GENERIC, "design space must be a non-empty mapping of choice -> domain")
    names = sorted(space)
    for name in names:
        if domain_size(space[name]) == 0:
            raise CKError(GENERIC, f"empty domain for choice {name!r}")
    return names


def space_size(space: dict) -> int:
    return math.prod(domain_size(space[n]) for n in _check_space(space))


def enumerate_space(space: dict) -> list[dict]:
    """Cartesian product over choice names in sorted order; the last name varies fastest."""
    names = _check_space(space)
    combos = [{}]
    for name in names:
        combos = [{**c, name: v} for c in combos for v in expand_domain(space[name])]
    return combos


def assignment_at(space: dict, index: int) -> dict:
    """The ``index``-th assignment of :func:`enumerate_space` without materializing the product."""
    names = _check_space(space)
    sizes = [domain_size(space[n]) for n in names]
    out = {}
    for name, size in reversed(list(zip(names, sizes))):
        index, digit = divmod(index, size)
        domain = space[name]
        if isinstance(domain, dict):
            out[name] = int(domain["from"]) + digit * int(domain.get("step", 1))
        else:
            out[name] = domain[digit]
    return {n: out[n] for n in names}


def sample_space(space: dict, n: int, seed: int) -> list[dict]:
    """``n`` seeded uniform draws: without replacement when ``n`` fits in the space."""
    size = space_size(space)
    rng = random.Random(seed)
    if n <= size:
        indices = rng.sample(range(size), n)
    else:
        indices = [rng.randrange(size) for _ in range(n)]
    return [assignment_at(space, i) for i in indices]


@dataclass
class TuningSpec:
    program_ref: str
    space: dict
    record_name: str
    objective: FrontierQuery
    cmd_key: str | None = None
    strategy: str = "exhaustive"
    n: int | None = None
    seed: int | None = None
    repetitions: int = 1
    parallel: int = 1

    def __post_init__(self):
        check_name(self.record_name, "record name")
        size = space_size(self.space)
        if self.strategy == "exhaustive":
            if size > MAX_EXHAUSTIVE:
                raise CKError(GENERIC, f"exhaustive search limited to {MAX_EXHAUSTIVE} points, space has {size}")
        elif self.strategy == "random":
            if self.n is None or int(self.n) < 1:
                raise CKError(GENERIC, "random strategy needs n >= 1")
            if self.seed is None:
                raise CKError(GENERIC, "random strategy needs an explicit seed")
            self.n, self.seed = int(self.n), int(self.seed)
        else:
            raise CKError(GENERIC, f"unknown strategy {self.strategy!r}")
        if int(self.repetitions) < 1 or int(self.parallel) < 1:
            raise CKError(GENERIC, "repetitions and parallel must be positive")
        self.repetitions, self.parallel = int(self.repetitions), int(self.parallel)

    @classmethod
    def from_dict(cls, doc: dict) -> "TuningSpec":
        if not isinstance(doc, dict):
            raise CKError(GENERIC, "tuning spec must be a mapping")
        strategy = doc.get("strategy", "exhaustive")
        n = seed = None
        if isinstance(strategy, dict):
            if "random" in strategy:
                params = strategy["random"] or {}
                strategy = "random"
            else:
                params = strategy
                strategy = strategy.get("name", "exhaustive")
            n, seed = params.get("n"), params.get("seed")
        program = doc.get("program") or doc.get("program_ref")
        if not program:
            raise CKError(GENERIC, "tuning spec needs a program reference")
        if "objective" not in doc:
            raise CKError(GENERIC, "tuning spec needs an objective")
        try:
            return cls(program_ref=str(program), space=doc.get("space") or {},
                       record_name=doc.get("record_name") or doc.get("record_uoa") or "",
                       objective=FrontierQuery.parse(doc["objective"]), cmd_key=doc.get("cmd_key"),
                       strategy=strategy, n=n, seed=seed, repetitions=doc.get("repetitions", 1),
                       parallel=doc.get("parallel", 1))
        except (TypeError, ValueError) as exc:
            raise CKError(GENERIC, f"invalid tuning spec: {exc}") from exc

    def assignments(self) -> list[dict]:
        if self.strategy == "exhaustive":
            return enumerate_space(self.space)
        return sample_space(self.space, self.n, self.seed)


def _failure_point(spec: TuningSpec, program_ref: str, choices: dict, exc: CKError) -> ExperimentPoint:
    code = {"min": exc.code, "median": exc.code, "max": exc.code}
    return ExperimentPoint(point_uid=new_uid(), timestamp=utc_now(), program_ref=program_ref,
                           cmd_key=spec.cmd_key or "", choices=choices, env_overrides={}, resolved_deps=[],
                           platform=platform_descriptor(), characteristics={"exit_code": code},
                           repetitions=spec.repetitions, failed=True, error=exc.message)


def tune(registry: Registry, spec: TuningSpec | dict) -> dict:
    """Benchmark every selected assignment, record all of them, and report the frontier."""
    if isinstance(spec, dict):
        spec = TuningSpec.from_dict(spec)
    comp = registry.load(ComponentRef.parse(spec.program_ref))
    pm = ProgramMeta.from_meta(comp.meta)
    unknown = set(spec.space) - set(pm.exposed_choices)
    if unknown:
        raise CKError(GENERIC, f"space names choices the program does not expose: {sorted(unknown)}")

    # fail fast: no point is worth recording if the program cannot build at all
    build(registry, comp.ref)

    assignments = spec.assignments()

    def evaluate(choices: dict) -> ExperimentPoint:
        config = PipelineConfig(cmd_key=spec.cmd_key, choices=choices, repetitions=spec.repetitions)
        try:
            point = benchmark(registry, comp.ref, config)
        except CKError as exc:
            log.warning("configuration %s failed: %s", choices, exc)
            point = _failure_point(spec, str(comp.ref), choices, exc)
        if point.failed and point.error is None:
            point.error = f"exit code {point.metric('exit_code')}"
        if workers > 1:
            point.contended = True
        return point

    # points share one build dir, so only build-free programs run concurrently
    workers = spec.parallel if pm.build_free else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(evaluate, assignments))
    else:
        points = [evaluate(a) for a in assignments]
    for point in points:
        record_point(registry, spec.record_name, point)

    recorded = load_points(registry, spec.record_name)
    ok = [p for p in recorded if not p.failed]
    frontier = pareto_frontier(ok, spec.objective) if ok else []
    best = {}
    if ok:
        eligible, _ = split_eligible(ok, spec.objective)
        for name, direction in spec.objective.metrics:
            pick = (min if direction == "minimize" else max)(
                eligible, key=lambda p: p.metric(name, spec.objective.source))
            best[name] = {"point_uid": pick.point_uid, "choices": pick.choices, "direction": direction,
                          "value": pick.metric(name, spec.objective.source)}
    return {
        "record": spec.record_name,
        "strategy": spec.strategy,
        "evaluated": [p.choices for p in points],
        "point_uids": [p.point_uid for p in points],
        "successes": sum(not p.failed for p in points),
        "failures": [{"point_uid": p.point_uid, "choices": p.choices, "error": p.error,
                      "exit_code": p.metric("exit_code")} for p in points if p.failed],
        "frontier": [p.to_dict() for p in frontier],
        "best": best,
    }
