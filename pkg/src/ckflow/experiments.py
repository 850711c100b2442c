"""Experiment records: append-only points, replay, Pareto frontiers and static reports.

A record is the component ``experiment:<name>`` in the ``local`` repo; each
point is one file ``points/<point_uid>.json`` in its payload.
"""

from __future__ import annotations

import html
import itertools
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import jsonio
from .errors import EXECUTION, GENERIC, IO, NOT_FOUND, CKError
from .registry import ComponentRef, Registry, check_name

log = logging.getLogger(__name__)

POINTS_DIR = "points"
DEFAULT_REPLAY_TOLERANCE = 0.25


@dataclass
class ExperimentPoint:
    point_uid: str
    timestamp: str
    program_ref: str
    cmd_key: str
    choices: dict
    env_overrides: dict
    resolved_deps: list
    platform: dict
    characteristics: dict
    validated: bool | None = None
    program_uid: str = ""
    repetitions: int = 1
    failed: bool = False
    contended: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentPoint":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in known})

    def metric(self, name: str, source: str = "median"):
        value = self.characteristics.get(name)
        if isinstance(value, dict):
            value = value.get(source)
        return value

    def check(self) -> None:
        if not self.characteristics:
            raise CKError(GENERIC, "experiment point has no characteristics")
        keys = [d[0] for d in self.resolved_deps]
        if len(keys) != len(set(keys)):
            raise CKError(GENERIC, "experiment point has duplicate resolved dependency keys")


def record_point(registry: Registry, record_name: str, point: ExperimentPoint) -> str:
    """Append ``point`` to ``experiment:<record_name>`` in ``local``; existing points are never touched."""
    check_name(record_name, "record name")
    point.check()
    ref = ComponentRef("experiment", record_name, "local")
    local = registry.repo("local")
    with registry.write_lock(local):
        try:
            comp = registry.load(ref)
        except CKError as exc:
            if exc.code != NOT_FOUND:
                raise
            comp = registry.add(ref, {"metrics": [], "point_count": 0, "tags": "experiment"})
        path = comp.payload_dir / POINTS_DIR / f"{point.point_uid}.json"
        if path.exists():
            raise CKError(GENERIC, f"point {point.point_uid} already recorded in {record_name}")
        try:
            jsonio.write_json(path, point.to_dict())
        except OSError as exc:
            raise CKError(IO, f"cannot write experiment point {path}: {exc}") from exc
        meta = dict(comp.meta)
        meta["point_count"] = int(meta.get("point_count", 0)) + 1
        meta["metrics"] = sorted(set(meta.get("metrics", [])) | set(point.characteristics))
        registry.update(comp.ref, meta=meta)
    return point.point_uid


def load_points(registry: Registry, record_name: str) -> list[ExperimentPoint]:
    """All points of a record, oldest first."""
    comp = registry.load(ComponentRef("experiment", record_name))
    pdir = comp.payload_dir / POINTS_DIR
    points = []
    for path in sorted(pdir.glob("*.json")) if pdir.is_dir() else []:
        try:
            points.append(ExperimentPoint.from_dict(jsonio.read_json(path)))
        except (OSError, ValueError, TypeError) as exc:
            raise CKError(IO, f"unreadable experiment point {path}: {exc}") from exc
    return sorted(points, key=lambda p: (p.timestamp, p.point_uid))


# -- Pareto frontier ----------------------------------------------------------

_DIRECTIONS = {"min": "minimize", "minimize": "minimize", "max": "maximize", "maximize": "maximize"}


@dataclass
class FrontierQuery:
    metrics: list[tuple[str, str]]
    source: str = "median"
    filter: object = field(default=None, repr=False)

    def __post_init__(self):
        if not self.metrics:
            raise CKError(GENERIC, "frontier query needs at least one metric")
        normalized = []
        for item in self.metrics:
            try:
                name, direction = item
            except (TypeError, ValueError) as exc:
                raise CKError(GENERIC, f"frontier metric must be (name, direction), got {item!r}") from exc
            if direction not in _DIRECTIONS:
                raise CKError(GENERIC, f"unknown direction {direction!r} for metric {name!r}")
            normalized.append((str(name), _DIRECTIONS[direction]))
        self.metrics = normalized
        if self.source not in ("min", "median", "max"):
            raise CKError(GENERIC, f"unknown metric source {self.source!r}")

    @classmethod
    def parse(cls, spec) -> "FrontierQuery":
        """From ``"lat:min,acc:max"``, a list of pairs, ``{"lat": "min"}``,
        or ``{"metrics": [...], "source": ...}``."""
        if isinstance(spec, FrontierQuery):
            return spec
        source = "median"
        if isinstance(spec, dict):
            source = spec.get("source", "median")
            if "metrics" in spec:
                spec = spec["metrics"]
            else:
                spec = [(k, v) for k, v in spec.items() if k != "source"]
        if isinstance(spec, str):
            items = []
            for part in filter(None, (p.strip() for p in spec.split(","))):
                name, _, direction = part.partition(":")
                items.append((name, direction or "min"))
            spec = items
        if not isinstance(spec, list):
            raise CKError(GENERIC, f"cannot interpret frontier query {spec!r}")
        items = []
        for m in spec:
            if isinstance(m, dict):
                items.append((m.get("name"), m.get("direction", "minimize")))
            else:
                items.append(tuple(m) if isinstance(m, (list, tuple)) else (m, "min"))
        return cls(metrics=items, source=source)

    def to_dict(self) -> dict:
        return {"metrics": [{"name": n, "direction": d} for n, d in self.metrics], "source": self.source}


def _value(point: ExperimentPoint, name: str, source: str):
    v = point.metric(name, source)
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        return None
    return v


def split_eligible(points: list[ExperimentPoint], query: FrontierQuery) -> tuple[list[ExperimentPoint], int]:
    """Points carrying every query metric, and how many were dropped."""
    if points and query.metrics:
        for name, _ in query.metrics:
            if all(_value(p, name, query.source) is None for p in points):
                raise CKError(GENERIC, f"metric {name!r} is not present in any point")
    keep = []
    for p in points:
        if query.filter is not None and not query.filter(p):
            continue
        if all(_value(p, n, query.source) is not None for n, _ in query.metrics):
            keep.append(p)
    excluded = len(points) - len(keep)
    if query.filter is None and excluded:
        log.warning("%d point(s) lack a query metric and were excluded", excluded)
    return keep, excluded


def pareto_frontier(points: list[ExperimentPoint], query: FrontierQuery) -> list[ExperimentPoint]:
    """Non-dominated points under ``query``, best first by the first metric.

    Points are visited in lexicographic order of their (minimization-signed)
    metric vectors, so a dominator is always visited before anything it
    dominates; each point only needs checking against the frontier so far.
    Points with identical vectors never dominate each other and are all kept.
    """
    if not isinstance(query, FrontierQuery):
        query = FrontierQuery.parse(query)
    eligible, _ = split_eligible(points, query)
    if not eligible:
        return []
    signs = np.array([1.0 if d == "minimize" else -1.0 for _, d in query.metrics])
    values = np.array([[_value(p, n, query.source) for n, _ in query.metrics] for p in eligible], dtype=float)
    costs = values * signs
    order = np.lexsort(costs.T[::-1])

    front_rows: list[int] = []
    front = np.empty((0, costs.shape[1]))
    for i in order:
        x = costs[i]
        if front.shape[0]:
            dominated = np.all(front <= x, axis=1) & np.any(front < x, axis=1)
            if dominated.any():
                continue
        front_rows.append(int(i))
        front = np.vstack([front, x])
    return [eligible[i] for i in front_rows]


# -- replay -----------------------------------------------------------------

def _is_integral(char: dict | float) -> bool:
    if isinstance(char, dict):
        vals = [char.get(k) for k in ("min", "median", "max") if k in char]
    else:
        vals = [char]
    return bool(vals) and all(isinstance(v, int) and not isinstance(v, bool) for v in vals)


def compare_characteristics(original: dict, replayed: dict, tolerance_rel: float) -> list[dict]:
    rows = []
    for name in sorted(original):
        orig_c, new_c = original[name], replayed.get(name)
        orig = orig_c.get("median") if isinstance(orig_c, dict) else orig_c
        new = new_c.get("median") if isinstance(new_c, dict) else new_c
        exact = name == "exit_code" or _is_integral(orig_c)
        if new is None or orig is None:
            rows.append({"metric": name, "original": orig, "replayed": new, "relative_delta": None,
                         "within_tolerance": False, "exact": exact})
            continue
        if orig == 0:
            delta = 0.0 if new == 0 else None
        else:
            delta = (new - orig) / abs(orig)
        if exact:
            within = new == orig
        else:
            within = delta is not None and abs(delta) <= tolerance_rel
        rows.append({"metric": name, "original": orig, "replayed": new, "relative_delta": delta,
                     "within_tolerance": within, "exact": exact})
    return rows


def dependency_diff(original: list, fresh: list) -> list[dict]:
    before = {d[0]: list(d[2]) for d in original}
    after = {d[0]: list(d[2]) for d in fresh}
    diff = []
    for key in sorted(set(before) | set(after)):
        if before.get(key) != after.get(key):
            diff.append({"key": key, "original_version": before.get(key), "replayed_version": after.get(key)})
    return diff


def replay(registry: Registry, record_name: str, point_uid: str | None = None,
           tolerance_rel: float = DEFAULT_REPLAY_TOLERANCE) -> dict:
    """Re-run a recorded point from its stored configuration and compare.

    Dependencies are resolved afresh. ``report["consistent"]`` is true only
    when every metric is within tolerance and no dependency version moved.
    """
    from .pipeline import PipelineConfig, benchmark

    points = load_points(registry, record_name)
    if not points:
        raise CKError(NOT_FOUND, f"record {record_name!r} has no points")
    if point_uid:
        matches = [p for p in points if p.point_uid == point_uid]
        if not matches:
            raise CKError(NOT_FOUND, f"point {point_uid} not found in record {record_name!r}")
        point = matches[0]
    else:
        point = points[-1]

    program = ComponentRef.parse(point.program_ref)
    try:
        registry.load(program)
    except CKError as exc:
        if exc.code != NOT_FOUND or not point.program_uid:
            raise
        program = ComponentRef(program.module, point.program_uid)

    config = PipelineConfig(cmd_key=point.cmd_key, env_overrides=dict(point.env_overrides),
                            choices=dict(point.choices), repetitions=point.repetitions, rebuild=True)
    try:
        fresh = benchmark(registry, program, config)
    except CKError as exc:
        if exc.code == NOT_FOUND:
            raise
        raise CKError(EXECUTION, f"program no longer buildable: {exc.message}") from exc

    metrics = compare_characteristics(point.characteristics, fresh.characteristics, tolerance_rel)
    deps = dependency_diff(point.resolved_deps, fresh.resolved_deps)
    consistent = all(m["within_tolerance"] for m in metrics) and not deps
    return {"record": record_name, "point_uid": point.point_uid, "program_ref": point.program_ref,
            "tolerance_rel": tolerance_rel, "metrics": metrics, "dependency_diff": deps,
            "replayed_characteristics": fresh.characteristics, "consistent": consistent}


# -- reports ----------------------------------------------------------------

def summary_stats(points: list[ExperimentPoint], source: str = "median") -> dict:
    series: dict[str, list] = {}
    for p in points:
        for name in p.characteristics:
            v = _value(p, name, source)
            if v is not None:
                series.setdefault(name, []).append(v)
    return {name: {"count": len(vals), "min": min(vals), "max": max(vals),
                   "mean": statistics.fmean(vals), "median": statistics.median(vals)}
            for name, vals in sorted(series.items())}


def emit_report(registry: Registry, record_name: str, query: FrontierQuery | None = None,
                out_dir: str | Path = ".") -> dict:
    """Write ``report.json`` and a self-contained ``report.html``; failed points never reach the frontier."""
    points = load_points(registry, record_name)
    frontier: list[ExperimentPoint] = []
    excluded = 0
    if query is not None:
        query = FrontierQuery.parse(query)
        ok = [p for p in points if not p.failed]
        if ok:
            eligible, excluded = split_eligible(ok, query)
            frontier = pareto_frontier(eligible, query)
    doc = {"record": record_name, "query": query.to_dict() if query else None,
           "points": [p.to_dict() for p in points], "frontier": [p.point_uid for p in frontier],
           "excluded": excluded, "summary": summary_stats(points)}
    out = Path(out_dir)
    json_path, html_path = out / "report.json", out / "report.html"
    try:
        jsonio.write_json(json_path, doc)
        jsonio.atomic_write_text(html_path, render_html(record_name, points, frontier, query))
    except OSError as exc:
        raise CKError(IO, f"cannot write report into {out}: {exc}") from exc
    return {"json": str(json_path), "html": str(html_path)}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return html.escape(str(v))


def _scatter(points: list[ExperimentPoint], frontier_ids: set, xname: str, yname: str, source: str) -> str:
    pts = [(p, _value(p, xname, source), _value(p, yname, source)) for p in points]
    pts = [t for t in pts if t[1] is not None and t[2] is not None]
    w, h, pad = 420, 300, 45
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" role="img">',
             f'<rect x="0" y="0" width="{w}" height="{h}" fill="#fff" stroke="#ccc"/>']
    if pts:
        xs, ys = [t[1] for t in pts], [t[2] for t in pts]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        sx = (w - 2 * pad) / ((x1 - x0) or 1)
        sy = (h - 2 * pad) / ((y1 - y0) or 1)
        for p, x, y in pts:
            cx, cy = pad + (x - x0) * sx, h - pad - (y - y0) * sy
            on = p.point_uid in frontier_ids
            parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="{5 if on else 3}" '
                         f'fill="{"#d62728" if on else "#1f77b4"}"><title>{p.point_uid}</title></circle>')
        parts.append(f'<text x="{pad}" y="{h - 10}" font-size="11">{_fmt(x0)}</text>')
        parts.append(f'<text x="{w - pad}" y="{h - 10}" font-size="11" text-anchor="end">{_fmt(x1)}</text>')
        parts.append(f'<text x="5" y="{h - pad}" font-size="11">{_fmt(y0)}</text>')
        parts.append(f'<text x="5" y="{pad}" font-size="11">{_fmt(y1)}</text>')
    parts.append(f'<text x="{w / 2}" y="{h - 25}" font-size="12" text-anchor="middle">{html.escape(xname)}</text>')
    parts.append(f'<text x="{w / 2}" y="18" font-size="12" text-anchor="middle">{html.escape(yname)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def render_html(record_name: str, points: list[ExperimentPoint], frontier: list[ExperimentPoint],
                query: FrontierQuery | None) -> str:
    frontier_ids = {p.point_uid for p in frontier}
    metrics = sorted({m for p in points for m in p.characteristics})
    choice_names = sorted({c for p in points for c in p.choices})
    source = query.source if query else "median"
    head = "".join(f"<th>{html.escape(c)}</th>" for c in ["point", "timestamp"] + choice_names + metrics)
    rows = []
    for p in points:
        cls = ' class="frontier"' if p.point_uid in frontier_ids else (' class="failed"' if p.failed else "")
        cells = [p.point_uid, p.timestamp] + [p.choices.get(c, "") for c in choice_names]
        cells += [_value(p, m, source) if _value(p, m, source) is not None else "" for m in metrics]
        rows.append(f"<tr{cls}>" + "".join(f"<td>{_fmt(c)}</td>" for c in cells) + "</tr>")
    plots = []
    if query is not None:
        for (xn, _), (yn, _) in itertools.combinations(query.metrics, 2):
            plots.append(_scatter(points, frontier_ids, xn, yn, source))
    qdesc = ", ".join(f"{n} ({d})" for n, d in query.metrics) if query else "none"
    # the SVG namespace attribute is an identifier, not a fetched resource
    body = "\n".join(plots).replace('xmlns="http://www.w3.org/2000/svg" ', "")
    return f"""<!DOCTYPE html>
<html lang="en"><head><meta charset="utf-8">
<title>Experiment report: {html.escape(record_name)}</title>
<style>
body {{ font-family: sans-serif; margin: 1.5em; }}
table {{ border-collapse: collapse; font-size: 13px; }}
td, th {{ border: 1px solid #ccc; padding: 3px 6px; text-align: right; }}
tr.frontier td {{ background: #fde2e2; font-weight: bold; }}
tr.failed td {{ color: #999; }}
svg {{ margin: 8px; }}
</style></head>
<body>
<h1>Experiment report: {html.escape(record_name)}</h1>
<p>{len(points)} point(s); frontier query: {html.escape(qdesc)}; {len(frontier)} on the frontier (highlighted).</p>
<table><thead><tr>{head}</tr></thead>
<tbody>
{chr(10).join(rows)}
</tbody></table>
<div>{body}</div>
</body></html>
"""
