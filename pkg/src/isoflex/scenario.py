"""Scenario files: INI-style key/value sections describing a run.

A scenario fixes the chart, the target metric, the initial map, the target
Hoelder exponent and schedule overrides, and an optional triangulation
skeleton.  Parsing validates everything at once and reports every problem
in a single error.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import CLAMPED, PERIODIC, GridChart, ImmersionField, MetricField
from .induction import SkeletonSet
from .nash_step import NODES_PER_WAVELENGTH


class ScenarioError(ValueError):
    """Carries every problem found in a scenario file."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("scenario invalid:\n  - " + "\n  - ".join(self.problems))


_KNOWN = {
    "scenario": {"name", "seed"},
    "chart": {"extent", "resolution", "boundary"},
    "metric": {"kind", "matrix", "factor"},
    "map": {"kind", "scale"},
    "schedule": {"theta", "alpha", "a", "depth", "lambda_budget", "delta_star"},
    "skeleton": {"kind", "vertices", "edges"},
}

_SAFE_FUNCS = {name: getattr(np, name) for name in
               ("sin", "cos", "tan", "exp", "sqrt", "abs", "minimum", "maximum")}
_SAFE_FUNCS["pi"] = np.pi


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    extent: tuple[float, float]
    resolution: tuple[int, int]
    boundary: str
    metric_kind: str
    metric_matrix: tuple[float, float, float]
    metric_factor: str | None
    map_kind: str
    map_scale: float
    theta: float
    alpha: float
    a_base: float
    depth: int
    lambda_budget: float | None
    delta_star: float | None
    vertices: tuple = ()
    edges: tuple = ()
    resolved: dict = field(default_factory=dict)

    def chart(self) -> GridChart:
        return GridChart(self.extent, self.resolution, self.boundary)

    def metric(self) -> MetricField:
        chart = self.chart()
        if self.metric_kind == "constant":
            a11, a12, a22 = self.metric_matrix
            return MetricField.constant(chart, np.array([[a11, a12], [a12, a22]]))
        x, y = chart.mesh()
        factor = eval(self.metric_factor, {"__builtins__": {}},
                      {**_SAFE_FUNCS, "x": x, "y": y})
        factor = np.broadcast_to(np.asarray(factor, dtype=float), x.shape)
        return MetricField.from_components(chart, factor ** 2,
                                           np.zeros_like(x), factor ** 2)

    def initial_map(self) -> ImmersionField:
        return ImmersionField.flat(self.chart(), scale=self.map_scale)

    def skeleta(self) -> list[SkeletonSet]:
        if not self.vertices:
            return [SkeletonSet.empty(), SkeletonSet.empty(),
                    SkeletonSet(dimension_level=2, whole=True)]
        segs = tuple((self.vertices[i], self.vertices[j]) for i, j in self.edges)
        return [SkeletonSet(0, points=self.vertices),
                SkeletonSet(1, points=self.vertices, segments=segs),
                SkeletonSet(dimension_level=2, whole=True)]


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def parse_scenario(path) -> Scenario:
    cp = configparser.ConfigParser()
    read = cp.read(path)
    problems: list[str] = []
    if not read:
        raise ScenarioError([f"cannot read scenario file {path}"])

    for section in cp.sections():
        if section not in _KNOWN:
            problems.append(f"unknown section [{section}]")
            continue
        for key in cp[section]:
            if key not in _KNOWN[section]:
                problems.append(f"unknown key {key!r} in [{section}]")

    def get(section, key, default=None):
        return cp.get(section, key, fallback=default)

    name = get("scenario", "name", "unnamed")
    seed = int(get("scenario", "seed", "0"))

    extent = (1.0, 1.0)
    try:
        ext = _floats(get("chart", "extent", "1.0 1.0"))
        if len(ext) == 1:
            ext = ext * 2
        extent = (ext[0], ext[1])
        if min(extent) <= 0:
            problems.append(f"extent {extent} must be positive")
    except ValueError:
        problems.append(f"cannot parse chart extent {get('chart', 'extent')!r}")

    resolution = (128, 128)
    try:
        res = [int(v) for v in _floats(get("chart", "resolution", "128 128"))]
        if len(res) == 1:
            res = res * 2
        resolution = (res[0], res[1])
        if min(resolution) < 8:
            problems.append(f"resolution {resolution} below the 8-node minimum")
    except ValueError:
        problems.append(f"cannot parse resolution {get('chart', 'resolution')!r}")

    boundary = get("chart", "boundary", CLAMPED)
    if boundary not in (CLAMPED, PERIODIC):
        problems.append(f"boundary must be clamped or periodic, got {boundary!r}")

    metric_kind = get("metric", "kind", "constant")
    matrix = (1.0, 0.0, 1.0)
    factor = None
    if metric_kind == "constant":
        try:
            vals = _floats(get("metric", "matrix", "1 0 1"))
            if len(vals) != 3:
                problems.append("metric matrix needs three entries: a11 a12 a22")
            else:
                matrix = tuple(vals)
                if matrix[0] * matrix[2] - matrix[1] ** 2 <= 0 or matrix[0] <= 0:
                    problems.append(f"metric matrix {matrix} is not positive definite")
        except ValueError:
            problems.append(f"cannot parse metric matrix {get('metric', 'matrix')!r}")
    elif metric_kind == "conformal":
        factor = get("metric", "factor")
        if not factor:
            problems.append("conformal metric needs a factor expression")
        else:
            try:
                probe = eval(factor, {"__builtins__": {}},
                             {**_SAFE_FUNCS, "x": np.zeros((2, 2)), "y": np.zeros((2, 2))})
                if np.min(probe) <= 0:
                    problems.append("conformal factor must be positive")
            except Exception as exc:
                problems.append(f"conformal factor does not evaluate: {exc}")
    else:
        problems.append(f"unknown metric kind {metric_kind!r}")

    map_kind = get("map", "kind", "flat")
    if map_kind not in ("flat", "scaled"):
        problems.append(f"unknown map kind {map_kind!r}")
    try:
        map_scale = float(get("map", "scale", "1.0"))
    except ValueError:
        problems.append(f"cannot parse map scale {get('map', 'scale')!r}")
        map_scale = 1.0

    try:
        theta = float(get("schedule", "theta", "0.15"))
        if not 0.0 < theta < 0.2:
            problems.append(
                f"theta = {theta} rejected: admissible exponents are 0 < theta < 1/5")
    except ValueError:
        problems.append(f"cannot parse theta {get('schedule', 'theta')!r}")
        theta = 0.15
    try:
        alpha = float(get("schedule", "alpha", "0.1"))
        if not 0.0 < alpha < 1.0:
            problems.append(f"alpha = {alpha} outside (0, 1)")
    except ValueError:
        problems.append(f"cannot parse alpha {get('schedule', 'alpha')!r}")
        alpha = 0.1
    a_base = float(get("schedule", "a", "4.0"))
    if a_base < 1.0:
        problems.append(f"amplitude base A = {a_base} must be >= 1")
    depth = int(get("schedule", "depth", "4"))
    if depth < 1:
        problems.append("depth must be at least 1")
    delta_star = get("schedule", "delta_star")
    delta_star = float(delta_star) if delta_star is not None else None
    if delta_star is not None and not 0.0 < delta_star <= 0.125:
        problems.append(f"delta_star = {delta_star} outside (0, 1/8]")

    budget = get("schedule", "lambda_budget")
    lambda_budget = float(budget) if budget is not None else None
    if lambda_budget is not None:
        h = max(extent[0] / max(resolution[0] - 1, 1), extent[1] / max(resolution[1] - 1, 1))
        ceiling = 2.0 * math.pi / (NODES_PER_WAVELENGTH * h)
        if lambda_budget > ceiling:
            problems.append(
                f"wavelength rule: lambda budget {lambda_budget:.1f} exceeds the "
                f"{NODES_PER_WAVELENGTH}-nodes-per-wavelength ceiling {ceiling:.1f} "
                f"at resolution {resolution}")

    vertices, edges = (), ()
    skel_kind = get("skeleton", "kind", "none")
    if skel_kind == "triangulation":
        try:
            vertices = tuple(tuple(_floats(v)) for v in
                             get("skeleton", "vertices", "").split(";") if v.strip())
            edges = tuple(tuple(int(i) for i in e.replace("-", " ").split()) for e in
                          get("skeleton", "edges", "").split(";") if e.strip())
            for e in edges:
                if len(e) != 2 or not all(0 <= i < len(vertices) for i in e):
                    problems.append(f"edge {e} references missing vertices")
            for v in vertices:
                if len(v) != 2:
                    problems.append(f"vertex {v} needs two coordinates")
                elif not (0 < v[0] < extent[0] and 0 < v[1] < extent[1]):
                    problems.append(f"vertex {v} outside the open chart")
        except ValueError:
            problems.append("cannot parse skeleton vertices/edges")
        if boundary == PERIODIC:
            problems.append("triangulation skeleta expect a clamped chart")
    elif skel_kind != "none":
        problems.append(f"unknown skeleton kind {skel_kind!r}")

    if boundary == PERIODIC and map_kind == "flat" and map_scale <= 0:
        problems.append("flat map scale must be positive")

    if problems:
        raise ScenarioError(problems)

    resolved = {
        "name": name, "seed": seed, "extent": extent, "resolution": resolution,
        "boundary": boundary, "metric_kind": metric_kind, "theta": theta,
        "alpha": alpha, "A": a_base, "depth": depth,
        "lambda_budget": lambda_budget, "delta_star": delta_star,
        "skeleton": skel_kind,
    }
    return Scenario(name, seed, extent, resolution, boundary, metric_kind,
                    tuple(matrix), factor, map_kind, map_scale, theta, alpha,
                    a_base, depth, lambda_budget, delta_star, vertices, edges,
                    resolved)
