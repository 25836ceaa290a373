"""
Strictly convex foliations: depth functions rho whose level sets sweep a
target region, and a sampler that certifies (or refutes) strict convexity
of every sampled level set with respect to the conformal metric.

Sign convention: rho is 0 at the outer shell and increases inward; a level
set is strictly convex iff (rho o gamma)'' < 0 for the g-geodesic tangent to it.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import DegenerateGradientError, NotTangentError, PreconditionError
from .geometry import ConformalMetric, free_flight
from .io import SCHEMA_VERSION, to_jsonable

logger = logging.getLogger(__name__)

GRADIENT_FLOOR = 1e-6
TANGENCY_TOL = 1e-8
CONVEXITY_MARGIN = 1e-4
MAX_LISTED_VIOLATIONS = 200

DIMENSION_CAVEAT = (
    "Extrapolation flag: the corollaries drawing c = c~ on M0 from lens data "
    "are stated for dimension n >= 3; this simulation is 2-D and demonstrates "
    "the mechanism only."
)


class RadialDepth:
    """rho(x) = R0 - |x - center|"""

    def __init__(self, outer_radius: float, center=(0.0, 0.0)):
        self.outer_radius = float(outer_radius)
        self.center = np.asarray(center, dtype=float)

    def __call__(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return self.outer_radius - np.hypot(d[..., 0], d[..., 1])

    def gradient(self, x):
        d = np.asarray(x, dtype=float) - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        safe = np.where(r > 0, r, 1.0)
        return np.where(r[..., None] > 0, -d / safe[..., None], 0.0)

    def to_dict(self):
        return {"kind": "radial", "outer_radius": self.outer_radius, "center": self.center.tolist()}


class PlanarDepth:
    """rho(x) = <n, x> - offset for a unit normal n"""

    def __init__(self, normal=(0.0, 1.0), offset: float = 0.0):
        n = np.asarray(normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.normal - self.offset

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.normal, x.shape).copy()

    def to_dict(self):
        return {"kind": "planar", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass
class TargetRegion:
    """The region M0 whose coverage by rho^-1(0, S] is required"""

    kind: str = "all"
    radius: float = 0.0
    center: tuple = (0.0, 0.0)
    normal: tuple = (0.0, 1.0)
    offset: float = 0.0

    KINDS = ("all", "outside_radius", "inside_radius", "halfplane")

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "all":
            return np.ones(x.shape[:-1], dtype=bool)
        if self.kind in ("outside_radius", "inside_radius"):
            r = np.linalg.norm(x - np.asarray(self.center, dtype=float), axis=-1)
            return r >= self.radius if self.kind == "outside_radius" else r <= self.radius
        if self.kind == "halfplane":
            return x @ np.asarray(self.normal, dtype=float) >= self.offset
        raise PreconditionError(f"unknown target region kind {self.kind!r}")

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "radius": self.radius, "center": list(self.center),
                "normal": list(self.normal), "offset": self.offset}


@dataclass
class FoliationSpec:
    rho: object
    S: float
    target: TargetRegion = field(default_factory=TargetRegion)

    def __post_init__(self):
        if not self.S > 0:
            raise PreconditionError(f"foliation range S must be positive, got {self.S}")

    @classmethod
    def radial(cls, outer_radius: float = 1.0, S: float = 0.9, center=(0.0, 0.0),
               target: Optional[TargetRegion] = None) -> "FoliationSpec":
        return cls(RadialDepth(outer_radius, center), S, target or TargetRegion())

    @classmethod
    def planar(cls, normal=(0.0, 1.0), offset: float = 0.0, S: float = 0.5,
               target: Optional[TargetRegion] = None) -> "FoliationSpec":
        return cls(PlanarDepth(normal, offset), S, target or TargetRegion())

    def value(self, x) -> np.ndarray:
        return self.rho(x)

    def gradient(self, x) -> np.ndarray:
        return self.rho.gradient(x)

    def to_dict(self) -> Dict:
        return {"rho": self.rho.to_dict(), "S": self.S, "target": self.target.to_dict()}


@dataclass
class FoliationReport:
    passed: bool
    violations: List[Dict]
    counts: Dict[str, int]
    levels: List[float]
    points_checked: int
    min_gradient: float
    max_convexity: float
    caveat: str = DIMENSION_CAVEAT

    def to_dict(self) -> Dict:
        return to_jsonable({
            "schema_version": SCHEMA_VERSION,
            "passed": self.passed,
            "counts": self.counts,
            "levels": self.levels,
            "points_checked": self.points_checked,
            "min_gradient": self.min_gradient,
            "max_convexity": self.max_convexity,
            "violations": self.violations,
            "caveat": self.caveat,
        })

    def to_json(self, path: Optional[Union[str, Path]] = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text


def _second_difference(metric: ConformalMetric, fol: FoliationSpec, X: np.ndarray, V: np.ndarray,
                       delta: float, substeps: int) -> np.ndarray:
    c = metric.speed(X)
    xi = V / (c * c)[:, None]
    y = np.concatenate([X, xi], axis=1)
    forward = free_flight(metric.speed, y, delta, substeps)
    backward = free_flight(metric.speed, y, -delta, substeps)
    return (fol.value(forward[:, :2]) - 2.0 * fol.value(X) + fol.value(backward[:, :2])) / (delta * delta)


def convexity_second_derivative(metric: ConformalMetric, fol: FoliationSpec, x, v,
                                delta: float = 1e-3, substeps: int = 4) -> float:
    """d^2/dt^2 rho(gamma(t)) at t = 0 for the g-geodesic with gamma(0) = x, gamma'(0) = v"""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    grad = fol.gradient(x)
    grad_norm = float(np.linalg.norm(grad))
    if grad_norm <= GRADIENT_FLOOR:
        raise DegenerateGradientError(f"|grad rho| = {grad_norm:.3e} at {x.tolist()}")
    c = float(metric.speed(x))
    g_length = float(np.linalg.norm(v)) / c
    if abs(g_length - 1.0) > TANGENCY_TOL:
        raise NotTangentError(f"v has g-length {g_length:.12g}, expected 1")
    if abs(float(np.dot(grad, v))) / (grad_norm * c) > TANGENCY_TOL:
        raise NotTangentError(f"v is not tangent to the level set at {x.tolist()}")
    return float(_second_difference(metric, fol, x[None, :], v[None, :], delta, substeps)[0])


def is_strictly_convex(value: float, margin: float = CONVEXITY_MARGIN) -> bool:
    return value < -margin


def _level_points(metric: ConformalMetric, fol: FoliationSpec, level: float, seeds: np.ndarray,
                  band: float, count: int) -> np.ndarray:
    near = seeds[np.abs(fol.value(seeds) - level) < band]
    if near.size == 0:
        return near.reshape(0, 2)
    x = near.copy()
    for _ in range(4):
        g = fol.gradient(x)
        g2 = np.sum(g * g, axis=1)
        step = np.where(g2 > 0, (fol.value(x) - level) / np.where(g2 > 0, g2, 1.0), 0.0)
        x = x - step[:, None] * g
    ok = (np.abs(fol.value(x) - level) < 1e-8) & (metric.domain.defining_function(x) < 0)
    x = x[ok]
    if len(x) <= count:
        return x
    centroid = x.mean(axis=0)
    order = np.argsort(np.arctan2(x[:, 1] - centroid[1], x[:, 0] - centroid[0]))
    pick = np.linspace(0, len(x) - 1, count).round().astype(int)
    return x[order][pick]


def check_foliation(metric: ConformalMetric, fol: FoliationSpec, levels: int = 16,
                    points_per_level: int = 32, grid_spacing: float = 0.02,
                    margin: float = CONVEXITY_MARGIN, delta: float = 1e-3) -> FoliationReport:
    """Sample level sets of rho in (0, S] and check the foliation hypotheses"""
    logger.info(f"🔍 Checking foliation: S={fol.S:g}, {levels} levels x {points_per_level} points")
    domain = metric.domain
    violations: List[Dict] = []
    counts = {"convexity": 0, "gradient": 0, "sigma0": 0, "coverage": 0}

    def record(kind: str, x, level, value, message: str):
        counts[kind] += 1
        if len(violations) < MAX_LISTED_VIOLATIONS:
            violations.append({"kind": kind, "x": float(x[0]), "y": float(x[1]),
                               "level": None if level is None else float(level),
                               "value": float(value), "message": message})

    seeds = domain.interior_samples(grid_spacing)
    level_values = [fol.S * k / levels for k in range(1, levels + 1)]
    points_checked = 0
    min_gradient = np.inf
    max_convexity = -np.inf

    for level in level_values:
        X = _level_points(metric, fol, level, seeds, 1.5 * grid_spacing, points_per_level)
        if len(X) == 0:
            continue
        grad = fol.gradient(X)
        gnorm = np.linalg.norm(grad, axis=1)
        min_gradient = min(min_gradient, float(gnorm.min()))
        for x, g in zip(X[gnorm <= GRADIENT_FLOOR], gnorm[gnorm <= GRADIENT_FLOOR]):
            record("gradient", x, level, g, f"|grad rho| = {g:.3e} below {GRADIENT_FLOOR:g}")
        good = gnorm > GRADIENT_FLOOR
        X, grad, gnorm = X[good], grad[good], gnorm[good]
        if len(X) == 0:
            continue
        tangent = np.stack([-grad[:, 1], grad[:, 0]], axis=1) / gnorm[:, None]
        V = metric.speed(X)[:, None] * tangent
        values = _second_difference(metric, fol, X, V, delta, 4)
        points_checked += len(X)
        max_convexity = max(max_convexity, float(values.max()))
        for x, value in zip(X, values):
            if not is_strictly_convex(value, margin):
                record("convexity", x, level, value,
                       f"(rho o gamma)'' = {value:.3e} not below -{margin:g}")

    interior = domain.interior_samples(grid_spacing, margin=0.5 * grid_spacing)
    rho_interior = fol.value(interior)
    for x, value in zip(interior[rho_interior <= 0], rho_interior[rho_interior <= 0]):
        record("sigma0", x, 0.0, value, "rho <= 0 inside M: Sigma_0 meets the interior")

    target = interior[fol.target.contains(interior)]
    rho_target = fol.value(target)
    uncovered = (rho_target > fol.S) | (rho_target <= 0)
    for x, value in zip(target[uncovered], rho_target[uncovered]):
        record("coverage", x, None, value, f"target point with rho = {value:.4g} outside (0, {fol.S:g}]")

    passed = sum(counts.values()) == 0
    report = FoliationReport(
        passed=passed,
        violations=violations,
        counts=counts,
        levels=level_values,
        points_checked=points_checked,
        min_gradient=float(min_gradient),
        max_convexity=float(max_convexity),
    )
    if passed:
        logger.info(f"✅ Foliation passed ({points_checked} level-set points)")
    else:
        logger.warning(f"⚠️ Foliation failed: {counts}")
    return report
