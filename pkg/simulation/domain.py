"""
Planar domains with boundary: disk, rectangle and star-shaped level sets.

Every domain exposes a defining function (negative inside, zero on the
boundary), a counter-clockwise arclength parameterization s -> x(s) of the
boundary with unit tangent and outward unit normal, and the inverse map
x -> s for boundary points.
"""

import logging
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


def _as_points(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


class Domain:
    """Common interface of the planar domains"""

    kind = "abstract"

    @property
    def length(self) -> float:
        raise NotImplementedError

    def defining_function(self, x) -> np.ndarray:
        raise NotImplementedError

    def boundary_point(self, s) -> np.ndarray:
        raise NotImplementedError

    def tangent(self, s) -> np.ndarray:
        raise NotImplementedError

    def normal(self, s) -> np.ndarray:
        """Outward unit normal: the tangent rotated clockwise"""
        t = self.tangent(s)
        return np.stack([t[..., 1], -t[..., 0]], axis=-1)

    def arclength_of(self, x) -> np.ndarray:
        raise NotImplementedError

    def distance_to_boundary(self, x) -> np.ndarray:
        """Euclidean distance to the boundary, positive inside"""
        raise NotImplementedError

    def bounding_box(self) -> Tuple[float, float, float, float]:
        raise NotImplementedError

    def to_dict(self) -> Dict:
        raise NotImplementedError

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        return self.defining_function(x) <= tol

    def wrap(self, s) -> np.ndarray:
        return np.mod(s, self.length)

    def arc_difference(self, s1, s2) -> np.ndarray:
        """Signed periodic difference s1 - s2 in [-|dM|/2, |dM|/2)"""
        half = 0.5 * self.length
        return np.mod(np.asarray(s1) - np.asarray(s2) + half, self.length) - half

    def segment_crossing(self, p, q, iterations: int = 60) -> np.ndarray:
        """Fraction theta in (0, 1] along p -> q where the boundary is crossed.

        p must be inside and q outside; vectorized over leading axes.
        """
        p = _as_points(p)
        q = _as_points(q)
        lo = np.zeros(p.shape[:-1])
        hi = np.ones(p.shape[:-1])
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            inside = self.defining_function(p + mid[..., None] * (q - p)) < 0.0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return 0.5 * (lo + hi)

    def interior_samples(self, spacing: float, margin: float = 0.0) -> np.ndarray:
        """Grid points with defining function below -margin"""
        xmin, xmax, ymin, ymax = self.bounding_box()
        xs = np.arange(xmin + 0.5 * spacing, xmax, spacing)
        ys = np.arange(ymin + 0.5 * spacing, ymax, spacing)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=-1)
        return pts[self.defining_function(pts) < -margin]

    def collar_samples(self, width: float, n_boundary: int = 256, n_depth: int = 8) -> np.ndarray:
        """Points x(s) - d nu(s) with 0 <= d < width"""
        s = np.linspace(0.0, self.length, n_boundary, endpoint=False)
        depths = np.linspace(0.0, width, n_depth, endpoint=False)
        xb = self.boundary_point(s)
        nu = self.normal(s)
        pts = xb[None, :, :] - depths[:, None, None] * nu[None, :, :]
        pts = pts.reshape(-1, 2)
        return pts[self.defining_function(pts) <= 1e-12]


class DiskDomain(Domain):
    """Disk of radius R; s = 0 at center + (R, 0)"""

    kind = "disk"

    def __init__(self, radius: float = 1.0, center=(0.0, 0.0)):
        if radius <= 0:
            raise ValueError(f"disk radius must be positive, got {radius}")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    @property
    def length(self) -> float:
        return 2.0 * np.pi * self.radius

    def defining_function(self, x) -> np.ndarray:
        d = _as_points(x) - self.center
        return np.hypot(d[..., 0], d[..., 1]) - self.radius

    def boundary_point(self, s) -> np.ndarray:
        a = np.asarray(s, dtype=float) / self.radius
        return self.center + self.radius * np.stack([np.cos(a), np.sin(a)], axis=-1)

    def tangent(self, s) -> np.ndarray:
        a = np.asarray(s, dtype=float) / self.radius
        return np.stack([-np.sin(a), np.cos(a)], axis=-1)

    def arclength_of(self, x) -> np.ndarray:
        d = _as_points(x) - self.center
        return self.radius * np.mod(np.arctan2(d[..., 1], d[..., 0]), 2.0 * np.pi)

    def distance_to_boundary(self, x) -> np.ndarray:
        return -self.defining_function(x)

    def bounding_box(self) -> Tuple[float, float, float, float]:
        cx, cy = self.center
        r = self.radius
        return cx - r, cx + r, cy - r, cy + r

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "radius": self.radius, "center": self.center.tolist()}


class RectangleDomain(Domain):
    """Rectangle [0, a] x [0, b]; s runs bottom, right, top, left"""

    kind = "rectangle"

    def __init__(self, width: float = 1.0, height: float = 1.0):
        if width <= 0 or height <= 0:
            raise ValueError(f"rectangle sides must be positive, got {width} x {height}")
        self.width = float(width)
        self.height = float(height)

    @property
    def length(self) -> float:
        return 2.0 * (self.width + self.height)

    def defining_function(self, x) -> np.ndarray:
        x = _as_points(x)
        return np.maximum.reduce([
            -x[..., 0], x[..., 0] - self.width, -x[..., 1], x[..., 1] - self.height
        ])

    def _edges(self, s):
        a, b = self.width, self.height
        s = self.wrap(s)
        edge = np.select([s < a, s < a + b, s < 2 * a + b], [0, 1, 2], default=3)
        offset = np.choose(edge, [s, s - a, s - a - b, s - 2 * a - b])
        return edge, offset

    def boundary_point(self, s) -> np.ndarray:
        a, b = self.width, self.height
        edge, u = self._edges(s)
        x = np.choose(edge, [u, np.full_like(u, a), a - u, np.zeros_like(u)])
        y = np.choose(edge, [np.zeros_like(u), u, np.full_like(u, b), b - u])
        return np.stack([x, y], axis=-1)

    def tangent(self, s) -> np.ndarray:
        edge, u = self._edges(s)
        tx = np.choose(edge, [1.0, 0.0, -1.0, 0.0]) * np.ones_like(u)
        ty = np.choose(edge, [0.0, 1.0, 0.0, -1.0]) * np.ones_like(u)
        return np.stack([tx, ty], axis=-1)

    def arclength_of(self, x) -> np.ndarray:
        a, b = self.width, self.height
        x = _as_points(x)
        px = np.clip(x[..., 0], 0.0, a)
        py = np.clip(x[..., 1], 0.0, b)
        dist = np.stack([np.abs(x[..., 1]), np.abs(x[..., 0] - a),
                         np.abs(x[..., 1] - b), np.abs(x[..., 0])], axis=-1)
        edge = np.argmin(dist, axis=-1)
        s = np.choose(edge, [px, a + py, a + b + (a - px), 2 * a + b + (b - py)])
        return self.wrap(s)

    def distance_to_boundary(self, x) -> np.ndarray:
        return -self.defining_function(x)

    def bounding_box(self) -> Tuple[float, float, float, float]:
        return 0.0, self.width, 0.0, self.height

    def to_dict(self) -> Dict:
        return {"kind": self.kind, "width": self.width, "height": self.height}


class EllipseLevel:
    """phi(x) = ((x - cx)/a)^2 + ((y - cy)/b)^2 - 1"""

    def __init__(self, a: float, b: float, center=(0.0, 0.0)):
        self.a = float(a)
        self.b = float(b)
        self.center = np.asarray(center, dtype=float)

    def __call__(self, x) -> np.ndarray:
        d = _as_points(x) - self.center
        return (d[..., 0] / self.a) ** 2 + (d[..., 1] / self.b) ** 2 - 1.0


class LevelSetDomain(Domain):
    """Star-shaped domain {phi < 0} around a center point.

    The boundary radius r(theta) is located by bisection along rays and
    interpolated by a periodic cubic spline; arclength is tabulated on a
    fine angular grid.
    """

    kind = "levelset"

    def __init__(self, phi: Callable, center=(0.0, 0.0), n_angles: int = 2048,
                 n_fine: int = 2 ** 15, name: str = "levelset", params: Optional[Dict] = None):
        self.phi = phi
        self.center = np.asarray(center, dtype=float)
        self.name = name
        self.params = params or {}

        if not self.phi(self.center[None, :])[0] < 0:
            raise ValueError("level-set center must lie inside {phi < 0}")

        angles = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
        radii = self._ray_radii(angles)
        self._spline = CubicSpline(np.append(angles, 2.0 * np.pi), np.append(radii, radii[0]),
                                   bc_type="periodic")

        self._theta = np.linspace(0.0, 2.0 * np.pi, n_fine + 1)
        speed = np.linalg.norm(self._curve_derivative(self._theta), axis=-1)
        self._arclength = cumulative_trapezoid(speed, self._theta, initial=0.0)
        self._length = float(self._arclength[-1])

        dense = self._curve(np.linspace(0.0, 2.0 * np.pi, 8192, endpoint=False))
        self._tree = cKDTree(dense)
        logger.debug(f"Level-set boundary '{name}' built: |dM| = {self._length:.8f}")

    @classmethod
    def ellipse(cls, a: float, b: float, center=(0.0, 0.0), **kwargs) -> "LevelSetDomain":
        params = {"kind": "ellipse", "semi_axes": [float(a), float(b)], "center": list(map(float, center))}
        return cls(EllipseLevel(a, b, center), center=center, name="ellipse", params=params, **kwargs)

    def _ray_radii(self, angles: np.ndarray) -> np.ndarray:
        e = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        hi = np.ones_like(angles)
        for _ in range(60):
            outside = self.phi(self.center + hi[:, None] * e) >= 0
            if outside.all():
                break
            hi = np.where(outside, hi, 2.0 * hi)
        lo = np.zeros_like(angles)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            inside = self.phi(self.center + mid[:, None] * e) < 0
            lo = np.where(inside, mid, lo)
            hi = np.where(inside, hi, mid)
        return 0.5 * (lo + hi)

    def _curve(self, theta) -> np.ndarray:
        r = self._spline(theta)
        return self.center + r[..., None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)

    def _curve_derivative(self, theta) -> np.ndarray:
        r = self._spline(theta)
        dr = self._spline(theta, 1)
        c, s = np.cos(theta), np.sin(theta)
        return np.stack([dr * c - r * s, dr * s + r * c], axis=-1)

    def _theta_of(self, s) -> np.ndarray:
        return np.interp(self.wrap(s), self._arclength, self._theta)

    @property
    def length(self) -> float:
        return self._length

    def defining_function(self, x) -> np.ndarray:
        return self.phi(_as_points(x))

    def boundary_point(self, s) -> np.ndarray:
        return self._curve(self._theta_of(s))

    def tangent(self, s) -> np.ndarray:
        d = self._curve_derivative(self._theta_of(s))
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def arclength_of(self, x) -> np.ndarray:
        d = _as_points(x) - self.center
        theta = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2.0 * np.pi)
        return self.wrap(np.interp(theta, self._theta, self._arclength))

    def distance_to_boundary(self, x) -> np.ndarray:
        x = _as_points(x)
        dist, _ = self._tree.query(x)
        return np.where(self.defining_function(x) <= 0, dist, -dist)

    def bounding_box(self) -> Tuple[float, float, float, float]:
        pts = self._tree.data
        return (float(pts[:, 0].min()), float(pts[:, 0].max()),
                float(pts[:, 1].min()), float(pts[:, 1].max()))

    def to_dict(self) -> Dict:
        return dict(self.params) if self.params else {"kind": self.kind, "name": self.name}
