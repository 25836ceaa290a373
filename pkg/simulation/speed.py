"""
Sound speeds c(x) > 0 defining conformal metrics g = c^-2 g0.

Speeds are built from a small declarative expression language (the same one
the JSON configs use) or from gridded samples with bicubic interpolation.
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import RectBivariateSpline

from .errors import CollarMismatchError, PreconditionError
from .io import canonical_hash

logger = logging.getLogger(__name__)

COLLAR_TOLERANCE = 1e-12


def _points(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def _center(center) -> np.ndarray:
    return np.asarray(center if center is not None else (0.0, 0.0), dtype=float)


class Expression:
    """Node of the speed expression tree"""

    def value(self, x) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> Dict:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.value(x)


class Constant(Expression):
    def __init__(self, value: float):
        self.constant = float(value)

    def value(self, x):
        return np.full(_points(x).shape[:-1], self.constant)

    def gradient(self, x):
        return np.zeros(_points(x).shape)

    def to_dict(self):
        return {"const": self.constant}


class RadiusSquared(Expression):
    """|x - x0|^2"""

    def __init__(self, center=None):
        self.center = _center(center)

    def value(self, x):
        d = _points(x) - self.center
        return np.sum(d * d, axis=-1)

    def gradient(self, x):
        return 2.0 * (_points(x) - self.center)

    def to_dict(self):
        return {"r2": {"center": self.center.tolist()}}


class GaussianBump(Expression):
    """amp * exp(-|x - x0|^2 / width2)"""

    def __init__(self, amp: float, center=None, width2: float = 0.1):
        if width2 <= 0:
            raise ValueError(f"gauss width2 must be positive, got {width2}")
        self.amp = float(amp)
        self.center = _center(center)
        self.width2 = float(width2)

    def value(self, x):
        d = _points(x) - self.center
        return self.amp * np.exp(-np.sum(d * d, axis=-1) / self.width2)

    def gradient(self, x):
        d = _points(x) - self.center
        return self.value(x)[..., None] * (-2.0 * d / self.width2)

    def to_dict(self):
        return {"gauss": {"amp": self.amp, "center": self.center.tolist(), "width2": self.width2}}


class CompactBump(Expression):
    """amp * exp(1 - 1/(1 - q)) for q = |x - x0|^2 / radius^2 < 1, zero outside.

    Smooth and exactly zero outside the disk of the given radius, so speeds
    differing only by such bumps agree exactly on a boundary collar.
    """

    def __init__(self, amp: float, center=None, radius: float = 0.3):
        if radius <= 0:
            raise ValueError(f"bump radius must be positive, got {radius}")
        self.amp = float(amp)
        self.center = _center(center)
        self.radius = float(radius)

    def _q(self, x):
        d = _points(x) - self.center
        return d, np.sum(d * d, axis=-1) / self.radius ** 2

    def value(self, x):
        _, q = self._q(x)
        inside = q < 1.0
        safe = np.where(inside, q, 0.0)
        return np.where(inside, self.amp * np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)

    def gradient(self, x):
        d, q = self._q(x)
        inside = q < 1.0
        safe = np.where(inside, q, 0.0)
        psi = np.where(inside, self.amp * np.exp(1.0 - 1.0 / (1.0 - safe)), 0.0)
        factor = -psi / (1.0 - safe) ** 2 * 2.0 / self.radius ** 2
        return factor[..., None] * d

    def to_dict(self):
        return {"bump": {"amp": self.amp, "center": self.center.tolist(), "radius": self.radius}}


class GaussianRing(Expression):
    """amp * exp(-(|x - x0| - radius)^2 / width2)"""

    def __init__(self, amp: float, radius: float, width2: float, center=None):
        if width2 <= 0:
            raise ValueError(f"ring width2 must be positive, got {width2}")
        self.amp = float(amp)
        self.radius = float(radius)
        self.width2 = float(width2)
        self.center = _center(center)

    def value(self, x):
        d = _points(x) - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        return self.amp * np.exp(-((r - self.radius) ** 2) / self.width2)

    def gradient(self, x):
        d = _points(x) - self.center
        r = np.hypot(d[..., 0], d[..., 1])
        dr = -2.0 * (r - self.radius) / self.width2 * self.value(x)
        unit = np.where(r[..., None] > 0, d / np.where(r > 0, r, 1.0)[..., None], 0.0)
        return dr[..., None] * unit

    def to_dict(self):
        return {"ring": {"amp": self.amp, "radius": self.radius, "width2": self.width2,
                         "center": self.center.tolist()}}


class Sum(Expression):
    def __init__(self, terms: List[Expression]):
        if not terms:
            raise ValueError("sum needs at least one term")
        self.terms = list(terms)

    def value(self, x):
        return sum(t.value(x) for t in self.terms)

    def gradient(self, x):
        return sum(t.gradient(x) for t in self.terms)

    def to_dict(self):
        return {"sum": [t.to_dict() for t in self.terms]}


class Product(Expression):
    def __init__(self, factors: List[Expression]):
        if not factors:
            raise ValueError("product needs at least one factor")
        self.factors = list(factors)

    def value(self, x):
        out = self.factors[0].value(x)
        for f in self.factors[1:]:
            out = out * f.value(x)
        return out

    def gradient(self, x):
        values = [f.value(x) for f in self.factors]
        grad = np.zeros(_points(x).shape)
        for i, f in enumerate(self.factors):
            others = np.ones_like(values[i])
            for j, v in enumerate(values):
                if j != i:
                    others = others * v
            grad = grad + others[..., None] * f.gradient(x)
        return grad

    def to_dict(self):
        return {"product": [f.to_dict() for f in self.factors]}


EXPRESSION_KEYS = ("const", "r2", "gauss", "bump", "ring", "sum", "product")


def parse_expression(spec, path: str = "speed") -> Expression:
    """Build an expression tree from its JSON form; raises ValueError naming the path"""
    if isinstance(spec, (int, float)) and not isinstance(spec, bool):
        return Constant(spec)
    if not isinstance(spec, dict) or len(spec) != 1:
        raise ValueError(f"{path}: expected a single-key object with one of {list(EXPRESSION_KEYS)}")
    key, body = next(iter(spec.items()))

    def params(allowed, required):
        if not isinstance(body, dict):
            raise ValueError(f"{path}.{key}: expected an object")
        unknown = sorted(set(body) - set(allowed))
        if unknown:
            raise ValueError(f"{path}.{key}: unknown keys {unknown}")
        missing = sorted(set(required) - set(body))
        if missing:
            raise ValueError(f"{path}.{key}: missing keys {missing}")
        return body

    if key == "const":
        if isinstance(body, bool) or not isinstance(body, (int, float)):
            raise ValueError(f"{path}.const: expected a number")
        return Constant(body)
    if key == "r2":
        p = params(["center"], [])
        return RadiusSquared(p.get("center"))
    if key == "gauss":
        p = params(["amp", "center", "width2"], ["amp", "width2"])
        return GaussianBump(p["amp"], p.get("center"), p["width2"])
    if key == "bump":
        p = params(["amp", "center", "radius"], ["amp", "radius"])
        return CompactBump(p["amp"], p.get("center"), p["radius"])
    if key == "ring":
        p = params(["amp", "radius", "width2", "center"], ["amp", "radius", "width2"])
        return GaussianRing(p["amp"], p["radius"], p["width2"], p.get("center"))
    if key in ("sum", "product"):
        if not isinstance(body, list):
            raise ValueError(f"{path}.{key}: expected a list")
        children = [parse_expression(item, f"{path}.{key}[{i}]") for i, item in enumerate(body)]
        return Sum(children) if key == "sum" else Product(children)
    raise ValueError(f"{path}: unknown expression '{key}'")


class SpeedField:
    """Conformal factor c(x) with analytic gradient and collar width"""

    def __init__(self, rule: Expression, collar_width: float = 0.0, name: str = "speed",
                 samples: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None):
        if collar_width < 0:
            raise PreconditionError(f"collar width must be nonnegative, got {collar_width}")
        self.rule = rule
        self.collar_width = float(collar_width)
        self.name = name
        self._spline = None
        self._samples_hash = None
        if samples is not None:
            xs, ys, values = (np.asarray(a, dtype=float) for a in samples)
            self._spline = RectBivariateSpline(xs, ys, values, kx=3, ky=3)
            self._samples_hash = canonical_hash({"xs": xs, "ys": ys, "values": values})

    @classmethod
    def from_config(cls, spec, collar_width: float = 0.0, name: str = "speed") -> "SpeedField":
        return cls(parse_expression(spec), collar_width=collar_width, name=name)

    @classmethod
    def constant(cls, value: float = 1.0, collar_width: float = 0.0) -> "SpeedField":
        return cls(Constant(value), collar_width=collar_width, name=f"const{value:g}")

    @classmethod
    def from_samples(cls, xs, ys, values, collar_width: float = 0.0, name: str = "sampled") -> "SpeedField":
        """Bicubic interpolant of c sampled on the tensor grid xs x ys"""
        values = np.asarray(values, dtype=float)
        rule = Constant(float(np.mean(values)))
        return cls(rule, collar_width=collar_width, name=name, samples=(xs, ys, values))

    def __call__(self, x) -> np.ndarray:
        x = _points(x)
        if self._spline is not None:
            return self._spline.ev(x[..., 0], x[..., 1])
        return self.rule.value(x)

    def gradient(self, x) -> np.ndarray:
        x = _points(x)
        if self._spline is not None:
            gx = self._spline.ev(x[..., 0], x[..., 1], dx=1)
            gy = self._spline.ev(x[..., 0], x[..., 1], dy=1)
            return np.stack([gx, gy], axis=-1)
        return self.rule.gradient(x)

    def scaled(self, k: float) -> "SpeedField":
        """The speed k*c"""
        if self._spline is not None:
            raise PreconditionError("scaling of sampled speeds is not supported")
        return SpeedField(Product([Constant(k), self.rule]), collar_width=self.collar_width,
                          name=f"{k:g}*{self.name}")

    def to_dict(self) -> Dict:
        data = {"rule": self.rule.to_dict(), "collar_width": self.collar_width}
        if self._samples_hash is not None:
            data["samples_sha256"] = self._samples_hash
        return data

    @property
    def fingerprint(self) -> str:
        return canonical_hash(self.to_dict())

    def bounds(self, domain, spacing: float = 0.02) -> Tuple[float, float]:
        """(min c, max c) over interior grid points and the boundary"""
        pts = domain.interior_samples(spacing)
        s = np.linspace(0.0, domain.length, 512, endpoint=False)
        pts = np.concatenate([pts, domain.boundary_point(s)], axis=0)
        values = self(pts)
        return float(np.min(values)), float(np.max(values))

    def check_positive(self, domain, spacing: float = 0.02) -> float:
        c_min, _ = self.bounds(domain, spacing)
        if not np.isfinite(c_min) or c_min <= 0:
            raise PreconditionError(f"speed '{self.name}' is not positive on the domain (min c = {c_min:.6g})")
        return c_min


def collar_difference(speed_a: SpeedField, speed_b: SpeedField, domain,
                      width: Optional[float] = None) -> float:
    """max |c_a - c_b| on {dist(x, dM) < width}"""
    if width is None:
        width = min(speed_a.collar_width, speed_b.collar_width)
    if width <= 0:
        s = np.linspace(0.0, domain.length, 1024, endpoint=False)
        pts = domain.boundary_point(s)
    else:
        pts = domain.collar_samples(width, n_boundary=512, n_depth=16)
    return float(np.max(np.abs(speed_a(pts) - speed_b(pts))))


def collar_equal(speed_a: SpeedField, speed_b: SpeedField, domain,
                 width: Optional[float] = None) -> bool:
    return collar_difference(speed_a, speed_b, domain, width) < COLLAR_TOLERANCE


def require_collar_equal(speed_a: SpeedField, speed_b: SpeedField, domain,
                         width: Optional[float] = None) -> None:
    diff = collar_difference(speed_a, speed_b, domain, width)
    if not diff < COLLAR_TOLERANCE:
        raise CollarMismatchError(
            f"speeds '{speed_a.name}' and '{speed_b.name}' differ by {diff:.3e} on the boundary collar"
        )


def waveguide_speed(depth: float = 0.3, radius: float = 0.5, width2: float = 0.02,
                    collar_width: float = 0.0) -> SpeedField:
    """1 - depth * exp(-(r - radius)^2 / width2): a slow ring that traps near-tangential rays"""
    rule = Sum([Constant(1.0), GaussianRing(-depth, radius, width2)])
    return SpeedField(rule, collar_width=collar_width, name="waveguide")
