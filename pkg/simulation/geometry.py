"""
Geodesic flow of conformal metrics g = c^-2 g0 on planar domains.

Geodesics are integrated in Hamiltonian form H(x, xi) = 1/2 c(x)^2 |xi|^2,
parameterized by g-arclength, with fixed-step RK4 over batches of rays.
Boundary exits are located by bisection on the domain's defining function.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .domain import Domain
from .errors import (
    GlancingError,
    NumericalAbortError,
    OutsideDomainError,
    PreconditionError,
)
from .speed import SpeedField

logger = logging.getLogger(__name__)

GLANCING_LIMIT = 0.995
DEFAULT_STEP = 1e-3
DEFAULT_L_MAX = 50.0
BISECTION_TOL = 1e-10
UNIT_SPEED_TOL = 1e-6
START_TOL = 1e-8

LENS_COLUMNS = ["s_in", "mu_in", "s_out", "mu_out", "length", "trapped"]


@dataclass(frozen=True)
class BoundaryPhase:
    """Boundary arclength s and tangential momentum mu (sine of the angle with the normal)"""

    s: float
    mu: float
    side: str = "inward"

    def reversed(self) -> "BoundaryPhase":
        """The same boundary point with the direction reversed"""
        side = "outward" if self.side == "inward" else "inward"
        return BoundaryPhase(self.s, -self.mu, side)


@dataclass
class PhaseState:
    x: np.ndarray
    xi: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.x, float), np.asarray(self.xi, float)])

    @classmethod
    def from_array(cls, y) -> "PhaseState":
        y = np.asarray(y, dtype=float)
        return cls(x=y[:2].copy(), xi=y[2:].copy())

    def g_norm(self, speed: SpeedField) -> float:
        return float(speed(self.x) * np.linalg.norm(self.xi))


@dataclass
class ConformalMetric:
    """A domain with a sound speed, plus the integration settings used on it"""

    domain: Domain
    speed: SpeedField
    step: float = DEFAULT_STEP
    L_max: float = DEFAULT_L_MAX
    bisection_tol: float = BISECTION_TOL


@dataclass
class GeodesicResult:
    path: Optional[np.ndarray]
    exit: Optional[PhaseState]
    length: float
    trapped: bool
    speed_drift: float = 0.0


@dataclass
class LensRecord:
    entry: BoundaryPhase
    exit: Optional[BoundaryPhase]
    length: float
    trapped: bool
    path: Optional[np.ndarray] = None
    error: Optional[str] = None

    def to_row(self) -> Dict:
        return {
            "s_in": self.entry.s,
            "mu_in": self.entry.mu,
            "s_out": self.exit.s if self.exit is not None else np.nan,
            "mu_out": self.exit.mu if self.exit is not None else np.nan,
            "length": self.length,
            "trapped": bool(self.trapped),
        }


@dataclass
class SweepResult:
    records: List[LensRecord]
    T0_estimate: float
    errors: Dict[int, str] = field(default_factory=dict)

    @property
    def trapped(self) -> List[int]:
        return [i for i, r in enumerate(self.records) if r.trapped]

    def rows(self) -> List[Dict]:
        return [r.to_row() for r in self.records]


def check_non_glancing(mu: float) -> None:
    if not np.isfinite(mu) or abs(mu) > GLANCING_LIMIT:
        raise GlancingError(
            f"|mu| = {abs(mu):.6g} exceeds the glancing margin {GLANCING_LIMIT} (1 - |mu| must be >= {1 - GLANCING_LIMIT:.3g})"
        )


def _boundary_covectors(metric: ConformalMetric, s, mu, sign) -> Tuple[np.ndarray, np.ndarray]:
    s = np.atleast_1d(np.asarray(s, dtype=float))
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    x = metric.domain.boundary_point(s)
    tau = metric.domain.tangent(s)
    nu = metric.domain.normal(s)
    c = metric.speed(x)
    normal_part = np.sqrt(1.0 - mu * mu)
    xi = (mu[:, None] * tau + (sign * normal_part)[:, None] * nu) / c[:, None]
    return x, xi


def boundary_phase_to_interior(metric: ConformalMetric, bp: BoundaryPhase) -> PhaseState:
    """Unit covector at x(s) with g-tangential part mu, pointing inward or outward"""
    check_non_glancing(bp.mu)
    sign = -1.0 if bp.side == "inward" else 1.0
    x, xi = _boundary_covectors(metric, bp.s, bp.mu, np.array([sign]))
    return PhaseState(x=x[0], xi=xi[0])


def phase_to_boundary(metric: ConformalMetric, state: PhaseState, side: str = "outward") -> BoundaryPhase:
    """Inverse of boundary_phase_to_interior for a state on the boundary"""
    s = float(metric.domain.arclength_of(state.x))
    tau = metric.domain.tangent(s)
    mu = float(metric.speed(state.x) * np.dot(state.xi, tau))
    return BoundaryPhase(s=s, mu=mu, side=side)


def _hamiltonian_rhs(speed: SpeedField, y: np.ndarray) -> np.ndarray:
    x = y[:, :2]
    xi = y[:, 2:]
    c = speed(x)
    grad = speed.gradient(x)
    xi2 = np.sum(xi * xi, axis=1)
    dx = (c * c)[:, None] * xi
    dxi = -(c * xi2)[:, None] * grad
    return np.concatenate([dx, dxi], axis=1)


def _rk4(speed: SpeedField, y: np.ndarray, h) -> np.ndarray:
    """One classical RK4 step; h is a scalar or one step per row"""
    h = np.reshape(h, (-1, 1)) if np.ndim(h) else h
    k1 = _hamiltonian_rhs(speed, y)
    k2 = _hamiltonian_rhs(speed, y + 0.5 * h * k1)
    k3 = _hamiltonian_rhs(speed, y + 0.5 * h * k2)
    k4 = _hamiltonian_rhs(speed, y + h * k3)
    return y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def free_flight(speed: SpeedField, y0: np.ndarray, length: float, substeps: int = 4) -> np.ndarray:
    """Integrate rows of y0 over a signed g-length, ignoring the boundary"""
    y = np.atleast_2d(np.asarray(y0, dtype=float)).copy()
    h = length / substeps
    for _ in range(substeps):
        y = _rk4(speed, y, h)
    return y


def _bisect_crossing(metric: ConformalMetric, y_old: np.ndarray, step: float,
                     tol: float, max_iter: int = 80) -> Tuple[np.ndarray, np.ndarray]:
    phi = metric.domain.defining_function
    lo = np.zeros(len(y_old))
    hi = np.ones(len(y_old))
    mid = hi
    y_mid = _rk4(metric.speed, y_old, step)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        y_mid = _rk4(metric.speed, y_old, mid * step)
        value = phi(y_mid[:, :2])
        inside = value <= 0.0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
        if np.max(np.abs(value)) <= tol:
            break
    return mid, y_mid


def integrate_batch(metric: ConformalMetric, y0: np.ndarray, L_max: Optional[float] = None,
                    step: Optional[float] = None, record_paths: bool = False) -> Dict:
    """Integrate N rays at once until each leaves the domain or exhausts L_max.

    Returns a dict with exit states (nan rows for trapped rays), lengths
    (inf for trapped rays), the trapped mask, optional paths and the final
    unit-speed drift of each ray.
    """
    L_max = metric.L_max if L_max is None else L_max
    step = metric.step if step is None else step
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    n = len(y0)
    speed = metric.speed
    phi = metric.domain.defining_function

    start_phi = phi(y0[:, :2])
    if np.any(start_phi > START_TOL):
        bad = int(np.argmax(start_phi))
        raise OutsideDomainError(f"geodesic start {y0[bad, :2].tolist()} lies outside the domain (phi = {start_phi[bad]:.3e})")
    g_norm = speed(y0[:, :2]) * np.linalg.norm(y0[:, 2:], axis=1)
    if np.any(np.abs(g_norm - 1.0) > UNIT_SPEED_TOL):
        raise PreconditionError(f"start covectors must be g-unit within {UNIT_SPEED_TOL}, got |xi|_g = {g_norm.tolist()}")

    y = y0.copy()
    travelled = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    exit_state = np.full((n, 4), np.nan)
    exit_length = np.full(n, np.inf)
    paths = [[row.copy()] for row in y0] if record_paths else None

    max_steps = int(np.ceil(L_max / step - 1e-9))
    for k in range(max_steps):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        y_old = y[idx]
        y_new = _rk4(speed, y_old, step)
        if not np.all(np.isfinite(y_new)):
            raise NumericalAbortError("non-finite state in geodesic integration", step=k)

        crossed = phi(y_new[:, :2]) > 0.0
        if crossed.any():
            sub = idx[crossed]
            theta, y_cross = _bisect_crossing(metric, y_old[crossed], step, metric.bisection_tol)
            exit_state[sub] = y_cross
            exit_length[sub] = travelled[sub] + theta * step
            done[sub] = True
            if record_paths:
                for j, i in enumerate(sub):
                    paths[i].append(y_cross[j])

        keep = ~crossed
        y[idx[keep]] = y_new[keep]
        travelled[idx[keep]] += step
        if record_paths:
            for j in np.flatnonzero(keep):
                paths[idx[j]].append(y_new[j])

    trapped = ~done
    final = np.where(trapped[:, None], y, exit_state)
    drift = np.abs(speed(final[:, :2]) * np.linalg.norm(final[:, 2:], axis=1) - 1.0)
    scale = np.where(np.isfinite(exit_length), np.maximum(exit_length, 1.0), max(L_max, 1.0))
    if np.any(drift > UNIT_SPEED_TOL * scale):
        logger.warning(f"⚠️ Unit-speed drift up to {drift.max():.2e} exceeds {UNIT_SPEED_TOL:g} per unit length")

    return {
        "exit": exit_state,
        "length": exit_length,
        "trapped": trapped,
        "paths": [np.array(p) for p in paths] if record_paths else None,
        "drift": drift,
    }


def integrate_geodesic(metric: ConformalMetric, start: PhaseState, L_max: Optional[float] = None,
                       step: Optional[float] = None, record_path: bool = True) -> GeodesicResult:
    """Fixed-step RK4 geodesic from start until the boundary or L_max"""
    out = integrate_batch(metric, start.as_array()[None, :], L_max=L_max, step=step,
                          record_paths=record_path)
    trapped = bool(out["trapped"][0])
    exit_state = None if trapped else PhaseState.from_array(out["exit"][0])
    return GeodesicResult(
        path=out["paths"][0] if record_path else None,
        exit=exit_state,
        length=float(out["length"][0]),
        trapped=trapped,
        speed_drift=float(out["drift"][0]),
    )


def _richardson_step(speed: SpeedField, y: np.ndarray, h: float) -> Tuple[np.ndarray, float]:
    """Step-doubled RK4 with local extrapolation; returns (state, error estimate)"""
    full = _rk4(speed, y, h)
    half = _rk4(speed, _rk4(speed, y, 0.5 * h), 0.5 * h)
    err = float(np.max(np.abs(half - full))) / 15.0
    return half + (half - full) / 15.0, err


def integrate_geodesic_adaptive(metric: ConformalMetric, start: PhaseState,
                                L_max: Optional[float] = None, tol: float = 1e-10,
                                bisection_tol: float = 1e-14, initial_step: float = 1e-2,
                                max_step: float = 5e-2) -> GeodesicResult:
    """Adaptive step-doubling RK4 reference integrator for a single ray"""
    L_max = metric.L_max if L_max is None else L_max
    speed = metric.speed
    phi = metric.domain.defining_function
    y = start.as_array()[None, :]
    if phi(y[:, :2])[0] > START_TOL:
        raise OutsideDomainError(f"geodesic start {start.x.tolist()} lies outside the domain")

    t = 0.0
    h = initial_step
    steps = 0
    while t < L_max:
        h = min(h, max_step, L_max - t)
        y_new, err = _richardson_step(speed, y, h)
        if not np.all(np.isfinite(y_new)):
            raise NumericalAbortError("non-finite state in adaptive integration", step=steps)
        if err > tol and h > 1e-12:
            h *= float(np.clip(0.9 * (tol / err) ** 0.2, 0.2, 1.0))
            continue
        steps += 1
        if phi(y_new[:, :2])[0] > 0.0:
            lo, hi = 0.0, 1.0
            y_mid = y_new
            mid = 1.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                y_mid, _ = _richardson_step(speed, y, mid * h)
                value = phi(y_mid[:, :2])[0]
                if value <= 0.0:
                    lo = mid
                else:
                    hi = mid
                if abs(value) <= bisection_tol or hi - lo < 1e-16:
                    break
            exit_state = PhaseState.from_array(y_mid[0])
            drift = abs(exit_state.g_norm(speed) - 1.0)
            return GeodesicResult(path=None, exit=exit_state, length=t + mid * h, trapped=False,
                                  speed_drift=drift)
        y = y_new
        t += h
        growth = 2.0 if err == 0.0 else float(np.clip(0.9 * (tol / err) ** 0.2, 0.2, 2.0))
        h *= growth

    final = PhaseState.from_array(y[0])
    return GeodesicResult(path=None, exit=None, length=float("inf"), trapped=True,
                          speed_drift=abs(final.g_norm(speed) - 1.0))


def _record_from_exit(metric: ConformalMetric, entry: BoundaryPhase, exit_row: np.ndarray,
                      length: float, trapped: bool, path=None) -> LensRecord:
    if trapped:
        return LensRecord(entry=entry, exit=None, length=float("inf"), trapped=True, path=path)
    exit_bp = phase_to_boundary(metric, PhaseState.from_array(exit_row), side="outward")
    return LensRecord(entry=entry, exit=exit_bp, length=float(length), trapped=False, path=path)


def lens_map(metric: ConformalMetric, entry: BoundaryPhase, L_max: Optional[float] = None,
             record_path: bool = False) -> LensRecord:
    """Exit point/direction and g-length of the geodesic launched by entry"""
    if entry.side != "inward":
        raise PreconditionError(f"lens map entries must be inward, got side={entry.side!r}")
    start = boundary_phase_to_interior(metric, entry)
    result = integrate_geodesic(metric, start, L_max=L_max, record_path=record_path)
    exit_row = result.exit.as_array() if result.exit is not None else None
    return _record_from_exit(metric, entry, exit_row, result.length, result.trapped, result.path)


def lens_map_adaptive(metric: ConformalMetric, entry: BoundaryPhase, L_max: Optional[float] = None,
                      tol: float = 1e-10, bisection_tol: float = 1e-14) -> LensRecord:
    """lens_map computed with the adaptive reference integrator"""
    start = boundary_phase_to_interior(metric, entry)
    result = integrate_geodesic_adaptive(metric, start, L_max=L_max, tol=tol, bisection_tol=bisection_tol)
    exit_row = result.exit.as_array() if result.exit is not None else None
    return _record_from_exit(metric, entry, exit_row, result.length, result.trapped)


def _sweep_chunk(metric: ConformalMetric, s: np.ndarray, mu: np.ndarray, L_max: float) -> Dict:
    x, xi = _boundary_covectors(metric, s, mu, -np.ones(len(s)))
    return integrate_batch(metric, np.concatenate([x, xi], axis=1), L_max=L_max)


def lens_sweep(metric: ConformalMetric, probes: Sequence[BoundaryPhase], L_max: Optional[float] = None,
               jobs: int = 1) -> SweepResult:
    """Lens records for many entries, in input order, plus the largest finite length"""
    L_max = metric.L_max if L_max is None else L_max
    logger.info(f"🚀 Lens sweep over {len(probes)} probes (L_max={L_max:g}, step={metric.step:g}, jobs={jobs})")

    errors: Dict[int, str] = {}
    valid: List[int] = []
    for i, bp in enumerate(probes):
        try:
            if bp.side != "inward":
                raise PreconditionError(f"lens map entries must be inward, got side={bp.side!r}")
            check_non_glancing(bp.mu)
            valid.append(i)
        except PreconditionError as e:
            errors[i] = str(e)
            logger.error(f"❌ Probe {i} (s={bp.s:.6g}, mu={bp.mu:.6g}) rejected: {e}")

    s = np.array([probes[i].s for i in valid], dtype=float)
    mu = np.array([probes[i].mu for i in valid], dtype=float)
    exits = np.full((len(valid), 4), np.nan)
    lengths = np.full(len(valid), np.inf)
    trapped = np.zeros(len(valid), dtype=bool)

    if valid:
        chunks = np.array_split(np.arange(len(valid)), max(1, min(jobs, len(valid))))
        if jobs > 1 and len(chunks) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_sweep_chunk, metric, s[c], mu[c], L_max) for c in chunks]
                outputs = [f.result() for f in futures]
        else:
            outputs = [_sweep_chunk(metric, s[c], mu[c], L_max) for c in chunks]
        for c, out in zip(chunks, outputs):
            exits[c] = out["exit"]
            lengths[c] = out["length"]
            trapped[c] = out["trapped"]

    records: List[LensRecord] = []
    position = {i: j for j, i in enumerate(valid)}
    for i, bp in enumerate(probes):
        if i in errors:
            records.append(LensRecord(entry=bp, exit=None, length=float("nan"), trapped=False, error=errors[i]))
            continue
        j = position[i]
        records.append(_record_from_exit(metric, bp, exits[j], lengths[j], bool(trapped[j])))

    finite = [r.length for r in records if r.error is None and not r.trapped]
    T0 = float(max(finite)) if finite else float("nan")
    result = SweepResult(records=records, T0_estimate=T0, errors=errors)
    logger.info(f"📊 Sweep done: T0 estimate {T0:.6g}, {len(result.trapped)} trapped, {len(errors)} rejected")
    return result


def disk_lens_closed_form(s, mu, radius: float = 1.0, speed: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Exit arclength and length of chords in a disk with constant speed"""
    s = np.asarray(s, dtype=float)
    mu = np.asarray(mu, dtype=float)
    s_out = np.mod(s + radius * (np.pi - 2.0 * np.arcsin(mu)), 2.0 * np.pi * radius)
    length = 2.0 * radius * np.sqrt(1.0 - mu * mu) / speed
    return s_out, length


def angular_momentum(y: np.ndarray, center=(0.0, 0.0)) -> np.ndarray:
    """x1 xi2 - x2 xi1 about center, for rows of phase states"""
    y = np.atleast_2d(y)
    d = y[:, :2] - np.asarray(center, dtype=float)
    return d[:, 0] * y[:, 3] - d[:, 1] * y[:, 2]


def travel_time_lower_bound(metric: ConformalMetric, x, y, c_max: Optional[float] = None) -> np.ndarray:
    """|x - y| / max c: no g-curve joining x and y is shorter"""
    if c_max is None:
        _, c_max = metric.speed.bounds(metric.domain)
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    return np.linalg.norm(d, axis=-1) / c_max
