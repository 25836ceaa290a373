"""
Semiclassical probing of the DN map.

Coherent states on the boundary cylinder (t, s) are injected as Dirichlet
data, the outgoing wavefront is located in the DN trace, and its arrival
time, exit point and tangential frequency give an estimate of the lens
data. The separation test compares the traces of two speeds that agree
near the boundary.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

from .domain import Domain, RectangleDomain
from .errors import (
    NoArrivalError,
    ObservationWindowError,
    PreconditionError,
    ResolutionError,
    SupportLeakError,
)
from .geometry import (
    GLANCING_LIMIT,
    BoundaryPhase,
    ConformalMetric,
    LensRecord,
    check_non_glancing,
    lens_map,
)
from .speed import SpeedField, require_collar_equal
from .wave import BoundarySignal, DNTrace, WaveGrid, fit_rectangle_spacing, solve_ibvp

logger = logging.getLogger(__name__)

POINTS_PER_WAVELENGTH = 20
SAMPLING_POINTS = 10
CUTOFF_FACTOR = 4.0
DETECTION_FACTOR = 5.0
RELATIVE_FLOOR = 0.05
AMBIGUITY_RATIO = 0.5
DISTINCT_FRACTION = 0.9
CONSISTENT_FRACTION = 0.1

VERDICT_COLUMNS = ["s_in", "mu_in", "h", "normA2", "normB2", "diff2", "defect", "verdict"]


def smooth_cutoff(r) -> np.ndarray:
    """C^2 radial cutoff: 1 on [0, 1/2], 0 on [1, inf), quintic smoothstep between"""
    x = np.clip(2.0 * np.asarray(r, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - x ** 3 * (10.0 - 15.0 * x + 6.0 * x ** 2)


def default_cutoff_radius(h: float) -> float:
    return CUTOFF_FACTOR * np.sqrt(h)


def solver_dx(h: float, c_min: float = 1.0, points_per_wavelength: int = POINTS_PER_WAVELENGTH) -> float:
    """Grid step resolving the shortest wavelength 2*pi*h*c_min"""
    return 2.0 * np.pi * h * min(c_min, 1.0) / points_per_wavelength


@dataclass
class CoherentParams:
    h: float
    t0: float
    s0: float
    tau0: float = -1.0
    xi0: float = 0.0
    r_c: Optional[float] = None
    n: int = 2

    def __post_init__(self):
        if not self.h > 0:
            raise PreconditionError(f"h must be positive, got {self.h}")
        if self.r_c is None:
            self.r_c = default_cutoff_radius(self.h)
        if self.r_c < default_cutoff_radius(self.h) * (1.0 - 1e-12):
            raise PreconditionError(f"cutoff radius {self.r_c:.4g} below 4*sqrt(h) = {default_cutoff_radius(self.h):.4g}")
        if abs(self.xi0) > GLANCING_LIMIT:
            raise PreconditionError(f"|xi0| = {abs(self.xi0):.4g} exceeds the glancing margin {GLANCING_LIMIT}")


@dataclass
class WavefrontDetection:
    t1: float
    s1: float
    xi: float
    amplitude: float
    window: Tuple[float, float]

    def to_dict(self) -> Dict:
        return {"t1": self.t1, "s1": self.s1, "xi": self.xi, "amplitude": self.amplitude,
                "window": list(self.window)}


@dataclass
class LensEstimate:
    record: LensRecord
    detections: List[WavefrontDetection]
    ambiguous: bool
    trace: Optional[DNTrace] = None

    @property
    def length(self) -> float:
        return self.record.length


@dataclass
class SeparationVerdict:
    s_in: float
    mu_in: float
    h: float
    normA2: float
    normB2: float
    diff2: float
    defect: float
    verdict: str
    probe_side_diff: float = 0.0
    extra: Dict = field(default_factory=dict)

    def to_row(self) -> Dict:
        return {c: getattr(self, c) for c in VERDICT_COLUMNS}


def _check_sampling(step: float, h: float, what: str) -> None:
    limit = 2.0 * np.pi * h / SAMPLING_POINTS
    if step > limit * (1.0 + 1e-9):
        raise ResolutionError(
            f"{what} step {step:.4g} does not resolve the wavelength 2*pi*h = {2 * np.pi * h:.4g} "
            f"(needs <= {limit:.4g}, {SAMPLING_POINTS} points per oscillation)"
        )


def coherent_state(p: CoherentParams, t: np.ndarray, s: np.ndarray,
                   period: Optional[float] = None) -> np.ndarray:
    """Samples of h (pi h)^(-n/4) exp((i/h)(z - z0).zeta0 - |z - z0|^2 / (2h)) times the cutoff"""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if len(t) > 1:
        _check_sampling(float(t[1] - t[0]), p.h, "time")
    if len(s) > 1:
        _check_sampling(float(s[1] - s[0]), p.h, "boundary")
    dt = t[:, None] - p.t0
    ds = s[None, :] - p.s0
    if period is not None:
        ds = np.mod(ds + 0.5 * period, period) - 0.5 * period
    r2 = dt ** 2 + ds ** 2
    amplitude = p.h * (np.pi * p.h) ** (-p.n / 4.0)
    phase = (dt * p.tau0 + ds * p.xi0) / p.h
    return amplitude * np.exp(1j * phase - r2 / (2.0 * p.h)) * smooth_cutoff(np.sqrt(r2) / p.r_c)


def boundary_probe(bp: BoundaryPhase, h: float, eps: float, grid: WaveGrid,
                   speed: Optional[SpeedField] = None, r_c: Optional[float] = None,
                   arc: Optional[Tuple[float, float]] = None) -> BoundarySignal:
    """Re F centered at (eps/2, s0) with frequency (-1, mu / c(x(s0))), supported in (eps/4, 3eps/4)"""
    check_non_glancing(bp.mu)
    if bp.side != "inward":
        raise PreconditionError("boundary probes launch inward directions")
    r_c = default_cutoff_radius(h) if r_c is None else r_c
    if r_c > 0.25 * eps * (1.0 + 1e-12):
        raise SupportLeakError(
            f"cutoff radius {r_c:.4g} exceeds eps/4 = {0.25 * eps:.4g}: probe support leaks outside (0, eps)"
        )
    domain = grid.domain
    if arc is not None:
        center, half_width = arc
        offset = abs(float(domain.arc_difference(bp.s, center)))
        if offset + r_c > half_width:
            raise SupportLeakError(
                f"probe support [s0 - r_c, s0 + r_c] leaves Gamma_1 (center {center:g}, half-width {half_width:g})"
            )
    _check_sampling(grid.boundary_spacing, h, "boundary")
    c_b = float(speed(domain.boundary_point(bp.s))) if speed is not None else 1.0
    params = CoherentParams(h=h, t0=0.5 * eps, s0=bp.s, tau0=-1.0, xi0=bp.mu / c_b, r_c=r_c)

    n_t = min(int(np.ceil(eps / grid.dt)) + 1, grid.n_steps + 1)
    t = grid.dt * np.arange(n_t)
    values = coherent_state(params, t, grid.s, period=domain.length).real
    return BoundarySignal(values, grid.dt, grid.s.copy(), domain.length,
                          label=f"probe(s={bp.s:.6g},mu={bp.mu:.6g},h={h:g})")


def _log_parabola(left: float, mid: float, right: float) -> float:
    """Vertex offset (in samples) of the parabola through log-amplitudes"""
    tiny = 1e-300
    a, b, c = np.log(max(left, tiny)), np.log(max(mid, tiny)), np.log(max(right, tiny))
    denom = a - 2.0 * b + c
    if denom >= 0.0:
        return 0.0
    return float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))


def gabor_peak(values: np.ndarray, dt: float, ds: float, it: int, js: int, h: float,
               periodic: bool = True) -> Tuple[float, float]:
    """Peak (omega, k) of the Gaussian-windowed spectrum around sample (it, js), restricted to omega < 0"""
    n_t, n_s = values.shape
    half_t = int(np.ceil(3.0 * np.sqrt(h) / dt))
    half_s = int(np.ceil(3.0 * np.sqrt(h) / ds))
    rows = np.arange(max(it - half_t, 0), min(it + half_t, n_t - 1) + 1)
    offsets = np.arange(-half_s, half_s + 1)
    if periodic:
        cols = np.mod(js + offsets, n_s)
    else:
        keep = (js + offsets >= 0) & (js + offsets < n_s)
        offsets = offsets[keep]
        cols = js + offsets
    tt = (rows - it) * dt
    ss = offsets * ds
    window = np.exp(-(tt[:, None] ** 2 + ss[None, :] ** 2) / (2.0 * h))
    patch = values[np.ix_(rows, cols)] * window

    n_freq_t = 1 << int(np.ceil(np.log2(8 * len(rows))))
    n_freq_s = 1 << int(np.ceil(np.log2(8 * len(cols))))
    spectrum = np.abs(sp_fft.fft2(patch, s=(n_freq_t, n_freq_s)))
    omega = 2.0 * np.pi * sp_fft.fftfreq(n_freq_t, dt)
    k = 2.0 * np.pi * sp_fft.fftfreq(n_freq_s, ds)
    spectrum[omega >= 0.0, :] = 0.0

    a, b = np.unravel_index(int(np.argmax(spectrum)), spectrum.shape)
    da = _log_parabola(spectrum[(a - 1) % n_freq_t, b], spectrum[a, b], spectrum[(a + 1) % n_freq_t, b])
    db = _log_parabola(spectrum[a, (b - 1) % n_freq_s], spectrum[a, b], spectrum[a, (b + 1) % n_freq_s])
    d_omega = 2.0 * np.pi / (n_freq_t * dt)
    d_k = 2.0 * np.pi / (n_freq_s * ds)
    return float(omega[a] + da * d_omega), float(k[b] + db * d_k)


def locate_wavefront(trace: DNTrace, exclusion: Tuple[float, float], h: float,
                     t_max: Optional[float] = None) -> List[WavefrontDetection]:
    """Outgoing wavefronts in |Lambda f|^2 after the exclusion window, strongest first"""
    t = trace.times
    t_lo = exclusion[1]
    t_hi = t[-1] if t_max is None else min(t_max, t[-1])
    rows = np.flatnonzero((t > t_lo) & (t <= t_hi + 1e-12))
    if rows.size < 3:
        return []
    block = trace.values[rows]
    energy = block ** 2
    if not np.any(energy > 0.0):
        return []

    sigma = np.sqrt(h)
    sigma_t = sigma / trace.dt
    sigma_s = sigma / trace.ds
    smoothed = ndimage.gaussian_filter(energy, sigma=(sigma_t, sigma_s), mode=("nearest", "wrap"))
    peak = float(smoothed.max())
    if peak <= 0.0:
        return []
    threshold = max(DETECTION_FACTOR * float(np.median(smoothed)), RELATIVE_FLOOR * peak)

    size = (2 * int(np.ceil(3.0 * sigma / trace.dt)) + 1, 2 * int(np.ceil(3.0 * sigma / trace.ds)) + 1)
    local_max = ndimage.maximum_filter(smoothed, size=size, mode=("nearest", "wrap"))
    candidates = np.argwhere((smoothed == local_max) & (smoothed > threshold))

    edge = int(np.ceil(2.0 * sigma_t))
    window = (float(t[rows[0]]), float(t[rows[-1]]))
    n_rows, n_s = smoothed.shape
    detections: List[WavefrontDetection] = []
    for i, j in candidates:
        if i < edge or i > n_rows - 1 - edge:
            continue
        di = _log_parabola(smoothed[i - 1, j], smoothed[i, j], smoothed[i + 1, j])
        dj = _log_parabola(smoothed[i, (j - 1) % n_s], smoothed[i, j], smoothed[i, (j + 1) % n_s])
        t1 = float(t[rows[i]] + di * trace.dt)
        s1 = float(np.mod(trace.s[j] + dj * trace.ds, trace.period))
        _, k = gabor_peak(block, trace.dt, trace.ds, int(i), int(j), h)
        detections.append(WavefrontDetection(t1=t1, s1=s1, xi=h * k, amplitude=float(smoothed[i, j]),
                                             window=window))
    detections.sort(key=lambda d: -d.amplitude)
    logger.debug(f"Detected {len(detections)} wavefronts above threshold {threshold:.3e}")
    return detections


def probe_spacing(domain: Domain, speeds, h: float,
                  points_per_wavelength: int = POINTS_PER_WAVELENGTH) -> float:
    """Grid step for h on every given speed; on rectangles shrunk until both sides hold whole cells"""
    c_min = min([sp.bounds(domain)[0] for sp in speeds] or [1.0])
    dx = solver_dx(h, c_min, points_per_wavelength)
    if isinstance(domain, RectangleDomain):
        dx = fit_rectangle_spacing(domain, dx)
    return dx


def probe_grid(domain: Domain, speeds, h: float, T: float,
               points_per_wavelength: int = POINTS_PER_WAVELENGTH, dt: Optional[float] = None,
               trace_stride: int = 2) -> WaveGrid:
    """Wave grid meeting the resolution rule for h on every given speed"""
    dx = probe_spacing(domain, speeds, h, points_per_wavelength)
    return WaveGrid.build(domain, dx, T, speeds=speeds, dt=dt, trace_stride=trace_stride)


def first_arrival(detections: List[WavefrontDetection]) -> Tuple[Optional[WavefrontDetection], bool]:
    """Earliest detection of comparable amplitude to the strongest, and whether others compete"""
    if not detections:
        return None, False
    strongest = detections[0].amplitude
    comparable = [d for d in detections if d.amplitude >= AMBIGUITY_RATIO * strongest]
    chosen = min(comparable, key=lambda d: d.t1)
    return chosen, len(comparable) > 1


def extract_lens(speed: SpeedField, bp: BoundaryPhase, h: float, eps: float, grid: WaveGrid,
                 T: Optional[float] = None, trace: Optional[DNTrace] = None,
                 keep_trace: bool = False) -> LensEstimate:
    """Lens data of bp read off the DN response to the coherent probe at bp"""
    T = grid.T if T is None else T
    if T > grid.T + 1e-9:
        raise PreconditionError(f"observation time T={T:g} exceeds the grid horizon {grid.T:g}")
    if trace is None:
        f = boundary_probe(bp, h, eps, grid, speed=speed)
        trace, _ = solve_ibvp(speed, f, grid)
    detections = locate_wavefront(trace, (0.0, eps), h, t_max=T)
    chosen, ambiguous = first_arrival(detections)
    if chosen is None:
        raise NoArrivalError(
            f"no wavefront in ({eps:g}, {T:g}) for probe s={bp.s:.6g}, mu={bp.mu:.6g}: possibly trapped or T too small"
        )
    c_exit = float(speed(grid.domain.boundary_point(chosen.s1)))
    exit_bp = BoundaryPhase(s=chosen.s1, mu=c_exit * chosen.xi, side="outward")
    record = LensRecord(entry=bp, exit=exit_bp, length=chosen.t1 - 0.5 * eps, trapped=False)
    if ambiguous:
        logger.warning(f"⚠️ Ambiguous arrival for probe s={bp.s:.4g}, mu={bp.mu:.4g}: {len(detections)} detections")
    return LensEstimate(record=record, detections=detections, ambiguous=ambiguous,
                        trace=trace if keep_trace else None)


def observation_window(reference: ConformalMetric, entry: BoundaryPhase, eps: float, h: float,
                       interior_bounds: Tuple[float, float]) -> Tuple[float, float]:
    """Bracket T after the first exit and before the second reflection.

    The reference metric carries the speed known on the collar; interior
    speeds are only known to lie in interior_bounds = (c_lo, c_hi).
    """
    c_lo, c_hi = interior_bounds
    if not 0 < c_lo <= c_hi:
        raise PreconditionError(f"interior speed bounds must satisfy 0 < c_lo <= c_hi, got {interior_bounds}")
    first = lens_map(reference, entry)
    if first.trapped:
        raise ObservationWindowError(f"reference geodesic from s={entry.s:.4g}, mu={entry.mu:.4g} is trapped")
    reflected = BoundaryPhase(s=first.exit.s, mu=float(np.clip(first.exit.mu, -GLANCING_LIMIT, GLANCING_LIMIT)))
    second = lens_map(reference, reflected)
    c_ref = float(reference.speed(reference.domain.boundary_point(entry.s)))
    leg1 = first.length * c_ref
    leg2 = (second.length if not second.trapped else first.length) * c_ref
    spread = 3.0 * np.sqrt(h)
    t_lo = 0.5 * eps + leg1 / c_lo + spread
    t_hi = 0.5 * eps + (leg1 + leg2) / c_hi - spread
    if not t_lo < t_hi:
        raise ObservationWindowError(
            f"empty observation window for s={entry.s:.4g}, mu={entry.mu:.4g}: first exit by {t_lo:.4g}, "
            f"second reflection from {t_hi:.4g}"
        )
    return float(t_lo), float(t_hi)


def classify(normA2: float, normB2: float, diff2: float) -> str:
    if diff2 >= DISTINCT_FRACTION * (normA2 + normB2) and diff2 > 0.0:
        return "lens-distinct"
    if diff2 <= CONSISTENT_FRACTION * max(normA2, normB2):
        return "lens-consistent"
    return "inconclusive"


def separation_test(speed_a: SpeedField, speed_b: SpeedField, bp: BoundaryPhase, h: float, eps: float,
                    T: Optional[float], grid: WaveGrid,
                    traces: Optional[Tuple[DNTrace, DNTrace]] = None) -> SeparationVerdict:
    """Compare ||Lambda_A f||^2, ||Lambda_B f||^2 and ||(Lambda_A - Lambda_B) f||^2 over (eps, T)"""
    require_collar_equal(speed_a, speed_b, grid.domain)
    T = grid.T if T is None else T
    if traces is None:
        f = boundary_probe(bp, h, eps, grid, speed=speed_a)
        trace_a, _ = solve_ibvp(speed_a, f, grid)
        if speed_b.fingerprint == speed_a.fingerprint:
            trace_b = trace_a
        else:
            trace_b, _ = solve_ibvp(speed_b, f, grid)
    else:
        trace_a, trace_b = traces

    window = (eps, T)
    normA2 = trace_a.squared_norm(window)
    normB2 = trace_b.squared_norm(window)
    difference = trace_a - trace_b
    diff2 = difference.squared_norm(window)
    probe_side = difference.l2_norm((0.0, 0.5 * eps))
    defect = abs(diff2 - normA2 - normB2)
    verdict = classify(normA2, normB2, diff2)
    logger.info(f"📊 Probe s={bp.s:.4g} mu={bp.mu:.4g} h={h:g}: diff2/sum = "
                f"{diff2 / max(normA2 + normB2, 1e-300):.3f} -> {verdict}")
    return SeparationVerdict(s_in=bp.s, mu_in=bp.mu, h=h, normA2=normA2, normB2=normB2, diff2=diff2,
                             defect=defect, verdict=verdict, probe_side_diff=probe_side)
