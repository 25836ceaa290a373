import numpy as np
import pytest

from simulation.analysis import ExperimentConfig, run_theorem31_experiment
from simulation.domain import DiskDomain, RectangleDomain
from simulation.errors import (
    NoArrivalError,
    ObservationWindowError,
    PreconditionError,
    ResolutionError,
    SupportLeakError,
)
from simulation.geometry import BoundaryPhase, ConformalMetric, disk_lens_closed_form, lens_map
from simulation.probe import (
    CoherentParams,
    WavefrontDetection,
    boundary_probe,
    classify,
    coherent_state,
    default_cutoff_radius,
    extract_lens,
    first_arrival,
    gabor_peak,
    locate_wavefront,
    observation_window,
    probe_grid,
    probe_spacing,
    separation_test,
    smooth_cutoff,
    solver_dx,
)
from simulation.speed import SpeedField
from simulation.wave import DNTrace

UNIT = SpeedField.constant(1.0)
BUMP = {"sum": [{"const": 1.0}, {"bump": {"amp": -0.4, "radius": 0.5}}]}


def test_smooth_cutoff_profile():
    r = np.array([0.0, 0.25, 0.5, 1.0, 2.0])
    assert smooth_cutoff(r) == pytest.approx([1.0, 1.0, 1.0, 0.0, 0.0])
    inner = smooth_cutoff(np.linspace(0.5, 1.0, 51))
    assert np.all(np.diff(inner) <= 0.0)
    # flat to second order at both ends of the transition
    step = 1e-4
    assert (smooth_cutoff(0.5 + step) - 1.0) / step == pytest.approx(0.0, abs=1e-6)
    assert smooth_cutoff(1.0 - step) / step == pytest.approx(0.0, abs=1e-6)


def test_resolution_rule_constants():
    assert default_cutoff_radius(0.01) == pytest.approx(0.4)
    assert solver_dx(0.01) == pytest.approx(2 * np.pi * 0.01 / 20)
    assert solver_dx(0.01, c_min=0.5) == pytest.approx(np.pi * 0.01 / 20)
    assert solver_dx(0.01, c_min=3.0) == pytest.approx(solver_dx(0.01))


def test_coherent_params_validation():
    with pytest.raises(PreconditionError):
        CoherentParams(h=0.0, t0=1.0, s0=0.0)
    with pytest.raises(PreconditionError, match="cutoff radius"):
        CoherentParams(h=0.01, t0=1.0, s0=0.0, r_c=0.2)
    with pytest.raises(PreconditionError, match="glancing"):
        CoherentParams(h=0.01, t0=1.0, s0=0.0, xi0=0.999)
    assert CoherentParams(h=0.01, t0=1.0, s0=0.0).r_c == pytest.approx(0.4)


def test_coherent_state_peaks_at_center_and_rejects_coarse_sampling():
    p = CoherentParams(h=0.01, t0=1.0, s0=0.5, xi0=0.3)
    t = np.arange(0.0, 2.0, 0.005)
    s = np.arange(0.0, 1.0, 0.005)
    values = coherent_state(p, t, s)
    it, js = np.unravel_index(np.argmax(np.abs(values)), values.shape)
    assert t[it] == pytest.approx(1.0, abs=0.005)
    assert s[js] == pytest.approx(0.5, abs=0.005)
    assert np.abs(values).max() == pytest.approx(0.01 * (np.pi * 0.01) ** -0.5, rel=1e-3)
    with pytest.raises(ResolutionError, match="wavelength"):
        coherent_state(p, np.arange(0.0, 2.0, 0.05), s)


@pytest.fixture(scope="module")
def fine_disk_grid():
    return probe_grid(DiskDomain(), [UNIT], h=0.01, T=1.7)


def test_boundary_probe_support_stays_inside_half_window(fine_disk_grid):
    eps = 1.6
    f = boundary_probe(BoundaryPhase(0.0, 0.3), 0.01, eps, fine_disk_grid, speed=UNIT)
    t = f.dt * np.arange(f.values.shape[0])
    active = np.any(f.values != 0.0, axis=1)
    assert active.any()
    assert t[active].min() > 0.25 * eps
    assert t[active].max() < 0.75 * eps
    period = fine_disk_grid.domain.length
    offsets = np.abs(np.mod(f.s + 0.5 * period, period) - 0.5 * period)
    assert offsets[np.any(f.values != 0.0, axis=0)].max() < default_cutoff_radius(0.01)


def test_boundary_probe_rejects_support_leak(fine_disk_grid):
    with pytest.raises(SupportLeakError, match="eps/4"):
        boundary_probe(BoundaryPhase(0.0, 0.0), 0.01, 1.2, fine_disk_grid)
    with pytest.raises(SupportLeakError, match="Gamma_1"):
        boundary_probe(BoundaryPhase(0.0, 0.0), 0.01, 1.6, fine_disk_grid, arc=(0.0, 0.3))


def test_boundary_probe_rejects_glancing_and_outward(fine_disk_grid):
    with pytest.raises(PreconditionError):
        boundary_probe(BoundaryPhase(0.0, 0.999), 0.01, 1.6, fine_disk_grid)
    with pytest.raises(PreconditionError, match="inward"):
        boundary_probe(BoundaryPhase(0.0, 0.3, "outward"), 0.01, 1.6, fine_disk_grid)


def _synthetic_trace(packets, h=0.01, dt=0.005, T=3.0, n_s=1024):
    period = 2 * np.pi
    t = dt * np.arange(int(round(T / dt)) + 1)
    s = period * np.arange(n_s) / n_s
    values = np.zeros((len(t), n_s))
    for t1, s1, xi, amp in packets:
        tt = t[:, None] - t1
        ss = np.mod(s[None, :] - s1 + 0.5 * period, period) - 0.5 * period
        values += amp * np.cos((-tt + xi * ss) / h) * np.exp(-(tt ** 2 + ss ** 2) / (2 * h))
    return DNTrace(values, dt, s, period)


def test_locate_wavefront_recovers_packet_parameters():
    trace = _synthetic_trace([(2.0, 1.0, 0.4, 1.0)])
    detections = locate_wavefront(trace, (0.0, 0.5), h=0.01)
    assert len(detections) == 1
    d = detections[0]
    assert d.t1 == pytest.approx(2.0, abs=0.02)
    assert d.s1 == pytest.approx(1.0, abs=0.02)
    assert d.xi == pytest.approx(0.4, abs=0.05)
    assert d.window[0] > 0.5


def test_gabor_peak_reads_negative_frequency_branch():
    trace = _synthetic_trace([(1.5, 3.0, -0.6, 1.0)])
    it = int(round(1.5 / trace.dt))
    js = int(round(3.0 / trace.ds))
    omega, k = gabor_peak(trace.values, trace.dt, trace.ds, it, js, h=0.01)
    assert omega < 0
    assert omega * 0.01 == pytest.approx(-1.0, abs=0.05)
    assert k * 0.01 == pytest.approx(-0.6, abs=0.05)


def test_packets_inside_exclusion_are_ignored():
    trace = _synthetic_trace([(0.8, 1.0, 0.0, 1.0)])
    assert locate_wavefront(trace, (0.0, 1.5), h=0.01) == []
    assert locate_wavefront(_synthetic_trace([]), (0.0, 0.5), h=0.01) == []


def _detection(t1, amplitude):
    return WavefrontDetection(t1=t1, s1=0.0, xi=0.0, amplitude=amplitude, window=(0.0, 3.0))


def test_first_arrival_prefers_earliest_comparable_front():
    strong_late = _detection(2.5, 1.0)
    weak_early = _detection(1.8, 0.1)
    comparable_early = _detection(2.0, 0.6)
    chosen, ambiguous = first_arrival([strong_late, comparable_early, weak_early])
    assert chosen is comparable_early
    assert ambiguous
    chosen, ambiguous = first_arrival([strong_late, weak_early])
    assert chosen is strong_late
    assert not ambiguous
    assert first_arrival([]) == (None, False)


@pytest.mark.parametrize("normA2, normB2, diff2, verdict", [
    (1.0, 1.0, 1.9, "lens-distinct"),
    (1.0, 1.0, 0.05, "lens-consistent"),
    (1.0, 1.0, 1.0, "inconclusive"),
    (0.0, 0.0, 0.0, "lens-consistent"),
])
def test_classify_thresholds(normA2, normB2, diff2, verdict):
    assert classify(normA2, normB2, diff2) == verdict


def test_observation_window_for_unit_disk():
    reference = ConformalMetric(DiskDomain(), UNIT)
    t_lo, t_hi = observation_window(reference, BoundaryPhase(0.0, 0.0), eps=0.6, h=0.01,
                                    interior_bounds=(1.0, 1.0))
    # first exit after a diameter, second reflection after two
    assert t_lo == pytest.approx(0.3 + 2.0 + 0.3, abs=1e-6)
    assert t_hi == pytest.approx(0.3 + 4.0 - 0.3, abs=1e-6)


def test_observation_window_empty_when_bounds_too_loose():
    reference = ConformalMetric(DiskDomain(), UNIT)
    with pytest.raises(ObservationWindowError, match="empty"):
        observation_window(reference, BoundaryPhase(0.0, 0.0), eps=0.6, h=0.01, interior_bounds=(0.5, 1.0))
    with pytest.raises(PreconditionError):
        observation_window(reference, BoundaryPhase(0.0, 0.0), eps=0.6, h=0.01, interior_bounds=(1.0, 0.5))


def test_extract_lens_without_arrival_raises(fine_disk_grid):
    silent = _synthetic_trace([])
    with pytest.raises(NoArrivalError, match="T too small"):
        extract_lens(UNIT, BoundaryPhase(0.0, 0.0), 0.01, 1.6, fine_disk_grid, trace=silent)


@pytest.mark.slow
def test_extract_lens_matches_disk_geodesics():
    grid = probe_grid(DiskDomain(), [UNIT], h=0.01, T=3.2)
    for mu in (0.0, 0.5, -0.5):
        bp = BoundaryPhase(0.0, mu)
        estimate = extract_lens(UNIT, bp, 0.01, 1.6, grid)
        s_out, length = disk_lens_closed_form(np.array([0.0]), np.array([mu]))
        assert abs(estimate.length - length[0]) < 0.05
        assert abs(grid.domain.arc_difference(estimate.record.exit.s, s_out[0])) < 0.05
        assert estimate.record.exit.mu == pytest.approx(mu, abs=0.05)


@pytest.mark.slow
def test_separation_distinguishes_crossing_from_missing_probes():
    speed_a = SpeedField.constant(1.0, collar_width=0.3)
    speed_b = SpeedField.from_config(BUMP, collar_width=0.3)
    grid = probe_grid(DiskDomain(), [speed_a, speed_b], h=0.02, T=4.3)
    crossing = separation_test(speed_a, speed_b, BoundaryPhase(0.0, 0.0), 0.02, 2.4, 4.3, grid)
    assert crossing.verdict != "lens-consistent"
    assert crossing.diff2 >= 0.5 * (crossing.normA2 + crossing.normB2)
    missing = separation_test(speed_a, speed_b, BoundaryPhase(0.0, 0.9), 0.02, 2.4, 4.3, grid)
    assert missing.verdict == "lens-consistent"
    assert missing.probe_side_diff <= 1e-3 * np.sqrt(missing.normA2)


def test_coherent_state_norm_and_concentration():
    h = 0.01
    p = CoherentParams(h=h, t0=1.0, s0=1.0, xi0=0.4)
    step = 0.004
    t = np.arange(0.0, 2.0, step)
    s = np.arange(0.0, 2.0, step)
    density = np.abs(coherent_state(p, t, s)) ** 2
    total = density.sum() * step ** 2
    assert np.sqrt(total) == pytest.approx(h, rel=0.02)
    r = np.hypot(t[:, None] - 1.0, s[None, :] - 1.0)
    assert density[r <= 3.0 * np.sqrt(h)].sum() * step ** 2 >= 0.99 * total


def test_probe_spacing_fits_rectangles():
    tall = RectangleDomain(1.0, 2.0)
    dx = probe_spacing(tall, [UNIT], 0.01)
    assert dx <= solver_dx(0.01)
    assert round(1.0 / dx) * dx == pytest.approx(1.0)
    assert round(2.0 / dx) * dx == pytest.approx(2.0)
    assert probe_spacing(DiskDomain(), [UNIT], 0.01) == pytest.approx(solver_dx(0.01))
    with pytest.raises(PreconditionError, match="no common cell size"):
        probe_spacing(RectangleDomain(1.0, np.sqrt(2.0)), [UNIT], 0.01)


def test_weak_fronts_below_the_relative_floor_are_dropped():
    strong = (1.5, 1.0, 0.0, 1.0)
    faint = locate_wavefront(_synthetic_trace([strong, (2.5, 4.0, 0.0, 0.15)]), (0.0, 0.5), h=0.01)
    assert [d.s1 for d in faint] == pytest.approx([1.0], abs=0.02)
    visible = locate_wavefront(_synthetic_trace([strong, (2.5, 4.0, 0.0, 0.4)]), (0.0, 0.5), h=0.01)
    assert len(visible) == 2
    assert visible[1].t1 == pytest.approx(2.5, abs=0.02)


@pytest.mark.slow
def test_boundary_probe_h1_norm_is_uniform_in_h():
    bp = BoundaryPhase(0.5, 0.3)
    norms = []
    for h in (0.02, 0.01, 0.005):
        grid = probe_grid(RectangleDomain(), [UNIT], h=h, T=2.4)
        norms.append(boundary_probe(bp, h, 2.4, grid, speed=UNIT).h1_norm())
    # Re of a unit-frequency packet carries half of |zeta|^2 = 1 + mu^2
    assert norms == pytest.approx([np.sqrt(0.5 * (1 + 0.3 ** 2))] * 3, rel=0.1)
    assert max(norms) / min(norms) <= 1.1


@pytest.mark.slow
def test_extract_lens_matches_geodesics_through_a_fast_bump():
    speed = SpeedField.from_config({"sum": [{"const": 1.0}, {"bump": {"amp": 0.2, "radius": 0.5}}]})
    metric = ConformalMetric(DiskDomain(), speed)
    grid = probe_grid(DiskDomain(), [speed], h=0.01, T=3.2)
    for mu in (0.0, 0.4):
        bp = BoundaryPhase(0.0, mu)
        oracle = lens_map(metric, bp)
        estimate = extract_lens(speed, bp, 0.01, 1.6, grid)
        assert estimate.length == pytest.approx(oracle.length, rel=0.05)
        assert abs(grid.domain.arc_difference(estimate.record.exit.s, oracle.exit.s)) < 0.05


@pytest.mark.slow
def test_separation_sharpens_as_h_shrinks(tmp_path):
    cfg = ExperimentConfig(
        domain=DiskDomain(),
        speed_a=SpeedField.constant(1.0, collar_width=0.3),
        speed_b=SpeedField.from_config(BUMP, collar_width=0.3),
        probes=[BoundaryPhase(0.0, 0.0)],
        h_schedule=[0.02, 0.01],
        eps=2.4,
        T=4.3,
        output_dir=tmp_path,
    )
    report = run_theorem31_experiment(cfg)
    final = [r for r in report.rows if r["h"] == 0.01][0]
    assert final["diff2"] >= 0.9 * (final["normA2"] + final["normB2"])
    assert report.summary["oracle_distinct"] == [True]
    assert report.summary["defect_trend"]["0"]["shrinking"]
    assert report.summary["lower_bound"]["delta0_stable"] is True
