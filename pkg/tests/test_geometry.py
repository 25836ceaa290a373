import time

import numpy as np
import pytest

from simulation.domain import DiskDomain, RectangleDomain
from simulation.errors import GlancingError, OutsideDomainError, PreconditionError
from simulation.geometry import (
    BoundaryPhase,
    ConformalMetric,
    PhaseState,
    angular_momentum,
    boundary_phase_to_interior,
    check_non_glancing,
    disk_lens_closed_form,
    integrate_batch,
    integrate_geodesic,
    lens_map,
    lens_map_adaptive,
    lens_sweep,
    phase_to_boundary,
    travel_time_lower_bound,
)
from simulation.speed import SpeedField

RADIAL_GAUSS = {"sum": [{"const": 1.0}, {"gauss": {"amp": 0.3, "width2": 0.1}}]}
BUMP = {"sum": [{"const": 1.0}, {"bump": {"amp": -0.4, "radius": 0.5}}]}


@pytest.fixture
def unit_disk_metric():
    return ConformalMetric(DiskDomain(), SpeedField.constant(1.0))


def test_glancing_margin_is_enforced():
    check_non_glancing(0.995)
    with pytest.raises(GlancingError, match="glancing margin"):
        check_non_glancing(0.999)
    with pytest.raises(GlancingError):
        check_non_glancing(float("nan"))


def test_boundary_phase_round_trip():
    metric = ConformalMetric(DiskDomain(), SpeedField.from_config(RADIAL_GAUSS))
    for s, mu in [(0.3, 0.2), (2.0, -0.7), (5.5, 0.0)]:
        state = boundary_phase_to_interior(metric, BoundaryPhase(s, mu))
        assert state.g_norm(metric.speed) == pytest.approx(1.0)
        # inward covectors point into the disk
        assert np.dot(state.xi, state.x) < 0
        back = phase_to_boundary(metric, state, side="inward")
        assert back.s == pytest.approx(s)
        assert back.mu == pytest.approx(mu)


def test_reversed_phase_flips_side_and_momentum():
    bp = BoundaryPhase(1.0, 0.4)
    assert bp.reversed() == BoundaryPhase(1.0, -0.4, "outward")
    assert bp.reversed().reversed() == bp


def test_disk_lens_matches_closed_form(unit_disk_metric):
    rng = np.random.default_rng(7)
    s = rng.uniform(0.0, 2 * np.pi, 64)
    mu = np.linspace(-0.9, 0.9, 64)
    start = time.perf_counter()
    sweep = lens_sweep(unit_disk_metric, [BoundaryPhase(a, b) for a, b in zip(s, mu)])
    elapsed = time.perf_counter() - start
    s_out, length = disk_lens_closed_form(s, mu)
    for rec, so, ell in zip(sweep.records, s_out, length):
        assert rec.length == pytest.approx(ell, abs=1e-6)
        assert abs(unit_disk_metric.domain.arc_difference(rec.exit.s, so)) < 1e-6
        assert rec.exit.mu == pytest.approx(rec.entry.mu, abs=1e-6)
    assert sweep.T0_estimate == pytest.approx(max(length), abs=1e-6)
    assert elapsed < 5.0


def test_radial_speed_conserves_angular_momentum():
    metric = ConformalMetric(DiskDomain(), SpeedField.from_config(RADIAL_GAUSS))
    s = np.linspace(0.0, 2 * np.pi, 16, endpoint=False)
    mu = np.concatenate([np.linspace(0.3, 0.8, 8), -np.linspace(0.3, 0.8, 8)])
    starts = [boundary_phase_to_interior(metric, BoundaryPhase(a, b)).as_array() for a, b in zip(s, mu)]
    out = integrate_batch(metric, np.array(starts))
    assert not out["trapped"].any()
    before = angular_momentum(np.array(starts))
    after = angular_momentum(out["exit"])
    scale = np.maximum(np.abs(before), 1e-3)
    assert np.max(np.abs(after - before) / scale) < 1e-8


def test_fixed_step_converges_at_fourth_order():
    metric = ConformalMetric(DiskDomain(), SpeedField.from_config(RADIAL_GAUSS), bisection_tol=1e-13)
    entry = BoundaryPhase(0.4, 0.3)
    reference = lens_map_adaptive(metric, entry, tol=1e-13)

    def error(step):
        coarse = ConformalMetric(metric.domain, metric.speed, step=step, bisection_tol=1e-13)
        rec = lens_map(coarse, entry)
        return abs(rec.length - reference.length) + abs(metric.domain.arc_difference(rec.exit.s, reference.exit.s))

    ratio = error(0.05) / error(0.025)
    assert 10.0 <= ratio <= 22.0


def test_adaptive_and_fixed_step_agree():
    metric = ConformalMetric(DiskDomain(), SpeedField.from_config(BUMP))
    for mu in (-0.5, 0.0, 0.6):
        entry = BoundaryPhase(1.0, mu)
        fixed = lens_map(metric, entry)
        adaptive = lens_map_adaptive(metric, entry)
        assert fixed.length == pytest.approx(adaptive.length, abs=1e-7)
        assert fixed.exit.s == pytest.approx(adaptive.exit.s, abs=1e-7)


def test_slow_bump_delays_crossing_rays():
    fast = ConformalMetric(DiskDomain(), SpeedField.constant(1.0))
    slow = ConformalMetric(DiskDomain(), SpeedField.from_config(BUMP))
    crossing = BoundaryPhase(0.0, 0.0)
    missing = BoundaryPhase(0.0, 0.9)
    assert lens_map(slow, crossing).length - lens_map(fast, crossing).length > 0.2
    assert lens_map(slow, missing).length == pytest.approx(lens_map(fast, missing).length, abs=1e-9)


def test_lengths_respect_the_travel_time_bound():
    metric = ConformalMetric(DiskDomain(), SpeedField.from_config(BUMP))
    for s, mu in [(0.0, 0.0), (1.0, 0.5), (3.0, -0.3)]:
        rec = lens_map(metric, BoundaryPhase(s, mu))
        bound = travel_time_lower_bound(metric, metric.domain.boundary_point(s),
                                        metric.domain.boundary_point(rec.exit.s))
        assert rec.length >= bound - 1e-9


def test_short_budget_marks_ray_trapped(unit_disk_metric):
    rec = lens_map(unit_disk_metric, BoundaryPhase(0.0, 0.0), L_max=0.5)
    assert rec.trapped
    assert rec.exit is None
    assert rec.length == float("inf")
    assert rec.to_row()["trapped"] is True


def test_sweep_records_rejected_probes(unit_disk_metric):
    probes = [BoundaryPhase(0.0, 0.2), BoundaryPhase(1.0, 0.999), BoundaryPhase(2.0, -0.4)]
    sweep = lens_sweep(unit_disk_metric, probes)
    assert list(sweep.errors) == [1]
    assert "glancing" in sweep.records[1].error
    assert sweep.records[0].error is None and sweep.records[2].error is None


def test_sweep_in_parallel_matches_serial(unit_disk_metric):
    probes = [BoundaryPhase(s, 0.3) for s in np.linspace(0.0, 6.0, 8)]
    serial = lens_sweep(unit_disk_metric, probes, jobs=1)
    parallel = lens_sweep(unit_disk_metric, probes, jobs=2)
    assert [r.length for r in serial.records] == [r.length for r in parallel.records]


def test_rectangle_lens_for_perpendicular_ray():
    metric = ConformalMetric(RectangleDomain(2.0, 1.0), SpeedField.constant(2.0))
    rec = lens_map(metric, BoundaryPhase(0.5, 0.0))
    # straight up from the bottom edge to the top edge at x = 0.5
    assert rec.exit.s == pytest.approx(2.0 + 1.0 + 1.5, abs=1e-8)
    assert rec.length == pytest.approx(0.5, abs=1e-8)


def test_start_outside_domain_rejected(unit_disk_metric):
    state = PhaseState(x=np.array([1.5, 0.0]), xi=np.array([-1.0, 0.0]))
    with pytest.raises(OutsideDomainError):
        integrate_geodesic(unit_disk_metric, state)


def test_non_unit_covector_rejected(unit_disk_metric):
    state = PhaseState(x=np.array([0.0, 0.0]), xi=np.array([2.0, 0.0]))
    with pytest.raises(PreconditionError, match="g-unit"):
        integrate_geodesic(unit_disk_metric, state)


def test_lens_map_is_a_time_reversal_involution():
    speed = SpeedField.from_config(
        {"sum": [{"const": 1.0}, {"gauss": {"amp": 0.3, "width2": 0.1, "center": [0.2, -0.1]}}]})
    metric = ConformalMetric(DiskDomain(), speed)
    for s, mu in [(0.0, 0.0), (1.0, 0.4), (4.0, -0.6)]:
        forward = lens_map(metric, BoundaryPhase(s, mu))
        back = lens_map(metric, forward.exit.reversed())
        assert abs(metric.domain.arc_difference(back.exit.s, s)) < 1e-5
        assert back.exit.mu == pytest.approx(-mu, abs=1e-5)
        assert back.length == pytest.approx(forward.length, abs=1e-6)


def test_constant_speed_scaling_shrinks_lengths_and_keeps_exits(unit_disk_metric):
    doubled = ConformalMetric(DiskDomain(), SpeedField.constant(2.0))
    for s, mu in [(0.0, 0.0), (2.0, 0.5), (5.0, -0.8)]:
        slow = lens_map(unit_disk_metric, BoundaryPhase(s, mu))
        fast = lens_map(doubled, BoundaryPhase(s, mu))
        assert fast.length == pytest.approx(0.5 * slow.length, rel=1e-6)
        assert fast.exit.s == pytest.approx(slow.exit.s, abs=1e-6)
        assert fast.exit.mu == pytest.approx(slow.exit.mu, abs=1e-6)
