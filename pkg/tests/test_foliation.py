import json

import numpy as np
import pytest

from simulation.domain import DiskDomain
from simulation.errors import DegenerateGradientError, NotTangentError, PreconditionError
from simulation.foliation import (
    DIMENSION_CAVEAT,
    FoliationSpec,
    TargetRegion,
    check_foliation,
    convexity_second_derivative,
    is_strictly_convex,
)
from simulation.geometry import ConformalMetric
from simulation.speed import SpeedField, waveguide_speed

CORE = TargetRegion(kind="outside_radius", radius=0.15)


@pytest.fixture
def unit_disk_metric():
    return ConformalMetric(DiskDomain(), SpeedField.constant(1.0))


def test_circle_curvature_for_constant_speed(unit_disk_metric):
    fol = FoliationSpec.radial()
    value = convexity_second_derivative(unit_disk_metric, fol, [0.5, 0.0], [0.0, 1.0])
    assert value == pytest.approx(-2.0, rel=1e-4)
    assert is_strictly_convex(value)


def test_tangency_and_unit_length_are_required(unit_disk_metric):
    fol = FoliationSpec.radial()
    with pytest.raises(NotTangentError):
        convexity_second_derivative(unit_disk_metric, fol, [0.5, 0.0], [1.0, 0.0])
    with pytest.raises(NotTangentError, match="g-length"):
        convexity_second_derivative(unit_disk_metric, fol, [0.5, 0.0], [0.0, 2.0])


def test_degenerate_gradient_rejected(unit_disk_metric):
    with pytest.raises(DegenerateGradientError):
        convexity_second_derivative(unit_disk_metric, FoliationSpec.radial(), [0.0, 0.0], [0.0, 1.0])


def test_radial_foliation_of_disk_passes(unit_disk_metric):
    report = check_foliation(unit_disk_metric, FoliationSpec.radial(S=0.9, target=CORE), grid_spacing=0.04)
    assert report.passed, report.violations[:3]
    assert report.points_checked > 0
    assert report.max_convexity < 0
    assert report.caveat == DIMENSION_CAVEAT


def test_waveguide_fails_with_localized_violations():
    metric = ConformalMetric(DiskDomain(), waveguide_speed())
    report = check_foliation(metric, FoliationSpec.radial(S=0.9, target=CORE), grid_spacing=0.04)
    assert not report.passed
    assert report.counts["convexity"] > 0
    radii = [np.hypot(v["x"], v["y"]) for v in report.violations if v["kind"] == "convexity"]
    assert min(radii) > 0.5
    assert max(radii) < 0.75


def test_small_range_leaves_target_uncovered(unit_disk_metric):
    report = check_foliation(unit_disk_metric, FoliationSpec.radial(S=0.5), grid_spacing=0.04)
    assert not report.passed
    assert report.counts["coverage"] > 0
    assert report.counts["convexity"] == 0


def test_flat_levels_are_not_strictly_convex(unit_disk_metric):
    fol = FoliationSpec.planar(normal=(0.0, 1.0), offset=-1.0, S=1.9)
    report = check_foliation(unit_disk_metric, fol, levels=4, points_per_level=8, grid_spacing=0.05)
    assert report.counts["convexity"] > 0


def test_nonpositive_range_rejected():
    with pytest.raises(PreconditionError):
        FoliationSpec.radial(S=0.0)


def test_report_serializes_with_caveat(tmp_path, unit_disk_metric):
    report = check_foliation(unit_disk_metric, FoliationSpec.radial(S=0.5), levels=4, grid_spacing=0.05)
    path = tmp_path / "foliation.json"
    report.to_json(path)
    data = json.loads(path.read_text())
    assert data["passed"] is False
    assert data["caveat"] == DIMENSION_CAVEAT
    assert data["schema_version"] == "1.0"
