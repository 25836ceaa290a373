import numpy as np
import pytest

from simulation.domain import DiskDomain
from simulation.errors import CollarMismatchError, PreconditionError
from simulation.speed import (
    CompactBump,
    SpeedField,
    collar_difference,
    collar_equal,
    parse_expression,
    require_collar_equal,
    waveguide_speed,
)

BUMP_PAIR_B = {"sum": [{"const": 1.0}, {"bump": {"amp": -0.4, "radius": 0.5}}]}


def _numeric_gradient(speed, x, step=1e-6):
    ex = np.array([step, 0.0])
    ey = np.array([0.0, step])
    return np.array([
        (speed(x + ex) - speed(x - ex)) / (2 * step),
        (speed(x + ey) - speed(x - ey)) / (2 * step),
    ])


@pytest.mark.parametrize("spec", [
    {"const": 2.0},
    {"r2": {"center": [0.1, -0.2]}},
    {"gauss": {"amp": 0.3, "center": [0.2, 0.1], "width2": 0.05}},
    {"bump": {"amp": -0.4, "center": [0.0, 0.1], "radius": 0.5}},
    {"ring": {"amp": -0.3, "radius": 0.5, "width2": 0.02}},
    {"product": [{"const": 2.0}, {"sum": [1.0, {"r2": {}}]}]},
])
def test_analytic_gradients_match_finite_differences(spec):
    speed = SpeedField.from_config(spec)
    for x in (np.array([0.13, 0.21]), np.array([-0.3, 0.05])):
        assert speed.gradient(x) == pytest.approx(_numeric_gradient(speed, x), abs=1e-6)


def test_compact_bump_vanishes_outside_radius():
    bump = CompactBump(-0.4, radius=0.5)
    assert bump.value(np.array([0.0, 0.0])) == pytest.approx(-0.4)
    far = np.array([[0.5, 0.0], [0.0, 0.7], [0.9, 0.1]])
    assert np.all(bump.value(far) == 0.0)
    assert np.all(bump.gradient(far) == 0.0)


@pytest.mark.parametrize("spec, fragment", [
    ({"cosine": 1.0}, "speed"),
    ({"gauss": {"amp": 1.0}}, "missing keys"),
    ({"bump": {"amp": 1.0, "radius": 0.2, "depth": 3}}, "unknown keys"),
    ({"sum": {"const": 1.0}}, "expected a list"),
    ({"const": 1.0, "r2": {}}, "single-key"),
])
def test_parse_expression_names_the_problem(spec, fragment):
    with pytest.raises(ValueError, match=fragment):
        parse_expression(spec)


def test_fingerprint_is_canonical():
    a = SpeedField.from_config({"sum": [{"const": 1.0}, {"gauss": {"amp": 0.1, "width2": 0.2}}]})
    b = SpeedField.from_config({"sum": [{"const": 1}, {"gauss": {"width2": 0.2, "amp": 0.1}}]})
    c = SpeedField.from_config({"sum": [{"const": 1.0}, {"gauss": {"amp": 0.2, "width2": 0.2}}]})
    assert a.fingerprint == b.fingerprint
    assert a.fingerprint != c.fingerprint


def test_scaled_speed():
    speed = SpeedField.from_config({"r2": {}}).scaled(3.0)
    assert speed(np.array([1.0, 1.0])) == pytest.approx(6.0)


def test_sampled_speed_interpolates_smooth_field():
    xs = np.linspace(-1.0, 1.0, 41)
    ys = np.linspace(-1.0, 1.0, 41)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    speed = SpeedField.from_samples(xs, ys, 1.0 + 0.1 * X ** 2 + 0.05 * Y)
    x = np.array([0.31, -0.27])
    assert speed(x) == pytest.approx(1.0 + 0.1 * 0.31 ** 2 - 0.05 * 0.27, abs=1e-6)
    assert speed.gradient(x) == pytest.approx([0.2 * 0.31, 0.05], abs=1e-4)


def test_bounds_and_positivity():
    disk = DiskDomain()
    c_min, c_max = SpeedField.from_config(BUMP_PAIR_B).bounds(disk)
    assert c_min == pytest.approx(0.6, abs=1e-3)
    assert c_max == pytest.approx(1.0)
    negative = SpeedField.from_config({"sum": [{"const": 0.5}, {"r2": {}}, {"const": -1.0}]})
    with pytest.raises(PreconditionError):
        negative.check_positive(disk)


def test_collar_equality_of_bump_pair():
    disk = DiskDomain()
    a = SpeedField.constant(1.0, collar_width=0.3)
    b = SpeedField.from_config(BUMP_PAIR_B, collar_width=0.3)
    assert collar_difference(a, b, disk) == 0.0
    assert collar_equal(a, b, disk)
    require_collar_equal(a, b, disk)


def test_collar_mismatch_raises():
    disk = DiskDomain()
    a = SpeedField.constant(1.0, collar_width=0.3)
    b = SpeedField.from_config({"sum": [{"const": 1.0}, {"gauss": {"amp": 0.1, "width2": 0.5}}]},
                               collar_width=0.3)
    assert not collar_equal(a, b, disk)
    with pytest.raises(CollarMismatchError):
        require_collar_equal(a, b, disk)


def test_waveguide_speed_dips_on_the_ring():
    speed = waveguide_speed()
    assert speed(np.array([0.5, 0.0])) == pytest.approx(0.7)
    assert speed(np.array([0.0, 0.0])) == pytest.approx(1.0 - 0.3 * np.exp(-12.5))
