import json

import numpy as np
import pandas as pd
import pytest

from simulation import analysis
from simulation.analysis import (
    DIRECT_TOLERANCE,
    ExperimentConfig,
    corollary_report,
    run_theorem31_experiment,
    shift_norm_demo,
    write_bundle,
    write_corollary_bundle,
)
from simulation.domain import DiskDomain
from simulation.errors import ResolutionError, SupportLeakError
from simulation.foliation import FoliationSpec, TargetRegion
from simulation.geometry import BoundaryPhase, lens_map
from simulation.probe import VERDICT_COLUMNS
from simulation.speed import SpeedField

CORE = TargetRegion(kind="outside_radius", radius=0.15)
PROBES = [BoundaryPhase(s, mu) for s in np.linspace(0.0, 2 * np.pi, 6, endpoint=False) for mu in (0.0, 0.5)]


def _bump(amp, radius, center=(0.0, 0.0)):
    spec = {"sum": [{"const": 1.0}, {"bump": {"amp": amp, "radius": radius, "center": list(center)}}]}
    return SpeedField.from_config(spec, collar_width=0.3)


def _config(speed_a, speed_b, probes=PROBES, **overrides):
    params = dict(domain=DiskDomain(), speed_a=speed_a, speed_b=speed_b, probes=probes,
                  h_schedule=[0.02], eps=2.4, T=4.3, name="test")
    params.update(overrides)
    return ExperimentConfig(**params)


def test_shift_demo_unmodulated_packets_approach_sqrt2():
    rows = shift_norm_demo(0.0, 1.0, [0.02, 0.05, 0.1, 0.2])
    for row in rows:
        assert row["ratio"] == pytest.approx(np.sqrt(2.0), abs=0.01)
        assert row["frequency"] == 0.0


def test_shift_demo_modulated_packets_approach_two():
    widths = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0]
    ratios = [r["ratio"] for r in shift_norm_demo(0.0, 1.0, widths, modulated=True)]
    assert all(b >= a - 1e-9 for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] >= 1.9
    assert ratios[-1] <= 2.0


def test_shift_demo_degenerate_and_coarse_cases():
    assert all(r["ratio"] == 0.0 for r in shift_norm_demo(0.5, 0.5, [0.1, 1.0], modulated=True))
    with pytest.raises(ResolutionError, match="points per modulation period"):
        shift_norm_demo(0.0, 1.0, [0.5], modulated=True, dx=0.5)
    with pytest.raises(ResolutionError):
        shift_norm_demo(0.0, 1.0, [])


def test_experiment_config_violations():
    unit = SpeedField.constant(1.0)
    assert _config(unit, unit).violations() == []
    problems = _config(unit, unit, h_schedule=[0.01, 0.02], eps=0.5, T=0.4,
                       points_per_wavelength=8).violations()
    text = " ".join(problems)
    assert "strictly decreasing" in text
    assert "eps = 0.5 too small" in text
    assert "must exceed eps" in text
    assert "points_per_wavelength" in text
    glancing = _config(unit, unit, probes=[BoundaryPhase(0.0, 0.999)]).violations()
    assert glancing == ["probes[0]: |mu| = 0.999 exceeds the glancing margin 0.995"]


def test_corollary_asserts_for_identical_speeds():
    speed = SpeedField.constant(1.0, collar_width=0.2)
    report = corollary_report(_config(speed, SpeedField.constant(1.0, collar_width=0.2)),
                              FoliationSpec.radial(S=0.9, target=CORE), lens_check="geodesic",
                              grid_spacing=0.05)
    assert report.asserted
    assert report.status == "c = c~ on M0 (by Corollary)"
    assert report.lens_equal
    assert report.direct_max_difference == 0.0


def test_corollary_withholds_when_lens_data_differ():
    report = corollary_report(_config(SpeedField.constant(1.0, collar_width=0.3), _bump(-0.4, 0.5)),
                              FoliationSpec.radial(S=0.9, target=CORE), lens_check="geodesic",
                              grid_spacing=0.05)
    assert not report.asserted
    assert not report.lens_equal
    assert report.counterexamples
    assert "lens data differ" in report.status


def test_corollary_withholds_when_direct_check_refutes():
    # every probe stays at radius >= 0.9, outside the central bump
    probes = [BoundaryPhase(s, 0.9) for s in np.linspace(0.0, 2 * np.pi, 8, endpoint=False)]
    report = corollary_report(_config(SpeedField.constant(1.0, collar_width=0.3), _bump(0.2, 0.3), probes=probes),
                              FoliationSpec.radial(S=0.9, target=CORE), lens_check="geodesic",
                              grid_spacing=0.05)
    assert report.lens_equal
    assert not report.asserted
    assert "withheld" in report.status


def test_corollary_withholds_when_range_too_small():
    speed = SpeedField.constant(1.0, collar_width=0.2)
    report = corollary_report(_config(speed, speed), FoliationSpec.radial(S=0.5), lens_check="geodesic",
                              grid_spacing=0.05)
    assert not report.asserted
    assert "foliation" in report.status


def test_corollary_rejects_collar_mismatch():
    a = SpeedField.constant(1.0, collar_width=0.3)
    b = SpeedField.constant(1.1, collar_width=0.3)
    report = corollary_report(_config(a, b), FoliationSpec.radial(S=0.9, target=CORE), lens_check="geodesic",
                              grid_spacing=0.05)
    assert not report.asserted
    assert report.status.startswith("precondition failed")


def test_corollary_rejects_unknown_lens_check():
    speed = SpeedField.constant(1.0)
    with pytest.raises(ValueError):
        corollary_report(_config(speed, speed), FoliationSpec.radial(), lens_check="oracle")


@pytest.mark.slow
def test_corollary_report_is_sound_on_random_pairs():
    rng = np.random.default_rng(2024)
    probes = [BoundaryPhase(s, mu) for s in np.linspace(0.0, 2 * np.pi, 4, endpoint=False) for mu in (0.0, 0.6)]
    fol = FoliationSpec.radial(S=0.9, target=CORE)
    target = DiskDomain().interior_samples(0.05)
    target = target[CORE.contains(target)]
    for trial in range(20):
        speed_a = SpeedField.constant(1.0, collar_width=0.3)
        if trial % 2 == 0:
            speed_b = SpeedField.constant(1.0, collar_width=0.3)
        else:
            radius = rng.uniform(0.1, 0.35)
            angle = rng.uniform(0.0, 2 * np.pi)
            offset = rng.uniform(0.0, 0.65 - radius)
            center = (offset * np.cos(angle), offset * np.sin(angle))
            speed_b = _bump(rng.uniform(-0.3, 0.3), radius, center)
        report = corollary_report(_config(speed_a, speed_b, probes=probes), fol, lens_check="geodesic",
                                  grid_spacing=0.05)
        refuted = np.max(np.abs(speed_a(target) - speed_b(target))) > DIRECT_TOLERANCE
        if refuted:
            assert not report.asserted, report.status
        if trial % 2 == 0:
            assert report.asserted, report.status


def test_short_horizon_flags_rows_without_solving(tmp_path):
    unit = SpeedField.constant(1.0)
    cfg = _config(unit, unit, probes=[BoundaryPhase(0.0, 0.0)], T=2.5)
    report = run_theorem31_experiment(cfg)
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row["flag"] == "T too small"
    assert row["verdict"] == "T too small"
    assert report.summary["stats"]["flagged"] == 1
    assert report.summary["claim_check"]["holds"] is False

    paths = write_bundle(report, tmp_path)
    assert {p.name for p in paths} == {"verdicts.csv", "rows_extended.csv", "lower_bound.csv",
                                       "dn_lower_bound.csv", "summary.json", "report.md"}
    verdicts = pd.read_csv(tmp_path / "verdicts.csv")
    assert list(verdicts.columns) == VERDICT_COLUMNS
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] == "1.0"
    assert summary["lower_bound"]["table"][0]["min_norm"] == "nan"
    assert "FAILS" in (tmp_path / "report.md").read_text()


def test_corollary_bundle_files(tmp_path):
    speed = SpeedField.constant(1.0, collar_width=0.2)
    report = corollary_report(_config(speed, speed), FoliationSpec.radial(S=0.9, target=CORE),
                              lens_check="geodesic", grid_spacing=0.05)
    paths = write_corollary_bundle(report, tmp_path)
    assert [p.name for p in paths] == ["corollary.json", "foliation.json", "corollary.md"]
    data = json.loads((tmp_path / "corollary.json").read_text())
    assert data["asserted"] is True
    assert data["caveat"] == report.caveat
    assert "(by Corollary)" in (tmp_path / "corollary.md").read_text()


@pytest.mark.slow
def test_equal_speeds_give_consistent_verdicts():
    unit = SpeedField.constant(1.0, collar_width=0.3)
    probes = [BoundaryPhase(0.0, 0.0), BoundaryPhase(np.pi, 0.5)]
    report = run_theorem31_experiment(_config(unit, SpeedField.constant(1.0, collar_width=0.3), probes=probes))
    assert [r["verdict"] for r in report.rows] == ["lens-consistent", "lens-consistent"]
    assert all(r["diff2"] == 0.0 for r in report.rows)
    assert report.summary["claim_check"]["holds"] is True
    assert report.lower_bound[0]["min_norm"] > 0.0


def test_trapped_oracle_rows_are_flagged_apart_from_short_horizons():
    unit = SpeedField.constant(1.0)
    cfg = _config(unit, unit, probes=[BoundaryPhase(0.0, 0.0)], L_max=0.5)
    report = run_theorem31_experiment(cfg)
    row = report.rows[0]
    assert row["flag"] == "oracle trapped/glancing"
    assert row["verdict"] == "oracle trapped/glancing"
    assert np.isinf(row["oracle_length_a"])
    assert report.summary["stats"]["flagged"] == 1
    assert report.summary["claim_check"]["holds"] is False


def test_rows_observed_past_the_second_reflection_are_flagged(monkeypatch):
    def refuse(*args, **kwargs):
        raise SupportLeakError("no solve needed")

    monkeypatch.setattr(analysis, "boundary_probe", refuse)
    unit = SpeedField.constant(1.0)
    cfg = _config(unit, unit, probes=[BoundaryPhase(0.0, 0.0)], T=5.3)
    oracle = lens_map(cfg.metric(unit), cfg.probes[0])
    row = analysis._probe_row(cfg, None, 0.02, cfg.probes[0], oracle, oracle, False, (1.0, 1.0))
    # exit after one chord, second reflection after two
    assert row["window_t_hi"] == pytest.approx(1.2 + 4.0 - 3.0 * np.sqrt(0.02), abs=1e-6)
    assert row["flag"] == "T past second reflection"
    assert row["verdict"] == "error"

    cfg.T = 4.3
    row = analysis._probe_row(cfg, None, 0.02, cfg.probes[0], oracle, oracle, False, (1.0, 1.0))
    assert row["flag"] == ""
