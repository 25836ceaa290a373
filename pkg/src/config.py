"""
Run configuration: the JSON schema shipped in config_schema.json, the
semantic checks a schema cannot express (CFL, collar equality, eps/T,
glancing margin, grid fit) and the builders that turn a validated
document into simulation objects.
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from jsonschema import Draft7Validator

from simulation.analysis import ExperimentConfig
from simulation.domain import DiskDomain, Domain, LevelSetDomain, RectangleDomain
from simulation.errors import ConfigError, LensToolkitError
from simulation.foliation import FoliationSpec, PlanarDepth, RadialDepth, TargetRegion
from simulation.geometry import DEFAULT_L_MAX, DEFAULT_STEP, GLANCING_LIMIT, BoundaryPhase, ConformalMetric
from simulation.probe import POINTS_PER_WAVELENGTH, boundary_probe, default_cutoff_radius, probe_spacing
from simulation.speed import COLLAR_TOLERANCE, SpeedField, collar_difference, parse_expression
from simulation.wave import CFL_FACTOR, DEFAULT_COURANT, PlaneWave, WaveGrid

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).resolve().parent / "config_schema.json"

SUBCOMMANDS = ("lens", "wave", "probe", "theorem31", "corollary", "shiftdemo")

REQUIRED_SECTIONS = {
    "lens": ["domain", "speed", "probes"],
    "wave": ["domain", "speed", "wave"],
    "probe": ["domain", "speed", "probes", "probe"],
    "theorem31": ["domain", "speeds", "probes", "experiment"],
    "corollary": ["domain", "speeds", "probes", "experiment", "foliation"],
    "shiftdemo": ["shiftdemo"],
}

VALIDATION_SPACING = 0.05
MIN_MODULATION_POINTS = 8.0


def load_config(path: Union[str, Path]) -> Dict:
    """Read a JSON config; missing or unparsable files raise ConfigError naming the path"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"{path}: config file not found"])
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError([f"{path}: unreadable ({e})"])
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}"])
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a JSON object"])
    return raw


def load_schema() -> Dict:
    with open(SCHEMA_PATH, "r", encoding="utf-8") as handle:
        return json.load(handle)


CONFIG_SCHEMA = load_schema()
SCHEMA_VALIDATOR = Draft7Validator(CONFIG_SCHEMA)


def _location(path: Iterable) -> str:
    text = ""
    for part in path:
        text += f"[{part}]" if isinstance(part, int) else (f".{part}" if text else str(part))
    return text or "config"


def _format_error(error) -> str:
    """One violation line per schema error, with unknown keys named the same way at every level"""
    where = _location(error.absolute_path)
    if error.validator == "additionalProperties":
        known = set(error.schema.get("properties", {}))
        unknown = sorted(set(error.instance) - known)
        return f"{where}: unknown keys {unknown}"
    if "propertyNames" in error.absolute_schema_path:
        return f"{where}: unknown keys [{error.instance!r}] for this kind"
    return f"{where}: {error.schema.get('errorMessage', error.message)}"


def schema_violations(raw: Dict) -> Tuple[List[str], Set[str]]:
    """Every schema error of raw, plus the top-level sections they fall in"""
    errors = sorted(SCHEMA_VALIDATOR.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    broken = {str(e.absolute_path[0]) for e in errors if len(e.absolute_path) > 0}
    return [_format_error(e) for e in errors], broken


class SemanticChecks:
    """Checks that need built objects: positivity, CFL, collar equality, eps/T, grid fit"""

    def __init__(self, raw: Dict, broken: Set[str]):
        self.raw = raw
        self.broken = broken
        self.violations: List[str] = []

    def usable(self, section: str) -> bool:
        return section in self.raw and section not in self.broken

    def add(self, message: str) -> None:
        self.violations.append(message)

    def speed(self, spec, path: str, collar_width: float, domain: Optional[Domain]) -> Optional[SpeedField]:
        try:
            speed = SpeedField(parse_expression(spec, path), collar_width=collar_width, name=path)
        except (ValueError, TypeError) as e:
            self.add(str(e))
            return None
        if domain is not None:
            c_min, _ = speed.bounds(domain, VALIDATION_SPACING)
            if not c_min > 0:
                self.add(f"{path}: speed must be positive on the domain, min c = {c_min:.6g}")
                return None
        return speed

    def glancing(self, path: str, mu: float) -> None:
        if abs(mu) > GLANCING_LIMIT:
            self.add(f"{path}: |mu| = {abs(mu):g} exceeds the glancing margin {GLANCING_LIMIT}")

    def probes(self, section: Dict) -> None:
        if "points" in section:
            for i, point in enumerate(section["points"]):
                self.glancing(f"probes.points[{i}]", point[1])
        for key in ("mu", "mu_range"):
            for i, mu in enumerate(section.get(key, [])):
                self.glancing(f"probes.{key}[{i}]", mu)

    def eps(self, path: str, h: float, eps: float) -> None:
        r_c = default_cutoff_radius(h)
        if eps < 4.0 * r_c:
            self.add(f"{path}.eps: {eps:g} too small, needs eps >= 4 r_c = {4.0 * r_c:.4g} for h = {h:g}")

    def grid_fit(self, path: str, domain: Optional[Domain], speeds: Sequence[Optional[SpeedField]],
                 h_values: Sequence[float], points_per_wavelength: int) -> None:
        """The probe grids a run would build must exist for every h"""
        if domain is None or any(sp is None for sp in speeds):
            return
        for h in h_values:
            try:
                probe_spacing(domain, list(speeds), h, points_per_wavelength)
            except LensToolkitError as e:
                self.add(f"{path}: h = {h:g}: {e}")

    def wave(self, section: Dict, domain: Optional[Domain], speed: Optional[SpeedField]) -> None:
        ok = True
        if "courant" in section and section["courant"] > CFL_FACTOR:
            self.add(f"wave.courant: {section['courant']:g} exceeds the CFL factor {CFL_FACTOR}")
            ok = False
        kind, body = next(iter(section["signal"].items()))
        if kind == "probe":
            n_before = len(self.violations)
            self.glancing("wave.signal.probe.mu", body["mu"])
            self.eps("wave.signal.probe", body["h"], body["eps"])
            ok &= len(self.violations) == n_before
        if not ok or domain is None or speed is None:
            return
        try:
            grid = WaveGrid.build(domain, section["dx"], section["T"], speeds=[speed], dt=section.get("dt"),
                                  courant=section.get("courant", DEFAULT_COURANT))
            if kind == "probe":
                bp = BoundaryPhase(float(body["s"]), float(body["mu"]))
                boundary_probe(bp, body["h"], body["eps"], grid, speed=speed)
            else:
                PlaneWave(body.get("angle", np.pi / 6), body.get("width", 0.5),
                          body.get("delay", 0.0)).boundary_signal(grid)
        except LensToolkitError as e:
            self.add(f"wave: {e}")

    def probe(self, section: Dict, domain: Optional[Domain], speed: Optional[SpeedField]) -> None:
        self.eps("probe", section["h"], section["eps"])
        if not section["T"] > section["eps"]:
            self.add(f"probe.T: {section['T']:g} must exceed eps = {section['eps']:g}")
        self.grid_fit("probe", domain, [speed], [section["h"]],
                      section.get("points_per_wavelength", POINTS_PER_WAVELENGTH))

    def experiment(self, section: Dict, domain: Optional[Domain], speed_a: Optional[SpeedField],
                   speed_b: Optional[SpeedField]) -> None:
        placeholder = SpeedField.constant(1.0)
        cfg = _experiment_from_section(section, domain or DiskDomain(), speed_a or placeholder,
                                       speed_b or placeholder, [])
        problems = cfg.violations()
        self.violations.extend(f"experiment: {v}" for v in problems)
        if not problems:
            self.grid_fit("experiment", domain, [speed_a, speed_b], cfg.h_schedule, cfg.points_per_wavelength)

    def shiftdemo(self, section: Dict) -> None:
        modulated = section.get("modulated", "both")
        if "dx" not in section or modulated is False or section["c1"] == section["c2"]:
            return
        period = 2.0 * abs(section["c1"] - section["c2"])
        if period / section["dx"] < MIN_MODULATION_POINTS:
            self.add(f"shiftdemo.dx: {section['dx']:g} gives {period / section['dx']:.2f} points per "
                     f"modulation period (needs >= {MIN_MODULATION_POINTS:g})")


def validate_config(raw: Dict, subcommand: Optional[str] = None) -> List[str]:
    """Every violation of raw, checked for the given subcommand (all present sections otherwise)"""
    if not isinstance(raw, dict):
        return ["config: top level must be a JSON object"]
    if subcommand is not None and subcommand not in SUBCOMMANDS:
        return [f"unknown subcommand {subcommand!r}, expected one of {list(SUBCOMMANDS)}"]

    violations, broken = schema_violations(raw)
    if subcommand is not None:
        missing = [key for key in REQUIRED_SECTIONS[subcommand] if key not in raw]
        if missing:
            violations.append(f"config: subcommand '{subcommand}' requires sections {missing}")

    checks = SemanticChecks(raw, broken)
    domain = build_domain(raw["domain"]) if checks.usable("domain") else None

    speed = None
    if checks.usable("speed"):
        width = raw.get("collar_width", 0.0) if checks.usable("collar_width") else 0.0
        speed = checks.speed(raw["speed"], "speed", width, domain)

    speed_a = speed_b = None
    if checks.usable("speeds"):
        section = raw["speeds"]
        width = section.get("collar_width", 0.0)
        speed_a = checks.speed(section["a"], "speeds.a", width, domain)
        speed_b = checks.speed(section["b"], "speeds.b", width, domain)
        if subcommand == "theorem31" and domain is not None and speed_a is not None and speed_b is not None:
            diff = collar_difference(speed_a, speed_b, domain, width)
            if diff > COLLAR_TOLERANCE:
                checks.add(f"speeds: a and b differ by {diff:.3e} within the collar of width {width:g}")

    if checks.usable("probes"):
        checks.probes(raw["probes"])
    if checks.usable("wave"):
        checks.wave(raw["wave"], domain, speed)
    if checks.usable("probe"):
        checks.probe(raw["probe"], domain, speed)
    if checks.usable("experiment"):
        checks.experiment(raw["experiment"], domain, speed_a, speed_b)
    if checks.usable("shiftdemo"):
        checks.shiftdemo(raw["shiftdemo"])

    violations.extend(checks.violations)
    if violations:
        logger.warning(f"⚠️ Config has {len(violations)} violation(s)")
    return violations


def require_valid(raw: Dict, subcommand: Optional[str] = None) -> None:
    violations = validate_config(raw, subcommand)
    if violations:
        raise ConfigError(violations)


def build_domain(section: Dict) -> Domain:
    kind = section["kind"]
    center = tuple(section.get("center", (0.0, 0.0)))
    if kind == "disk":
        return DiskDomain(section.get("radius", 1.0), center)
    if kind == "rectangle":
        return RectangleDomain(section.get("width", 1.0), section.get("height", 1.0))
    if kind == "ellipse":
        a, b = section["semi_axes"]
        kwargs = {"n_angles": int(section["n_angles"])} if "n_angles" in section else {}
        return LevelSetDomain.ellipse(a, b, center, **kwargs)
    raise ConfigError([f"domain.kind: unsupported kind {kind!r}"])


def build_speed(raw: Dict) -> SpeedField:
    return SpeedField.from_config(raw["speed"], collar_width=raw.get("collar_width", 0.0), name="speed")


def build_speed_pair(raw: Dict) -> Tuple[SpeedField, SpeedField]:
    section = raw["speeds"]
    width = section.get("collar_width", 0.0)
    return (SpeedField.from_config(section["a"], collar_width=width, name="a"),
            SpeedField.from_config(section["b"], collar_width=width, name="b"))


def build_probes(section: Dict, domain: Domain) -> List[BoundaryPhase]:
    """Probe list from explicit [s, mu] points or from count equispaced boundary positions"""
    if "points" in section:
        return [BoundaryPhase(float(s), float(mu)) for s, mu in section["points"]]
    count = int(section["count"])
    s = domain.length * np.arange(count) / count
    if "mu_range" in section:
        mu = np.linspace(section["mu_range"][0], section["mu_range"][1], count)
        return [BoundaryPhase(float(a), float(b)) for a, b in zip(s, mu)]
    return [BoundaryPhase(float(a), float(m)) for m in section.get("mu", [0.0]) for a in s]


def build_metric(raw: Dict, domain: Domain, speed: SpeedField) -> ConformalMetric:
    section = raw.get("geodesic", {})
    return ConformalMetric(domain, speed, step=section.get("step", DEFAULT_STEP),
                           L_max=section.get("L_max", DEFAULT_L_MAX))


def _experiment_from_section(section: Dict, domain: Domain, speed_a: SpeedField, speed_b: SpeedField,
                             probes: List[BoundaryPhase], output_dir=None, jobs: int = 1,
                             name: str = "experiment") -> ExperimentConfig:
    return ExperimentConfig(
        domain=domain,
        speed_a=speed_a,
        speed_b=speed_b,
        probes=probes,
        h_schedule=[float(h) for h in section["h_schedule"]],
        eps=float(section["eps"]),
        T=float(section["T"]),
        points_per_wavelength=section.get("points_per_wavelength", POINTS_PER_WAVELENGTH),
        L_max=section.get("L_max", DEFAULT_L_MAX),
        geodesic_step=section.get("geodesic_step", DEFAULT_STEP),
        output_dir=None if output_dir is None else Path(output_dir),
        jobs=jobs,
        name=name,
    )


def build_experiment(raw: Dict, output_dir=None, jobs: int = 1) -> ExperimentConfig:
    domain = build_domain(raw["domain"])
    speed_a, speed_b = build_speed_pair(raw)
    probes = build_probes(raw["probes"], domain)
    return _experiment_from_section(raw["experiment"], domain, speed_a, speed_b, probes,
                                    output_dir=output_dir, jobs=jobs, name=raw.get("name", "experiment"))


def build_foliation(section: Dict) -> FoliationSpec:
    target_raw = section.get("target", {})
    target = TargetRegion(
        kind=target_raw.get("kind", "all"),
        radius=target_raw.get("radius", 0.0),
        center=tuple(target_raw.get("center", (0.0, 0.0))),
        normal=tuple(target_raw.get("normal", (0.0, 1.0))),
        offset=target_raw.get("offset", 0.0),
    )
    if section["kind"] == "radial":
        rho = RadialDepth(section.get("outer_radius", 1.0), tuple(section.get("center", (0.0, 0.0))))
    else:
        rho = PlanarDepth(tuple(section.get("normal", (0.0, 1.0))), section.get("offset", 0.0))
    return FoliationSpec(rho, float(section["S"]), target)
