#!/usr/bin/env python3
"""
Lens Probe Toolkit - command-line entry point
Parses a JSON run config, dispatches one pipeline and writes a run bundle
with a manifest.
"""

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from dotenv import load_dotenv
from tqdm import tqdm

from simulation import __version__
from simulation.analysis import (
    NO_ARRIVAL,
    NO_WINDOW,
    PAST_SECOND_REFLECTION,
    SHIFT_COLUMNS,
    corollary_report,
    run_theorem31_experiment,
    shift_norm_demo,
    write_bundle,
    write_corollary_bundle,
)
from simulation.errors import ConfigError, LensToolkitError, NoArrivalError, NumericalAbortError, PreconditionError
from simulation.geometry import LENS_COLUMNS, BoundaryPhase, LensRecord, lens_map, lens_map_adaptive, lens_sweep
from simulation.io import canonical_hash, write_csv, write_json
from simulation.probe import POINTS_PER_WAVELENGTH, boundary_probe, extract_lens, observation_window, probe_grid
from simulation.wave import DEFAULT_COURANT, PlaneWave, WaveGrid, solve_ibvp
from src.config import (
    SUBCOMMANDS,
    build_domain,
    build_experiment,
    build_foliation,
    build_metric,
    build_probes,
    build_speed,
    load_config,
    require_valid,
    validate_config,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PRECONDITION = 2
EXIT_NUMERICAL = 3

PROBE_COLUMNS = [
    "s_in", "mu_in", "h", "est_length", "est_s_out", "est_mu_out", "ambiguous", "detections",
    "oracle_length", "oracle_s_out", "oracle_mu_out", "length_error", "exit_error", "window_t_hi", "flag", "error",
]


@dataclass
class RunManifest:
    config_path: str
    config_hash: str
    subcommand: str
    tool_version: str = __version__
    started: str = ""
    finished: str = ""
    output_dir: str = ""
    outputs: List[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        """Write manifest.json after checking every listed output exists"""
        missing = [p for p in self.outputs if not Path(p).is_file()]
        if missing:
            raise LensToolkitError(f"run finished but outputs are missing: {missing}")
        return write_json(out_dir / "manifest.json", asdict(self))


def resolve_output_dir(args, raw: Dict, subcommand: str) -> Path:
    """--output, then the config's output_dir, then $LENSPROBE_OUTPUT_ROOT/<config stem>/<subcommand>"""
    if args.output:
        return Path(args.output)
    if raw.get("output_dir"):
        return Path(raw["output_dir"])
    root = Path(os.getenv("LENSPROBE_OUTPUT_ROOT", "./outputs"))
    return root / Path(args.config).stem / subcommand


def resolve_jobs(args, raw: Dict) -> int:
    if args.jobs:
        return max(1, args.jobs)
    if "jobs" in raw:
        return int(raw["jobs"])
    return max(1, int(os.getenv("LENSPROBE_JOBS", "1")))


def run_lens(raw: Dict, out_dir: Path, jobs: int) -> List[Path]:
    domain = build_domain(raw["domain"])
    speed = build_speed(raw)
    probes = build_probes(raw["probes"], domain)
    metric = build_metric(raw, domain, speed)
    geodesic = raw.get("geodesic", {})

    if geodesic.get("adaptive", False):
        records = []
        for bp in tqdm(probes, desc="adaptive lens map"):
            try:
                records.append(lens_map_adaptive(metric, bp, tol=geodesic.get("tol", 1e-10)))
            except PreconditionError as e:
                logger.error(f"❌ Probe s={bp.s:.6g} mu={bp.mu:.6g} rejected: {e}")
                records.append(LensRecord(entry=bp, exit=None, length=float("nan"), trapped=False, error=str(e)))
        finite = [r.length for r in records if r.error is None and not r.trapped]
        T0 = float(max(finite)) if finite else float("nan")
    else:
        sweep = lens_sweep(metric, probes, jobs=jobs)
        records, T0 = sweep.records, sweep.T0_estimate

    rows = []
    for record in records:
        row = record.to_row()
        row["error"] = record.error or ""
        rows.append(row)
    summary = {
        "domain": domain.to_dict(),
        "speed": speed.to_dict(),
        "speed_fingerprint": speed.fingerprint,
        "probes": len(probes),
        "trapped": sum(1 for r in records if r.trapped),
        "rejected": sum(1 for r in records if r.error),
        "T0_estimate": T0,
        "adaptive": bool(geodesic.get("adaptive", False)),
    }
    return [
        write_csv(out_dir / "lens.csv", rows, LENS_COLUMNS + ["error"]),
        write_json(out_dir / "lens_summary.json", summary),
    ]


def run_wave(raw: Dict, out_dir: Path, jobs: int) -> List[Path]:
    domain = build_domain(raw["domain"])
    speed = build_speed(raw)
    section = raw["wave"]
    grid = WaveGrid.build(domain, section["dx"], section["T"], speeds=[speed], dt=section.get("dt"),
                          courant=section.get("courant", DEFAULT_COURANT),
                          trace_stride=int(section.get("trace_stride", 1)))

    signal_kind, body = next(iter(section["signal"].items()))
    plane = None
    if signal_kind == "plane_wave":
        plane = PlaneWave(body.get("angle", np.pi / 6), body.get("width", 0.5), body.get("delay", 0.0))
        f = plane.boundary_signal(grid)
    else:
        bp = BoundaryPhase(float(body["s"]), float(body["mu"]))
        f = boundary_probe(bp, body["h"], body["eps"], grid, speed=speed)

    trace, _ = solve_ibvp(speed, f, grid)
    paths: List[Path] = []
    if section.get("save_trace", True):
        paths.extend(trace.save(out_dir / "trace"))
    paths.append(trace.to_csv(out_dir / "trace.csv", time_stride=int(section.get("csv_stride", 1))))

    summary = {
        "grid": grid.info(),
        "signal": signal_kind,
        "signal_h1_norm": f.h1_norm(),
        "trace_l2_norm": trace.l2_norm(),
        "speed_fingerprint": speed.fingerprint,
    }
    c_lo, c_hi = speed.bounds(domain)
    if plane is not None and c_lo == 1.0 and c_hi == 1.0:
        exact = plane.exact_trace(grid)
        error = trace.values - exact
        summary["plane_wave_max_error"] = float(np.max(np.abs(error)))
        summary["plane_wave_relative_l2_error"] = float(np.linalg.norm(error) / max(np.linalg.norm(exact), 1e-300))
        logger.info(f"📊 Plane-wave DN error: max {summary['plane_wave_max_error']:.3e}")
    paths.append(write_json(out_dir / "wave_summary.json", summary))
    return paths


def run_probe(raw: Dict, out_dir: Path, jobs: int) -> List[Path]:
    domain = build_domain(raw["domain"])
    speed = build_speed(raw)
    probes = build_probes(raw["probes"], domain)
    metric = build_metric(raw, domain, speed)
    section = raw["probe"]
    h, eps, T = section["h"], section["eps"], section["T"]
    save_traces = section.get("save_traces", False)
    grid = probe_grid(domain, [speed], h, T, section.get("points_per_wavelength", POINTS_PER_WAVELENGTH))
    interior = speed.bounds(domain)

    rows = []
    paths: List[Path] = []
    stats = {"estimated": 0, "no_arrival": 0, "failed": 0}
    for i, bp in enumerate(tqdm(probes, desc="probing")):
        row = {c: np.nan for c in PROBE_COLUMNS}
        row.update({"s_in": bp.s, "mu_in": bp.mu, "h": h, "ambiguous": False, "flag": "", "error": ""})
        flags = []
        try:
            oracle = lens_map(metric, bp)
            row["oracle_length"] = oracle.length
            if oracle.exit is not None:
                row["oracle_s_out"] = oracle.exit.s
                row["oracle_mu_out"] = oracle.exit.mu
            try:
                _, row["window_t_hi"] = observation_window(metric, bp, eps, h, interior)
                if T > row["window_t_hi"]:
                    flags.append(PAST_SECOND_REFLECTION)
            except PreconditionError:
                flags.append(NO_WINDOW)
            est = extract_lens(speed, bp, h, eps, grid, T=T, keep_trace=save_traces)
            row.update({"est_length": est.length, "est_s_out": est.record.exit.s,
                        "est_mu_out": est.record.exit.mu, "ambiguous": est.ambiguous,
                        "detections": len(est.detections)})
            if oracle.exit is not None:
                row["length_error"] = abs(est.length - oracle.length)
                row["exit_error"] = abs(float(domain.arc_difference(est.record.exit.s, oracle.exit.s)))
            if est.trace is not None:
                paths.extend(est.trace.save(out_dir / f"trace_{i:03d}"))
            stats["estimated"] += 1
        except NoArrivalError as e:
            flags.append(NO_ARRIVAL)
            stats["no_arrival"] += 1
            logger.warning(f"⚠️ {e}")
        except NumericalAbortError:
            raise
        except LensToolkitError as e:
            row["error"] = str(e)
            stats["failed"] += 1
            logger.error(f"❌ Probe {i} (s={bp.s:.4g}, mu={bp.mu:.4g}) failed: {e}")
        row["flag"] = "; ".join(flags)
        rows.append(row)

    logger.info(f"📊 Probe stats: {stats}")
    paths.insert(0, write_csv(out_dir / "lens_estimates.csv", rows, PROBE_COLUMNS))
    paths.append(write_json(out_dir / "probe_summary.json",
                            {"h": h, "eps": eps, "T": T, "grid": grid.info(), "stats": stats}))
    return paths


def run_theorem31(raw: Dict, out_dir: Path, jobs: int) -> List[Path]:
    cfg = build_experiment(raw, output_dir=out_dir, jobs=jobs)
    report = run_theorem31_experiment(cfg)
    return write_bundle(report, out_dir)


def run_corollary(raw: Dict, out_dir: Path, jobs: int) -> List[Path]:
    cfg = build_experiment(raw, output_dir=out_dir, jobs=jobs)
    fol = build_foliation(raw["foliation"])
    section = raw.get("corollary", {})
    report = corollary_report(cfg, fol, lens_check=section.get("lens_check", "wave"),
                              grid_spacing=section.get("grid_spacing", 0.02))
    return write_corollary_bundle(report, out_dir)


def run_shiftdemo(raw: Dict, out_dir: Path, jobs: int) -> List[Path]:
    section = raw["shiftdemo"]
    modulated = section.get("modulated", "both")
    regimes = [False, True] if modulated == "both" else [modulated]
    rows = []
    summary = {"c1": section["c1"], "c2": section["c2"], "widths": section["widths"]}
    for regime in regimes:
        table = shift_norm_demo(section["c1"], section["c2"], section["widths"], modulated=regime,
                                dx=section.get("dx"))
        rows.extend(table)
        summary["modulated" if regime else "plain"] = [r["ratio"] for r in table]
    summary["note"] = ("shrinking supports alone give sqrt(2); the norm 2 is reached only by "
                       "packets modulated at pi / (c1 - c2)")
    return [
        write_csv(out_dir / "shift_demo.csv", rows, SHIFT_COLUMNS),
        write_json(out_dir / "shift_summary.json", summary),
    ]


PIPELINES: Dict[str, Callable[[Dict, Path, int], List[Path]]] = {
    "lens": run_lens,
    "wave": run_wave,
    "probe": run_probe,
    "theorem31": run_theorem31,
    "corollary": run_corollary,
    "shiftdemo": run_shiftdemo,
}


def run(config_path: str, subcommand: str, args) -> int:
    """Validate, execute one pipeline, write the manifest; returns the exit status"""
    started = datetime.now().isoformat(timespec="seconds")
    try:
        raw = load_config(config_path)
        require_valid(raw, subcommand)
        out_dir = resolve_output_dir(args, raw, subcommand)
        out_dir.mkdir(parents=True, exist_ok=True)
        jobs = resolve_jobs(args, raw)
        logger.info(f"🚀 {subcommand}: config {config_path} -> {out_dir} (jobs={jobs})")

        outputs = PIPELINES[subcommand](raw, out_dir, jobs)
        manifest = RunManifest(
            config_path=str(config_path),
            config_hash=canonical_hash(raw),
            subcommand=subcommand,
            started=started,
            finished=datetime.now().isoformat(timespec="seconds"),
            output_dir=str(out_dir),
            outputs=[str(p) for p in outputs],
        )
        manifest.write(out_dir)
    except ConfigError as e:
        logger.error(f"❌ Invalid configuration ({len(e.violations)} violations)")
        for violation in e.violations:
            print(f"  - {violation}", file=sys.stderr)
        return EXIT_PRECONDITION
    except PreconditionError as e:
        logger.error(f"❌ Precondition failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except NumericalAbortError as e:
        logger.error(f"❌ Numerical abort: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL

    print(f"✅ {subcommand} finished: {len(outputs)} outputs in {out_dir}")
    return EXIT_OK


def validate(config_path: str, subcommand: Optional[str]) -> int:
    """Print every violation without executing anything"""
    try:
        raw = load_config(config_path)
    except ConfigError as e:
        for violation in e.violations:
            print(f"  - {violation}", file=sys.stderr)
        return EXIT_PRECONDITION
    violations = validate_config(raw, subcommand)
    scope = f" for '{subcommand}'" if subcommand else ""
    if not violations:
        print(f"✅ {config_path}: valid{scope}")
        return EXIT_OK
    print(f"❌ {config_path}: {len(violations)} violation(s){scope}")
    for violation in violations:
        print(f"  - {violation}")
    return EXIT_PRECONDITION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lensprobe",
        description="Lens data, DN-map simulation and coherent-state probing on planar domains",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=f"run the {name} pipeline")
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--output", default=None, help="output directory (overrides config and env)")
        p.add_argument("--jobs", type=int, default=None, help="cap on worker processes")
    p = sub.add_parser("validate", help="check a config against the schema without running it")
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--for", dest="target", choices=SUBCOMMANDS, default=None,
                   help="also require the sections this subcommand needs")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    logging.basicConfig(level=os.getenv("LOG_LEVEL", "INFO").upper(),
                        format='%(asctime)s - %(levelname)s - %(message)s')
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        return validate(args.config, args.target)
    return run(args.config, args.command, args)


if __name__ == "__main__":
    sys.exit(main())
