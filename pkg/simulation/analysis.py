"""
Experiment harness: shift-operator norm demo, separation experiments over
probe families and h schedules, and the foliation/lens-equality report.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .domain import Domain
from .errors import LensToolkitError, NoArrivalError, PreconditionError, ResolutionError
from .foliation import DIMENSION_CAVEAT, FoliationReport, FoliationSpec, check_foliation
from .geometry import (
    DEFAULT_L_MAX,
    DEFAULT_STEP,
    GLANCING_LIMIT,
    BoundaryPhase,
    ConformalMetric,
    lens_sweep,
)
from .io import SCHEMA_VERSION, write_csv, write_json
from .probe import (
    POINTS_PER_WAVELENGTH,
    SAMPLING_POINTS,
    VERDICT_COLUMNS,
    boundary_probe,
    default_cutoff_radius,
    extract_lens,
    observation_window,
    probe_grid,
    separation_test,
)
from .speed import SpeedField, collar_difference
from .wave import discrepancy_ratio, solve_ibvp

logger = logging.getLogger(__name__)

DIRECT_TOLERANCE = 1e-8
GEODESIC_LENS_TOLERANCE = 1e-6
DELTA0_STABILITY = 0.2

SHORT_HORIZON = "T too small"
ORACLE_UNUSABLE = "oracle trapped/glancing"
PAST_SECOND_REFLECTION = "T past second reflection"
NO_WINDOW = "no observation window"
NO_ARRIVAL = "no arrival"
SKIPPED_FLAGS = (SHORT_HORIZON, ORACLE_UNUSABLE)

SHIFT_COLUMNS = ["sigma", "modulated", "frequency", "ratio"]
EXTENDED_COLUMNS = VERDICT_COLUMNS + [
    "probe_side_diff", "dn_ratio", "oracle_length_a", "oracle_length_b", "oracle_distinct",
    "est_length_a", "est_s_a", "est_mu_a", "ambiguous_a",
    "est_length_b", "est_s_b", "est_mu_b", "ambiguous_b", "window_t_hi", "flag", "error",
]


def shift_norm_demo(c1: float, c2: float, widths: Sequence[float], modulated: bool = False,
                    dx: Optional[float] = None) -> List[Dict]:
    """||(U_c1 - U_c2) f|| / ||f|| for Gaussian packets f of the given widths.

    With modulation the packets oscillate at pi / (c1 - c2), where the
    multiplier |exp(-i c1 k) - exp(-i c2 k)| reaches its maximum 2.
    """
    widths = [float(w) for w in widths]
    if not widths or min(widths) <= 0:
        raise ResolutionError("envelope widths must be positive")
    if c1 == c2:
        return [{"sigma": w, "modulated": modulated, "frequency": 0.0, "ratio": 0.0} for w in widths]

    omega = np.pi / (c1 - c2) if modulated else 0.0
    period = 2.0 * np.pi / abs(omega) if modulated else np.inf
    if dx is None:
        dx = min(min(widths) / 20.0, period / 16.0)
    if modulated and period / dx < 8.0:
        raise ResolutionError(
            f"grid step {dx:g} gives {period / dx:.2f} points per modulation period (needs >= 8)"
        )

    half = 6.0 * max(widths) + abs(c1) + abs(c2)
    x = np.arange(-half, half + dx, dx)
    rows = []
    for sigma in widths:
        def packet(y):
            return np.exp(-y ** 2 / (2.0 * sigma ** 2) + 1j * omega * y)

        f = packet(x)
        diff = packet(x - c1) - packet(x - c2)
        ratio = float(np.sqrt(np.sum(np.abs(diff) ** 2) / np.sum(np.abs(f) ** 2)))
        rows.append({"sigma": sigma, "modulated": modulated, "frequency": omega, "ratio": ratio})
    ratios = ", ".join(f"{r['ratio']:.4f}" for r in rows)
    kind = "modulated" if modulated else "plain"
    logger.info(f"📊 Shift demo ({kind}): {ratios}")
    return rows


@dataclass
class ExperimentConfig:
    domain: Domain
    speed_a: SpeedField
    speed_b: SpeedField
    probes: List[BoundaryPhase]
    h_schedule: List[float]
    eps: float
    T: float
    points_per_wavelength: int = POINTS_PER_WAVELENGTH
    L_max: float = DEFAULT_L_MAX
    geodesic_step: float = DEFAULT_STEP
    output_dir: Optional[Path] = None
    jobs: int = 1
    name: str = "experiment"

    def violations(self) -> List[str]:
        problems = []
        for i, bp in enumerate(self.probes):
            if abs(bp.mu) > GLANCING_LIMIT:
                problems.append(f"probes[{i}]: |mu| = {abs(bp.mu):g} exceeds the glancing margin {GLANCING_LIMIT}")
        if not self.h_schedule:
            problems.append("h_schedule is empty")
        if any(h <= 0 for h in self.h_schedule):
            problems.append("h_schedule entries must be positive")
        if any(b >= a for a, b in zip(self.h_schedule, self.h_schedule[1:])):
            problems.append(f"h_schedule must be strictly decreasing, got {self.h_schedule}")
        if self.points_per_wavelength < SAMPLING_POINTS:
            problems.append(f"points_per_wavelength {self.points_per_wavelength} below {SAMPLING_POINTS}")
        if self.h_schedule and max(self.h_schedule) > 0 and self.eps < 4.0 * default_cutoff_radius(max(self.h_schedule)):
            problems.append(
                f"eps = {self.eps:g} too small: needs eps >= 4 r_c = {4.0 * default_cutoff_radius(max(self.h_schedule)):.4g} for h = {max(self.h_schedule):g}"
            )
        if not self.T > self.eps:
            problems.append(f"T = {self.T:g} must exceed eps = {self.eps:g}")
        return problems

    def metric(self, speed: SpeedField) -> ConformalMetric:
        return ConformalMetric(self.domain, speed, step=self.geodesic_step, L_max=self.L_max)


@dataclass
class ExperimentReport:
    name: str
    rows: List[Dict]
    lower_bound: List[Dict]
    dn_bounds: List[Dict]
    summary: Dict
    started: str = ""
    finished: str = ""


def _arc_distance(a: float, b: float, period: float) -> float:
    return float(abs(np.mod(a - b + 0.5 * period, period) - 0.5 * period))


def _oracle_distinct(rec_a, rec_b, period: float, tol: float) -> bool:
    if rec_a.error or rec_b.error:
        return False
    if rec_a.trapped or rec_b.trapped:
        return rec_a.trapped != rec_b.trapped
    return (abs(rec_a.length - rec_b.length) > tol
            or _arc_distance(rec_a.exit.s, rec_b.exit.s, period) > tol)


def _probe_row(cfg: ExperimentConfig, grid, h: float, bp: BoundaryPhase, oracle_a, oracle_b,
               distinct: bool, interior_bounds: Tuple[float, float]) -> Dict:
    """Solve, detect and compare for one probe at one h; errors become row content"""
    row = {c: np.nan for c in EXTENDED_COLUMNS}
    row.update({"s_in": bp.s, "mu_in": bp.mu, "h": h, "verdict": "", "flag": "", "error": "",
                "oracle_length_a": oracle_a.length, "oracle_length_b": oracle_b.length,
                "oracle_distinct": distinct, "ambiguous_a": False, "ambiguous_b": False})
    lengths = (oracle_a.length, oracle_b.length)
    if not np.all(np.isfinite(lengths)):
        row["flag"] = ORACLE_UNUSABLE
        row["verdict"] = ORACLE_UNUSABLE
        return row
    if cfg.T < 0.5 * cfg.eps + max(lengths) + 3.0 * np.sqrt(h):
        row["flag"] = SHORT_HORIZON
        row["verdict"] = SHORT_HORIZON
        return row

    flags = []
    try:
        _, t_hi = observation_window(cfg.metric(cfg.speed_a), bp, cfg.eps, h, interior_bounds)
        row["window_t_hi"] = t_hi
        if cfg.T > t_hi:
            flags.append(PAST_SECOND_REFLECTION)
    except PreconditionError as e:
        flags.append(NO_WINDOW)
        logger.debug(f"Probe s={bp.s:.4g} mu={bp.mu:.4g}: {e}")
    try:
        f = boundary_probe(bp, h, cfg.eps, grid, speed=cfg.speed_a)
        trace_a, _ = solve_ibvp(cfg.speed_a, f, grid)
        same = cfg.speed_a.fingerprint == cfg.speed_b.fingerprint
        trace_b = trace_a if same else solve_ibvp(cfg.speed_b, f, grid)[0]
        verdict = separation_test(cfg.speed_a, cfg.speed_b, bp, h, cfg.eps, cfg.T, grid,
                                  traces=(trace_a, trace_b))
        row.update(verdict.to_row())
        row["probe_side_diff"] = verdict.probe_side_diff
        row["dn_ratio"] = discrepancy_ratio(trace_a, trace_b, f, (cfg.eps, cfg.T))
        for tag, speed, trace in (("a", cfg.speed_a, trace_a), ("b", cfg.speed_b, trace_b)):
            try:
                est = extract_lens(speed, bp, h, cfg.eps, grid, T=cfg.T, trace=trace)
                row[f"est_length_{tag}"] = est.record.length
                row[f"est_s_{tag}"] = est.record.exit.s
                row[f"est_mu_{tag}"] = est.record.exit.mu
                row[f"ambiguous_{tag}"] = est.ambiguous
            except NoArrivalError as e:
                if NO_ARRIVAL not in flags:
                    flags.append(NO_ARRIVAL)
                logger.warning(f"⚠️ {e}")
    except LensToolkitError as e:
        row["error"] = str(e)
        row["verdict"] = "error"
        logger.error(f"❌ Probe s={bp.s:.4g} mu={bp.mu:.4g} h={h:g} failed: {e}")
    row["flag"] = "; ".join(flags)
    return row


def _probe_row_task(args) -> Dict:
    return _probe_row(*args)


class Theorem31Experiment:
    """Runs the separation experiment for every probe and every h"""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.stats = {"rows": 0, "errors": 0, "flagged": 0, "distinct": 0, "consistent": 0, "inconclusive": 0}

    def oracle(self):
        metric_a = self.cfg.metric(self.cfg.speed_a)
        metric_b = self.cfg.metric(self.cfg.speed_b)
        sweep_a = lens_sweep(metric_a, self.cfg.probes, jobs=self.cfg.jobs)
        sweep_b = lens_sweep(metric_b, self.cfg.probes, jobs=self.cfg.jobs)
        return sweep_a, sweep_b

    def run(self) -> ExperimentReport:
        cfg = self.cfg
        started = datetime.now().isoformat(timespec="seconds")
        logger.info(f"🚀 Separation experiment '{cfg.name}': {len(cfg.probes)} probes x h = {cfg.h_schedule}")

        sweep_a, sweep_b = self.oracle()
        tol = float(np.sqrt(min(cfg.h_schedule)))
        period = cfg.domain.length
        distinct = [_oracle_distinct(a, b, period, tol) for a, b in zip(sweep_a.records, sweep_b.records)]

        bounds = [sp.bounds(cfg.domain) for sp in (cfg.speed_a, cfg.speed_b)]
        interior = (min(b[0] for b in bounds), max(b[1] for b in bounds))

        rows: List[Dict] = []
        for h in cfg.h_schedule:
            grid = probe_grid(cfg.domain, [cfg.speed_a, cfg.speed_b], h, cfg.T, cfg.points_per_wavelength)
            tasks = [(cfg, grid, h, bp, sweep_a.records[i], sweep_b.records[i], distinct[i], interior)
                     for i, bp in enumerate(cfg.probes)]
            if cfg.jobs > 1:
                with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                    h_rows = list(tqdm(pool.map(_probe_row_task, tasks), total=len(tasks), desc=f"h={h:g}"))
            else:
                h_rows = [_probe_row_task(t) for t in tqdm(tasks, desc=f"h={h:g}")]
            rows.extend(h_rows)

        for row in rows:
            self.stats["rows"] += 1
            if row["error"]:
                self.stats["errors"] += 1
            elif row["flag"] in SKIPPED_FLAGS:
                self.stats["flagged"] += 1
            elif row["verdict"] == "lens-distinct":
                self.stats["distinct"] += 1
            elif row["verdict"] == "lens-consistent":
                self.stats["consistent"] += 1
            else:
                self.stats["inconclusive"] += 1

        lower_bound = self.lower_bound_table(rows)
        dn_bounds = self.dn_bound_table(rows)
        summary = self.summarize(rows, distinct, lower_bound, sweep_a, sweep_b)
        finished = datetime.now().isoformat(timespec="seconds")
        logger.info(f"📊 Experiment stats: {self.stats}")
        return ExperimentReport(cfg.name, rows, lower_bound, dn_bounds, summary, started, finished)

    def lower_bound_table(self, rows: List[Dict]) -> List[Dict]:
        """min over probes of ||Lambda_A f||, i.e. 2 delta_0, per h"""
        table = []
        for h in self.cfg.h_schedule:
            norms = [np.sqrt(r["normA2"]) for r in rows
                     if r["h"] == h and not r["error"] and r["flag"] not in SKIPPED_FLAGS and np.isfinite(r["normA2"])]
            min_norm = float(min(norms)) if norms else float("nan")
            table.append({"h": h, "min_norm": min_norm, "delta0": 0.5 * min_norm, "probes": len(norms)})
        return table

    def dn_bound_table(self, rows: List[Dict]) -> List[Dict]:
        table = []
        for h in self.cfg.h_schedule:
            ratios = [r["dn_ratio"] for r in rows if r["h"] == h and np.isfinite(r["dn_ratio"])]
            table.append({"h": h, "operator_norm_lower_bound": float(max(ratios)) if ratios else float("nan")})
        return table

    def summarize(self, rows: List[Dict], distinct: List[bool], lower_bound: List[Dict],
                  sweep_a, sweep_b) -> Dict:
        cfg = self.cfg
        h_min = min(cfg.h_schedule)
        final = [r for r in rows if r["h"] == h_min]
        mismatches = []
        for i, row in enumerate(final):
            if row["error"] or row["flag"] in SKIPPED_FLAGS:
                continue
            if (row["verdict"] == "lens-distinct") != distinct[i]:
                mismatches.append({"probe": i, "s_in": row["s_in"], "mu_in": row["mu_in"],
                                   "verdict": row["verdict"], "oracle_distinct": distinct[i]})
        claim_holds = not mismatches and any(
            not r["error"] and r["flag"] not in SKIPPED_FLAGS for r in final)

        stable = None
        if len(lower_bound) >= 2:
            prev, last = lower_bound[-2]["delta0"], lower_bound[-1]["delta0"]
            if np.isfinite(prev) and np.isfinite(last) and prev > 0:
                stable = bool(abs(last - prev) <= DELTA0_STABILITY * prev)

        trend = {}
        for i, is_distinct in enumerate(distinct):
            if not is_distinct:
                continue
            series = []
            for h in cfg.h_schedule:
                match = [r for r in rows if r["h"] == h and r["s_in"] == cfg.probes[i].s
                         and r["mu_in"] == cfg.probes[i].mu and np.isfinite(r["defect"])]
                if match:
                    r = match[0]
                    series.append(r["defect"] / max(r["normA2"] + r["normB2"], 1e-300))
            trend[str(i)] = {"relative_defect": series,
                             "shrinking": bool(all(b <= a for a, b in zip(series, series[1:])))}

        return {
            "schema_version": SCHEMA_VERSION,
            "name": cfg.name,
            "h_schedule": cfg.h_schedule,
            "eps": cfg.eps,
            "T": cfg.T,
            "oracle_tolerance": float(np.sqrt(h_min)),
            "oracle_distinct": distinct,
            "T0_estimate_a": sweep_a.T0_estimate,
            "T0_estimate_b": sweep_b.T0_estimate,
            "claim_check": {"holds": claim_holds, "h": h_min, "mismatches": mismatches},
            "lower_bound": {"table": lower_bound, "delta0_stable": stable,
                            "note": "delta_0 is an empirical function of h, not a certified constant"},
            "defect_trend": trend,
            "stats": dict(self.stats),
            "operator_norm_note": "finitely many probes give only a lower bound on the operator norm",
        }


def run_theorem31_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    return Theorem31Experiment(cfg).run()


def _markdown_table(rows: List[Dict], columns: List[str]) -> List[str]:
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for row in rows:
        cells = []
        for c in columns:
            v = row.get(c, "")
            cells.append(f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return lines


def write_bundle(report: ExperimentReport, out_dir) -> List[Path]:
    """Verdict CSV, extended rows, lower-bound table, JSON summary and Markdown report"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [
        write_csv(out_dir / "verdicts.csv", report.rows, VERDICT_COLUMNS),
        write_csv(out_dir / "rows_extended.csv", report.rows, EXTENDED_COLUMNS),
        write_csv(out_dir / "lower_bound.csv", report.lower_bound, ["h", "min_norm", "delta0", "probes"]),
        write_csv(out_dir / "dn_lower_bound.csv", report.dn_bounds, ["h", "operator_norm_lower_bound"]),
        write_json(out_dir / "summary.json", report.summary),
    ]
    claim = report.summary["claim_check"]
    lines = [
        f"# Separation experiment: {report.name}",
        "",
        f"- h schedule: {report.summary['h_schedule']}",
        f"- eps = {report.summary['eps']:g}, T = {report.summary['T']:g}",
        f"- claim check at h = {claim['h']:g}: {'holds' if claim['holds'] else 'FAILS'}"
        f" ({len(claim['mismatches'])} mismatches)",
        f"- delta_0 stable across the two smallest h: {report.summary['lower_bound']['delta0_stable']}",
        "",
        "## Verdicts",
        "",
        *_markdown_table(report.rows, VERDICT_COLUMNS + ["flag"]),
        "",
        "## Lower bound on ||Lambda f|| (2 delta_0)",
        "",
        *_markdown_table(report.lower_bound, ["h", "min_norm", "delta0", "probes"]),
        "",
        "## DN discrepancy (operator-norm lower bound)",
        "",
        *_markdown_table(report.dn_bounds, ["h", "operator_norm_lower_bound"]),
        "",
    ]
    md = out_dir / "report.md"
    md.write_text("\n".join(lines), encoding="utf-8")
    paths.append(md)
    return paths


@dataclass
class CorollaryReport:
    asserted: bool
    status: str
    collar_difference: float
    foliation: FoliationReport
    lens_equal: bool
    lens_check: str
    counterexamples: List[Dict]
    direct_max_difference: float
    caveat: str = DIMENSION_CAVEAT
    experiment: Optional[ExperimentReport] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "asserted": self.asserted,
            "status": self.status,
            "collar_difference": self.collar_difference,
            "foliation": self.foliation.to_dict(),
            "lens_equal": self.lens_equal,
            "lens_check": self.lens_check,
            "counterexamples": self.counterexamples,
            "direct_max_difference": self.direct_max_difference,
            "caveat": self.caveat,
        }


def _target_points(cfg: ExperimentConfig, fol: FoliationSpec, spacing: float) -> np.ndarray:
    pts = cfg.domain.interior_samples(spacing)
    return pts[fol.target.contains(pts)]


def corollary_report(cfg: ExperimentConfig, fol: FoliationSpec, lens_check: str = "wave",
                     grid_spacing: float = 0.02) -> CorollaryReport:
    """Check the foliation hypotheses and lens equality, then decide whether c = c~ on M0 may be asserted"""
    if lens_check not in ("wave", "geodesic"):
        raise ValueError(f"lens_check must be 'wave' or 'geodesic', got {lens_check!r}")
    logger.info(f"🚀 Corollary report '{cfg.name}' ({lens_check} lens check)")

    width = min(cfg.speed_a.collar_width, cfg.speed_b.collar_width)
    collar_diff = collar_difference(cfg.speed_a, cfg.speed_b, cfg.domain, width)
    collar_ok = collar_diff < 1e-12

    foliation = check_foliation(cfg.metric(cfg.speed_a), fol, grid_spacing=grid_spacing)

    counterexamples: List[Dict] = []
    experiment = None
    if lens_check == "geodesic":
        sweep_a = lens_sweep(cfg.metric(cfg.speed_a), cfg.probes, jobs=cfg.jobs)
        sweep_b = lens_sweep(cfg.metric(cfg.speed_b), cfg.probes, jobs=cfg.jobs)
        for i, (a, b) in enumerate(zip(sweep_a.records, sweep_b.records)):
            if _oracle_distinct(a, b, cfg.domain.length, GEODESIC_LENS_TOLERANCE) or (
                    a.exit is not None and b.exit is not None
                    and abs(a.exit.mu - b.exit.mu) > GEODESIC_LENS_TOLERANCE):
                counterexamples.append({"probe": i, "s_in": a.entry.s, "mu_in": a.entry.mu,
                                        "length_a": a.length, "length_b": b.length,
                                        "s_out_a": a.exit.s if a.exit else None,
                                        "s_out_b": b.exit.s if b.exit else None})
    else:
        experiment = run_theorem31_experiment(cfg)
        h_min = min(cfg.h_schedule)
        for row in experiment.rows:
            if row["h"] == h_min and row["verdict"] in ("lens-distinct", "inconclusive"):
                counterexamples.append({"s_in": row["s_in"], "mu_in": row["mu_in"], "verdict": row["verdict"],
                                        "diff2": row["diff2"]})
    lens_equal = not counterexamples

    target = _target_points(cfg, fol, grid_spacing)
    direct = float(np.max(np.abs(cfg.speed_a(target) - cfg.speed_b(target)))) if len(target) else 0.0

    if not collar_ok:
        status = f"precondition failed: speeds differ by {collar_diff:.3e} near the boundary; implication not asserted"
    elif not foliation.passed:
        status = f"foliation hypotheses fail ({foliation.counts}); implication not asserted"
    elif not lens_equal:
        status = f"lens data differ on {len(counterexamples)} probes; implication not asserted"
    elif direct > DIRECT_TOLERANCE:
        status = (f"hypotheses and lens equality hold at this sampling, but the direct check finds "
                  f"max|c - c~| = {direct:.3e} on M0; implication withheld")
    else:
        status = "c = c~ on M0 (by Corollary)"
    asserted = status == "c = c~ on M0 (by Corollary)"

    if asserted:
        logger.info(f"✅ {status}")
    else:
        logger.warning(f"⚠️ {status}")
    return CorollaryReport(
        asserted=asserted, status=status, collar_difference=collar_diff, foliation=foliation,
        lens_equal=lens_equal, lens_check=lens_check, counterexamples=counterexamples,
        direct_max_difference=direct, experiment=experiment,
    )


def write_corollary_bundle(report: CorollaryReport, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_json(out_dir / "corollary.json", report.to_dict())]
    report.foliation.to_json(out_dir / "foliation.json")
    paths.append(out_dir / "foliation.json")
    if report.experiment is not None:
        paths.extend(write_bundle(report.experiment, out_dir / "experiment"))
    lines = [
        "# Corollary report",
        "",
        f"**Verdict:** {report.status}",
        "",
        f"- collar difference: {report.collar_difference:.3e}",
        f"- foliation passed: {report.foliation.passed} (violations {report.foliation.counts})",
        f"- lens check ({report.lens_check}): {'equal' if report.lens_equal else 'differ'}"
        f" ({len(report.counterexamples)} counterexample rows)",
        f"- direct max |c - c~| on M0: {report.direct_max_difference:.3e}",
        "",
        f"> {report.caveat}",
        "",
    ]
    md = out_dir / "corollary.md"
    md.write_text("\n".join(lines), encoding="utf-8")
    paths.append(md)
    return paths
