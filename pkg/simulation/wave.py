"""
Time-domain acoustic wave solver and the hyperbolic Dirichlet-to-Neumann map.

Solves u_tt = c(x)^2 (Laplacian u) + q with zero initial data and Dirichlet
data f on the boundary, by second-order finite differences and leapfrog
stepping. Rectangles are gridded natively (boundary nodes carry f); curved
domains use an embedded boundary: Shortley-Weller stencils on cut arms and
linear extrapolation for nodes sitting very close to the boundary.
The DN trace is the one-sided second-order normal difference at boundary
samples.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse

from .domain import Domain, RectangleDomain
from .errors import CFLViolation, NumericalAbortError, PreconditionError
from .io import SCHEMA_VERSION, to_jsonable
from .speed import SpeedField

logger = logging.getLogger(__name__)

CFL_FACTOR = 0.5
DEFAULT_COURANT = 0.4
PIN_FRACTION = 0.5

DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def cfl_bound(dx: float, c_max: float) -> float:
    return CFL_FACTOR * dx / c_max


def _periodic_interpolation(s_query: np.ndarray, n_s: int, period: float) -> sparse.csr_matrix:
    """Rows interpolate uniform periodic samples (spacing period/n_s) at s_query"""
    ds = period / n_s
    pos = np.mod(s_query, period) / ds
    j0 = np.floor(pos).astype(int) % n_s
    w = pos - np.floor(pos)
    rows = np.repeat(np.arange(len(s_query)), 2)
    cols = np.stack([j0, (j0 + 1) % n_s], axis=1).ravel()
    vals = np.stack([1.0 - w, w], axis=1).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(s_query), n_s))


@dataclass
class WaveGrid:
    """Uniform grid over a domain with the operators the leapfrog scheme needs"""

    domain: Domain
    dx: float
    dt: float
    T: float
    n_steps: int
    xs: np.ndarray
    ys: np.ndarray
    inside: np.ndarray
    active: np.ndarray
    pinned: np.ndarray
    s: np.ndarray
    lap: sparse.csr_matrix
    lap_boundary: sparse.csr_matrix
    pin_u: sparse.csr_matrix
    pin_f: sparse.csr_matrix
    trace_near: sparse.csr_matrix
    trace_far: sparse.csr_matrix
    trace_depth: float
    edges: np.ndarray
    c_max: float
    trace_stride: int = 1

    @property
    def shape(self) -> Tuple[int, int]:
        return len(self.xs), len(self.ys)

    @property
    def n_nodes(self) -> int:
        return len(self.xs) * len(self.ys)

    @property
    def n_s(self) -> int:
        return len(self.s)

    @property
    def boundary_spacing(self) -> float:
        return self.domain.length / self.n_s

    @property
    def node_points(self) -> np.ndarray:
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        return np.stack([X.ravel(), Y.ravel()], axis=-1)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def info(self) -> Dict:
        return {
            "domain": self.domain.to_dict(),
            "dx": self.dx,
            "dt": self.dt,
            "T": self.T,
            "n_steps": self.n_steps,
            "nx": len(self.xs),
            "ny": len(self.ys),
            "n_s": self.n_s,
            "trace_stride": self.trace_stride,
        }

    @classmethod
    def build(cls, domain: Domain, dx: float, T: float, speeds: Sequence[SpeedField] = (),
              dt: Optional[float] = None, courant: float = DEFAULT_COURANT,
              c_max: Optional[float] = None, trace_stride: int = 1) -> "WaveGrid":
        """Grid the domain; dt defaults to courant*dx/c_max shrunk to divide T"""
        if dx <= 0 or T <= 0:
            raise PreconditionError(f"dx and T must be positive, got dx={dx}, T={T}")
        if isinstance(domain, RectangleDomain):
            parts = _rectangle_operators(domain, dx)
        else:
            parts = _embedded_operators(domain, dx)

        if c_max is None:
            pts = np.concatenate([parts["nodes"][parts["inside"]], domain.boundary_point(parts["s"])])
            c_max = max([float(np.max(sp(pts))) for sp in speeds] or [1.0])
        bound = cfl_bound(parts["dx"], c_max)
        if dt is None:
            dt_max = courant * parts["dx"] / c_max
            n_steps = int(np.ceil(T / dt_max - 1e-9))
            dt = T / n_steps
        else:
            if dt > bound * (1.0 + 1e-12):
                raise CFLViolation(dt, bound)
            n_steps = int(np.ceil(T / dt - 1e-9))
        T_eff = n_steps * dt

        grid = cls(
            domain=domain, dx=parts["dx"], dt=float(dt), T=float(T_eff), n_steps=n_steps,
            xs=parts["xs"], ys=parts["ys"], inside=parts["inside"], active=parts["active"],
            pinned=parts["pinned"], s=parts["s"], lap=parts["lap"],
            lap_boundary=parts["lap_boundary"], pin_u=parts["pin_u"], pin_f=parts["pin_f"],
            trace_near=parts["trace_near"], trace_far=parts["trace_far"],
            trace_depth=parts["trace_depth"], edges=parts["edges"], c_max=float(c_max),
            trace_stride=int(trace_stride),
        )
        logger.info(
            f"📊 Wave grid: {len(grid.xs)}x{len(grid.ys)} nodes ({len(grid.active)} active, "
            f"{len(grid.pinned)} pinned), dx={grid.dx:.4g}, dt={grid.dt:.4g}, {n_steps} steps, n_s={grid.n_s}"
        )
        return grid


def _bilinear(xs: np.ndarray, ys: np.ndarray, points: np.ndarray, inside: np.ndarray) -> Tuple[sparse.csr_matrix, int]:
    dx = xs[1] - xs[0]
    ny = len(ys)
    fx = (points[:, 0] - xs[0]) / dx
    fy = (points[:, 1] - ys[0]) / dx
    i0 = np.clip(np.floor(fx).astype(int), 0, len(xs) - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, ny - 2)
    wx = fx - i0
    wy = fy - j0
    cols = np.stack([i0 * ny + j0, (i0 + 1) * ny + j0, i0 * ny + j0 + 1, (i0 + 1) * ny + j0 + 1], axis=1)
    vals = np.stack([(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], axis=1)
    outside = int(np.sum(~inside[cols] & (vals > 1e-14)))
    rows = np.repeat(np.arange(len(points)), 4)
    matrix = sparse.csr_matrix((vals.ravel(), (rows, cols.ravel())), shape=(len(points), len(xs) * ny))
    return matrix, outside


def _edge_pairs(inside_2d: np.ndarray) -> np.ndarray:
    nx, ny = inside_2d.shape
    idx = np.arange(nx * ny).reshape(nx, ny)
    horizontal = inside_2d[:-1, :] & inside_2d[1:, :]
    vertical = inside_2d[:, :-1] & inside_2d[:, 1:]
    pairs = [np.stack([idx[:-1, :][horizontal], idx[1:, :][horizontal]], axis=1),
             np.stack([idx[:, :-1][vertical], idx[:, 1:][vertical]], axis=1)]
    return np.concatenate(pairs, axis=0)


def _trace_operators(domain: Domain, s: np.ndarray, depth: float, xs, ys, inside_flat):
    xb = domain.boundary_point(s)
    nu = domain.normal(s)
    near, bad_near = _bilinear(xs, ys, xb - depth * nu, inside_flat)
    far, bad_far = _bilinear(xs, ys, xb - 2.0 * depth * nu, inside_flat)
    if bad_near or bad_far:
        logger.warning(f"⚠️ {bad_near + bad_far} normal-difference stencil weights touch nodes outside the domain")
    return near, far


def fit_rectangle_spacing(domain: RectangleDomain, dx: float) -> float:
    """Largest cell size <= dx that splits both sides of the rectangle into whole cells"""
    a, b = domain.width, domain.height
    n_min = max(int(np.ceil(a / dx - 1e-9)), 1)
    for nx in range(n_min, 2 * n_min + 1):
        h = a / nx
        ny = int(round(b / h))
        if ny > 0 and abs(b / ny - h) <= 1e-9 * h:
            return h
    raise PreconditionError(
        f"rectangle {a} x {b} has no common cell size between {a / (2 * n_min):.4g} and {dx:.4g}"
    )


def _rectangle_operators(domain: RectangleDomain, dx: float) -> Dict:
    a, b = domain.width, domain.height
    nx = int(round(a / dx))
    ny = int(round(b / dx))
    h = a / nx
    if abs(b / ny - h) > 1e-9 * h:
        raise PreconditionError(f"rectangle {a} x {b} is not an integer number of cells of size {dx}")
    xs = h * np.arange(nx + 1)
    ys = h * np.arange(ny + 1)
    NY = ny + 1

    def flat(i, j):
        return np.asarray(i) * NY + np.asarray(j)

    # boundary nodes counter-clockwise from the origin: bottom, right, top, left
    bi = np.concatenate([np.arange(nx), np.full(ny, nx), np.arange(nx, 0, -1), np.zeros(ny, dtype=int)])
    bj = np.concatenate([np.zeros(nx, dtype=int), np.arange(ny), np.full(nx, ny), np.arange(ny, 0, -1)])
    pinned = flat(bi, bj)
    s = h * np.arange(len(pinned))

    I, J = np.meshgrid(np.arange(1, nx), np.arange(1, ny), indexing="ij")
    active = flat(I.ravel(), J.ravel())
    n_active = len(active)
    n_nodes = (nx + 1) * NY

    rows = [np.arange(n_active)]
    cols = [active]
    vals = [np.full(n_active, -4.0 / h ** 2)]
    for di, dj in DIRECTIONS:
        rows.append(np.arange(n_active))
        cols.append(flat(I.ravel() + di, J.ravel() + dj))
        vals.append(np.full(n_active, 1.0 / h ** 2))
    lap = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                            shape=(n_active, n_nodes))

    inside = np.ones(n_nodes, dtype=bool)
    near, far = _trace_operators(domain, s, h, xs, ys, inside)
    nodes = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    return {
        "dx": h, "xs": xs, "ys": ys, "nodes": nodes, "inside": inside, "active": active,
        "pinned": pinned, "s": s, "lap": lap,
        "lap_boundary": sparse.csr_matrix((n_active, len(s))),
        "pin_u": sparse.csr_matrix((len(pinned), n_nodes)),
        "pin_f": sparse.identity(len(pinned), format="csr"),
        "trace_near": near, "trace_far": far, "trace_depth": h,
        "edges": _edge_pairs(np.ones((nx + 1, NY), dtype=bool)),
    }


def _embedded_operators(domain: Domain, dx: float) -> Dict:
    xmin, xmax, ymin, ymax = domain.bounding_box()
    nx = int(np.ceil((xmax - xmin) / dx)) + 4
    ny = int(np.ceil((ymax - ymin) / dx)) + 4
    xs = xmin - 2.0 * dx + dx * np.arange(nx + 1)
    ys = ymin - 2.0 * dx + dx * np.arange(ny + 1)
    NY = ny + 1
    n_nodes = (nx + 1) * NY
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=-1)
    inside = domain.defining_function(nodes) < 0.0
    inside_idx = np.flatnonzero(inside)

    period = domain.length
    n_s = max(int(np.ceil(period / dx)), 8)
    s = period * np.arange(n_s) / n_s

    # arm lengths (in units of dx) and cut-point arclengths for the four directions
    arms = np.ones((len(inside_idx), 4))
    cut_s = np.full((len(inside_idx), 4), np.nan)
    neighbor = np.zeros((len(inside_idx), 4), dtype=int)
    ii, jj = np.divmod(inside_idx, NY)
    for k, (di, dj) in enumerate(DIRECTIONS):
        nb = (ii + di) * NY + (jj + dj)
        neighbor[:, k] = nb
        cut = ~inside[nb]
        if cut.any():
            p = nodes[inside_idx[cut]]
            q = nodes[nb[cut]]
            theta = domain.segment_crossing(p, q)
            theta = np.maximum(theta, 1e-6)
            arms[cut, k] = theta
            cut_s[cut, k] = domain.arclength_of(p + theta[:, None] * (q - p))

    min_arm = arms.min(axis=1)
    pinned_mask = min_arm < PIN_FRACTION
    active = inside_idx[~pinned_mask]
    pinned = inside_idx[pinned_mask]
    is_active = np.zeros(n_nodes, dtype=bool)
    is_active[active] = True

    # Shortley-Weller rows for the active nodes
    A = arms[~pinned_mask] * dx
    nbA = neighbor[~pinned_mask]
    sA = cut_s[~pinned_mask]
    n_active = len(active)
    pairs = ((0, 1), (2, 3))
    node_rows, node_cols, node_vals = [], [], []
    cut_rows, cut_vals, cut_arcs = [], [], []
    center = np.zeros(n_active)
    for plus, minus in pairs:
        hp, hm = A[:, plus], A[:, minus]
        coeff = {plus: 2.0 / (hp * (hp + hm)), minus: 2.0 / (hm * (hp + hm))}
        center -= 2.0 / (hp * hm)
        for k in (plus, minus):
            regular = np.isnan(sA[:, k])
            node_rows.append(np.flatnonzero(regular))
            node_cols.append(nbA[regular, k])
            node_vals.append(coeff[k][regular])
            cut_rows.append(np.flatnonzero(~regular))
            cut_vals.append(coeff[k][~regular])
            cut_arcs.append(sA[~regular, k])
    node_rows.append(np.arange(n_active))
    node_cols.append(active)
    node_vals.append(center)
    lap = sparse.csr_matrix((np.concatenate(node_vals), (np.concatenate(node_rows), np.concatenate(node_cols))),
                            shape=(n_active, n_nodes))
    cut_arcs = np.concatenate(cut_arcs)
    cut_matrix = sparse.csr_matrix((np.concatenate(cut_vals), (np.concatenate(cut_rows), np.arange(len(cut_arcs)))),
                                   shape=(n_active, len(cut_arcs)))
    lap_boundary = (cut_matrix @ _periodic_interpolation(cut_arcs, n_s, period)).tocsr()

    # pinned nodes: linear extrapolation between the nearest cut point and the opposite neighbor
    P_arms = arms[pinned_mask]
    P_s = cut_s[pinned_mask]
    P_nb = neighbor[pinned_mask]
    k_min = np.argmin(P_arms, axis=1)
    theta = P_arms[np.arange(len(pinned)), k_min]
    arc = P_s[np.arange(len(pinned)), k_min]
    opposite = P_nb[np.arange(len(pinned)), k_min ^ 1]
    usable = is_active[opposite]
    w_f = np.where(usable, 1.0 / (1.0 + theta), 1.0)
    w_u = np.where(usable, theta / (1.0 + theta), 0.0)
    rows = np.flatnonzero(usable)
    pin_u = sparse.csr_matrix((w_u[usable], (rows, opposite[usable])), shape=(len(pinned), n_nodes))
    pin_f = (sparse.diags(w_f) @ _periodic_interpolation(arc, n_s, period)).tocsr()
    if not usable.all():
        logger.debug(f"{int((~usable).sum())} pinned nodes take the boundary value directly")

    depth = 2.0 * dx
    near, far = _trace_operators(domain, s, depth, xs, ys, inside)
    return {
        "dx": dx, "xs": xs, "ys": ys, "nodes": nodes, "inside": inside, "active": active,
        "pinned": pinned, "s": s, "lap": lap, "lap_boundary": lap_boundary,
        "pin_u": pin_u, "pin_f": pin_f, "trace_near": near, "trace_far": far,
        "trace_depth": depth, "edges": _edge_pairs(inside.reshape(nx + 1, NY)),
    }


@dataclass
class BoundarySignal:
    """Dirichlet data f(t_n, s_j), t_n = n*dt, with f(0, .) = 0; time slices past the stored ones are zero"""

    values: np.ndarray
    dt: float
    s: np.ndarray
    period: float
    label: str = ""

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.values.shape[1] != len(self.s):
            raise PreconditionError(f"signal has {self.values.shape[1]} boundary samples, expected {len(self.s)}")
        if np.any(self.values[0] != 0.0):
            raise PreconditionError(
                f"signal '{self.label}' is non-zero at t = 0; Dirichlet data must vanish with the zero initial state"
            )

    @classmethod
    def zeros(cls, grid: WaveGrid, n_t: int = 1) -> "BoundarySignal":
        return cls(np.zeros((n_t, grid.n_s)), grid.dt, grid.s.copy(), grid.domain.length, "zero")

    @classmethod
    def from_function(cls, grid: WaveGrid, func: Callable, t_max: Optional[float] = None,
                      label: str = "") -> "BoundarySignal":
        """Sample func(t, s) (broadcasting) on the grid's times and boundary samples"""
        t_max = grid.T if t_max is None else min(t_max, grid.T)
        n_t = int(np.floor(t_max / grid.dt + 1e-9)) + 1
        t = grid.dt * np.arange(n_t)
        values = func(t[:, None], grid.s[None, :])
        return cls(np.broadcast_to(values, (n_t, grid.n_s)).copy(), grid.dt, grid.s.copy(),
                   grid.domain.length, label)

    @property
    def n_t(self) -> int:
        return self.values.shape[0]

    @property
    def ds(self) -> float:
        return self.period / len(self.s)

    def at(self, n: int) -> np.ndarray:
        if n < self.n_t:
            return self.values[n]
        return np.zeros(len(self.s))

    def vanishing_steps(self) -> int:
        """Number of leading all-zero time slices"""
        nonzero = np.flatnonzero(np.any(self.values != 0.0, axis=1))
        return int(nonzero[0]) if nonzero.size else self.n_t

    def first_nonzero_time(self) -> float:
        return self.vanishing_steps() * self.dt

    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.values ** 2) * self.dt * self.ds))

    def h1_norm(self) -> float:
        """Discrete H^1 norm from forward time and periodic tangential differences"""
        padded = np.vstack([self.values, np.zeros((1, len(self.s)))])
        f_t = np.diff(padded, axis=0) / self.dt
        f_s = (np.roll(self.values, -1, axis=1) - self.values) / self.ds
        total = np.sum(self.values ** 2) + np.sum(f_t ** 2) + np.sum(f_s ** 2)
        return float(np.sqrt(total * self.dt * self.ds))

    def __add__(self, other: "BoundarySignal") -> "BoundarySignal":
        n = max(self.n_t, other.n_t)
        a = np.zeros((n, len(self.s)))
        a[: self.n_t] += self.values
        a[: other.n_t] += other.values
        return BoundarySignal(a, self.dt, self.s, self.period, f"{self.label}+{other.label}")

    def __mul__(self, k: float) -> "BoundarySignal":
        return BoundarySignal(k * self.values, self.dt, self.s, self.period, self.label)

    __rmul__ = __mul__


def arc_mask(s: np.ndarray, period: float, arc: Optional[Tuple[float, float]]) -> np.ndarray:
    """Samples within half-width arc[1] of arc[0] (periodic); everything when arc is None"""
    if arc is None:
        return np.ones(len(s), dtype=bool)
    center, half_width = arc
    d = np.mod(s - center + 0.5 * period, period) - 0.5 * period
    return np.abs(d) <= half_width


@dataclass
class DNTrace:
    """Normal-derivative samples (Lambda f)(t_i, s_j) on the stored time levels"""

    values: np.ndarray
    dt: float
    s: np.ndarray
    period: float
    speed_fingerprint: str = ""
    grid_info: Dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.values.shape[0])

    @property
    def ds(self) -> float:
        return self.period / len(self.s)

    def window_mask(self, window: Optional[Tuple[float, float]]) -> np.ndarray:
        t = self.times
        if window is None:
            return np.ones(len(t), dtype=bool)
        return (t > window[0]) & (t <= window[1] + 1e-12)

    def squared_norm(self, window: Optional[Tuple[float, float]] = None,
                     arc: Optional[Tuple[float, float]] = None) -> float:
        block = self.values[self.window_mask(window)][:, arc_mask(self.s, self.period, arc)]
        return float(np.sum(block ** 2) * self.dt * self.ds)

    def l2_norm(self, window=None, arc=None) -> float:
        return float(np.sqrt(self.squared_norm(window, arc)))

    def __sub__(self, other: "DNTrace") -> "DNTrace":
        if self.values.shape != other.values.shape:
            raise PreconditionError("traces come from different grids")
        return DNTrace(self.values - other.values, self.dt, self.s, self.period,
                       f"{self.speed_fingerprint}-{other.speed_fingerprint}", self.grid_info)

    def save(self, prefix: Union[str, Path]) -> List[Path]:
        """Flat little-endian float64 array plus a JSON sidecar"""
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        data_path = prefix.with_suffix(".bin")
        meta_path = prefix.with_suffix(".json")
        self.values.astype("<f8").tofile(data_path)
        meta = {
            "schema_version": SCHEMA_VERSION,
            "dims": list(self.values.shape),
            "dtype": "float64-le",
            "dt": self.dt,
            "period": self.period,
            "s": self.s,
            "speed_sha256": self.speed_fingerprint,
            "grid": self.grid_info,
        }
        meta_path.write_text(json.dumps(to_jsonable(meta), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return [data_path, meta_path]

    @classmethod
    def load(cls, prefix: Union[str, Path]) -> "DNTrace":
        prefix = Path(prefix)
        meta = json.loads(prefix.with_suffix(".json").read_text(encoding="utf-8"))
        values = np.fromfile(prefix.with_suffix(".bin"), dtype="<f8").reshape(meta["dims"])
        return cls(values, meta["dt"], np.asarray(meta["s"], dtype=float), meta["period"],
                   meta.get("speed_sha256", ""), meta.get("grid", {}))

    def to_csv(self, path: Union[str, Path], time_stride: int = 1) -> Path:
        """Long-format t,s,value table for plotting"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        block = self.values[::time_stride]
        t = self.times[::time_stride]
        frame = pd.DataFrame({
            "t": np.repeat(t, len(self.s)),
            "s": np.tile(self.s, len(t)),
            "value": block.ravel(),
        })
        frame.to_csv(path, index=False, float_format="%.17g")
        return path


@dataclass
class SolverState:
    """Three consecutive time levels handed to solver callbacks"""

    grid: WaveGrid
    n: int
    t: float
    u_prev: np.ndarray
    u: np.ndarray
    u_next: np.ndarray
    c2: np.ndarray


def discrete_energy(state: SolverState) -> float:
    """Centered kinetic energy over active nodes plus edge-gradient energy of u^n"""
    grid = state.grid
    velocity = (state.u_next[grid.active] - state.u_prev[grid.active]) / (2.0 * grid.dt)
    kinetic = np.sum(velocity ** 2 / state.c2) * grid.dx ** 2
    i, j = grid.edges[:, 0], grid.edges[:, 1]
    potential = np.sum((state.u[i] - state.u[j]) ** 2)
    return float(kinetic + potential)


def solve_ibvp(speed: SpeedField, f: BoundarySignal, grid: WaveGrid,
               source: Optional[Callable] = None, callback: Optional[Callable] = None,
               snapshot_every: Optional[int] = None) -> Tuple[DNTrace, List[Tuple[float, np.ndarray]]]:
    """Leapfrog solve with zero initial data and Dirichlet data f.

    source(t, X, Y) adds a forcing term on active nodes; callback(state)
    runs after every step. Returns the DN trace and optional snapshots.
    """
    if abs(f.dt - grid.dt) > 1e-12 * grid.dt or len(f.s) != grid.n_s:
        raise PreconditionError(
            f"boundary signal (dt={f.dt:.6g}, n_s={len(f.s)}) does not match the grid (dt={grid.dt:.6g}, n_s={grid.n_s})"
        )
    bound = cfl_bound(grid.dx, grid.c_max)
    if grid.dt > bound * (1.0 + 1e-12):
        raise CFLViolation(grid.dt, bound)

    nodes = grid.node_points
    c_active = speed(nodes[grid.active])
    if np.max(c_active) > grid.c_max * (1.0 + 1e-9):
        bound = cfl_bound(grid.dx, float(np.max(c_active)))
        if grid.dt > bound:
            raise CFLViolation(grid.dt, bound)
    c2 = c_active ** 2
    X = nodes[grid.active, 0]
    Y = nodes[grid.active, 1]
    dt2 = grid.dt ** 2
    depth = grid.trace_depth

    def trace_of(u: np.ndarray, fn: np.ndarray) -> np.ndarray:
        return (3.0 * fn - 4.0 * (grid.trace_near @ u) + grid.trace_far @ u) / (2.0 * depth)

    def acceleration(u: np.ndarray, n: int) -> np.ndarray:
        acc = c2 * (grid.lap @ u + grid.lap_boundary @ f.at(n))
        if source is not None:
            acc = acc + source(n * grid.dt, X, Y)
        return acc

    def pin(u: np.ndarray, n: int) -> None:
        u[grid.pinned] = grid.pin_u @ u + grid.pin_f @ f.at(n)

    K = grid.n_steps
    stride = grid.trace_stride
    trace = np.zeros((K // stride + 1, grid.n_s))
    snapshots: List[Tuple[float, np.ndarray]] = []

    u_prev = np.zeros(grid.n_nodes)
    u = np.zeros(grid.n_nodes)
    pin(u, 0)
    trace[0] = trace_of(u, f.at(0))
    if snapshot_every:
        snapshots.append((0.0, u.reshape(grid.shape).copy()))

    u_next = np.zeros(grid.n_nodes)
    u_next[grid.active] = u[grid.active] + 0.5 * dt2 * acceleration(u, 0)
    pin(u_next, 1)
    if not np.isfinite(u_next).all():
        raise NumericalAbortError("non-finite wave field", step=1)

    for n in range(1, K + 1):
        u_prev, u = u, u_next
        if n % stride == 0:
            trace[n // stride] = trace_of(u, f.at(n))
        if snapshot_every and n % snapshot_every == 0:
            snapshots.append((n * grid.dt, u.reshape(grid.shape).copy()))
        if n == K:
            break
        u_next = np.zeros(grid.n_nodes)
        u_next[grid.active] = 2.0 * u[grid.active] - u_prev[grid.active] + dt2 * acceleration(u, n)
        pin(u_next, n + 1)
        if not np.isfinite(u_next).all():
            raise NumericalAbortError("non-finite wave field", step=n + 1)
        if callback is not None:
            callback(SolverState(grid, n, n * grid.dt, u_prev, u, u_next, c2))

    if not np.all(np.isfinite(trace)):
        raise NumericalAbortError("non-finite DN trace", step=K)

    result = DNTrace(trace, grid.dt * stride, grid.s.copy(), grid.domain.length,
                     speed.fingerprint, grid.info())
    return result, snapshots


def _check_window(grid_T: float, window: Tuple[float, float]) -> None:
    t1, t2 = window
    if not (0.0 <= t1 < t2 <= grid_T + 1e-12):
        raise PreconditionError(f"window ({t1:g}, {t2:g}) lies outside (0, T={grid_T:g})")


def discrepancy_ratio(trace_a: DNTrace, trace_b: DNTrace, f: BoundarySignal,
                      window: Tuple[float, float], arc: Optional[Tuple[float, float]] = None) -> float:
    """||(Lambda_A - Lambda_B) f|| over the window and arc, divided by ||f||_H1"""
    _check_window(trace_a.times[-1], window)
    norm_f = f.h1_norm()
    if norm_f == 0.0:
        return 0.0
    return (trace_a - trace_b).l2_norm(window, arc) / norm_f


def dn_discrepancy(speed_a: SpeedField, speed_b: SpeedField, probes: Sequence[BoundarySignal],
                   grid: WaveGrid, window: Tuple[float, float],
                   arc: Optional[Tuple[float, float]] = None) -> Dict:
    """Per-probe discrepancy ratios; their max is a lower bound on the operator norm"""
    _check_window(grid.T, window)
    ratios = []
    for f in probes:
        trace_a, _ = solve_ibvp(speed_a, f, grid)
        trace_b, _ = solve_ibvp(speed_b, f, grid)
        ratios.append(discrepancy_ratio(trace_a, trace_b, f, window, arc))
    max_ratio = float(max(ratios)) if ratios else 0.0
    logger.info(f"📊 DN discrepancy over {len(ratios)} probes: max ratio {max_ratio:.3e} (operator-norm lower bound)")
    return {"ratios": ratios, "max_ratio": max_ratio, "operator_norm_lower_bound": max_ratio,
            "window": list(window), "arc": None if arc is None else list(arc)}


class PlaneWave:
    """u(t, x) = F(t - delay - k.x) with F(r) = sin^4(pi r / width) on (0, width), for c = 1"""

    def __init__(self, angle: float = np.pi / 6, width: float = 0.5, delay: float = 0.0):
        self.k = np.array([np.cos(angle), np.sin(angle)])
        self.width = float(width)
        self.delay = float(delay)

    def _phase(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(t) - self.delay - x @ self.k

    def profile(self, r):
        r = np.asarray(r, dtype=float)
        on = (r > 0) & (r < self.width)
        return np.where(on, np.sin(np.pi * r / self.width) ** 4, 0.0)

    def profile_derivative(self, r):
        r = np.asarray(r, dtype=float)
        on = (r > 0) & (r < self.width)
        arg = np.pi * r / self.width
        return np.where(on, 4.0 * np.sin(arg) ** 3 * np.cos(arg) * np.pi / self.width, 0.0)

    def value(self, t, x):
        return self.profile(self._phase(t, x))

    def normal_derivative(self, t, x, nu):
        """d/dnu of u: -F'(phase) (k . nu)"""
        return -self.profile_derivative(self._phase(t, x)) * (np.asarray(nu) @ self.k)

    def boundary_signal(self, grid: WaveGrid) -> BoundarySignal:
        xb = grid.domain.boundary_point(grid.s)
        return BoundarySignal.from_function(grid, lambda t, s: self.value(t, xb[None, :, :]),
                                            label="plane_wave")

    def exact_trace(self, grid: WaveGrid) -> np.ndarray:
        xb = grid.domain.boundary_point(grid.s)
        nu = grid.domain.normal(grid.s)
        t = grid.times[::grid.trace_stride]
        return self.normal_derivative(t[:, None], xb[None, :, :], nu[None, :, :])
