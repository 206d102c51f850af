"""End-to-end transfer pipeline, radius and time sweeps, and annulus decay estimates.

The pipeline takes a whole-space solution ``(v, p)`` and builds the
ball solution ``(w, pi)``:

    truncate   r = phi v + v_c
    correct    v_tilde from the fixed-point iteration, pbar from its pressure equation
    assemble   w = r + v_tilde,  pi = phi p + pbar

and the sweeps fit how ``v - w`` and ``p - pi`` decay in ``R`` and in ``t``.
Report rows carry stable string ids such as ``transfer-velocity-R``.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bogovskii import CompatibilityError, DomainError, RayQuadrature
from .data import BumpSpec, solenoidal_bump
from .fitting import DEFAULT_SLACK, CheckRow, DecayFit
from .solver import (
    IterSpec,
    SolverError,
    Trajectory,
    assemble,
    check_stokes_assumption,
    corrector_iterate,
    nse_mild_solve,
    stokes_evolve,
    uniform_times,
    nse_time_derivative,
    pressure_from_velocity,
    recover_pbar,
)
from .spectral import Grid, Region, ScalarField, VectorField, jet_norm
from .truncation import (
    Cutoff,
    compute_f1,
    compute_f2,
    corrector_trajectory,
    make_cutoff,
    truncated_field,
)

__all__ = [
    "SweepConfig",
    "TransferResult",
    "SweepResult",
    "REPORT_COLUMNS",
    "solve_reference",
    "transfer",
    "sweep_radius",
    "sweep_time",
    "verify_annulus_estimates",
    "verify_suite",
    "VerifyResult",
    "velocity_exponent",
    "pressure_exponent",
    "write_report",
    "read_report",
    "write_summary",
]

REPORT_COLUMNS = ["display_id", "quantity", "k", "q", "axis", "predicted", "fitted", "r2", "pass"]


@dataclass
class SweepConfig:
    """Everything a sweep needs; ``times`` and ``t_fixed`` must be multiples of ``T / steps``.

    The radius sweep solves up to ``T``; the time sweep needs ``T >= max(times)``.
    """

    grid: Grid = field(default_factory=lambda: Grid(3, 16.0, 128))
    v0: BumpSpec = field(default_factory=BumpSpec)
    radii: tuple = (3.0, 4.0, 5.0, 6.0)
    times: tuple = (0.5, 1.0, 2.0, 4.0)
    ks: tuple = (0, 1)
    qs: tuple = (2.0,)
    t_fixed: float = 1.0
    R_fixed: float = 4.0
    T: float = 1.0
    steps: int = 4
    eps: float = 0.05
    slack: float = DEFAULT_SLACK
    mode: str = "annulus"
    picard: IterSpec = field(default_factory=IterSpec)
    corrector: IterSpec = field(default_factory=lambda: IterSpec(tol=1e-8, max=30))
    x_norm_k: int = 1
    seed: int = 0x5EED

    def __post_init__(self):
        self.radii = tuple(float(r) for r in self.radii)
        self.times = tuple(float(t) for t in self.times)
        self.ks = tuple(int(k) for k in self.ks)
        self.qs = tuple(float(q) for q in self.qs)
        half = self.grid.L / 2
        for R in self.radii + (self.R_fixed,):
            if not 2 <= R < half - 1:
                raise ValueError(f"radius {R} must lie in [2, L/2 - 1) = [2, {half - 1:g})")
        if any(t <= 0 for t in self.times) or self.t_fixed <= 0:
            raise ValueError("sweep times must be positive")
        if self.T <= 0 or self.steps < 1:
            raise ValueError("need T > 0 and at least one time step")
        dt = self.T / self.steps
        for t in self.times + (self.t_fixed,):
            if abs(t / dt - round(t / dt)) > 1e-9:
                raise ValueError(f"time {t} is not a multiple of the step {dt:g}")
        if self.t_fixed > self.T * (1 + 1e-12):
            raise ValueError(f"t_fixed={self.t_fixed} lies beyond T={self.T}")
        if any(k < 0 for k in self.ks) or any(q < 1 for q in self.qs):
            raise ValueError("need k >= 0 and q >= 1")
        if not 0 < self.eps < 1:
            raise ValueError("eps must lie in (0, 1)")
        if self.mode not in ("annulus", "ball"):
            raise ValueError(f"unknown corrector mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.describe()
        d["v0"] = self.v0.to_dict()
        return d


def velocity_exponent(axis: str, n: int, k: int, q: float, eps: float = 0.05) -> float:
    """Predicted decay exponent of ``||D^k (v - w)||_{L^q(B_R)}``."""
    if axis == "R":
        return -(n - 1 + k - n / q)
    return -(n - 1 - eps + k - n / q) / 2


def pressure_exponent(axis: str, n: int, k: int, q: float) -> float:
    """Predicted decay exponent of ``||D^k (p - pi)||_{L^q(B_R)}``."""
    if axis == "R":
        return -(n + k - (n - 1) / q)
    return -(n + k - n / q) / 2


# --- pipeline --------------------------------------------------------------


def solve_reference(cfg: SweepConfig, T: float | None = None, steps: int | None = None) -> Trajectory:
    v0 = solenoidal_bump(cfg.grid, cfg.v0)
    return nse_mild_solve(v0, cfg.T if T is None else T, cfg.steps if steps is None else steps, cfg.picard)


@dataclass
class TransferResult:
    R: float
    cutoff: Cutoff
    p: Trajectory
    vc: Trajectory
    v_tilde: Trajectory
    pbar: Trajectory
    w: Trajectory
    pi: Trajectory
    iterations: int
    distances: list
    contraction: float
    x_norm: float
    timings: dict


def transfer(v: Trajectory, R: float, mode: str = "annulus", corrector: IterSpec = IterSpec(1e-8, 30),
             k: int = 1, q: float = 2.0, eps: float = 0.05, quad: RayQuadrature = RayQuadrature(),
             p: Trajectory | None = None) -> TransferResult:
    """Run truncation, correction and assembly for one cutoff radius.

    Intermediate trajectories are released as soon as they are consumed;
    at N = 128 each vector slice costs about 50 MB per representation.
    """
    grid = v.grid
    times = v.times
    clock = {}
    t0 = time.perf_counter()
    cutoff = make_cutoff(R, grid=grid)
    dv = [nse_time_derivative(s) for s in v.slices]
    vc, dvc = corrector_trajectory(v.slices, dv, cutoff, mode, quad)
    del dv
    clock["corrector"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    F2 = compute_f2(v.slices, cutoff, vc, dvc, mode)
    del dvc
    F = Trajectory(times, [VectorField(grid, values=compute_f1(s, cutoff).values + f2.values)
                           for s, f2 in zip(v.slices, F2)])
    del F2
    if p is None:
        p = Trajectory(times, [pressure_from_velocity(s) for s in v.slices])
    r = Trajectory(times, [truncated_field(s, cutoff, c) for s, c in zip(v.slices, vc)])
    for s in v.slices:
        s.release("hat")
    clock["forcing"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    res = corrector_iterate(F, p, cutoff, r, R, corrector, k=k, q=q, eps=eps)
    for s in r.slices:
        s.release("hat")
    clock["iteration"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pbar = recover_pbar(res.trajectory, F, p, cutoff, r)
    del F, r
    vc_traj = Trajectory(times, vc)
    w, pi = assemble(v, p, cutoff, vc_traj, res.trajectory, pbar)
    clock["assemble"] = time.perf_counter() - t0
    return TransferResult(R, cutoff, p, vc_traj, res.trajectory, pbar, w, pi, res.iterations,
                          res.distances, res.contraction, float(res.norm.value), clock)


def _pressure_gap(p: ScalarField, pi: ScalarField, R: float) -> ScalarField:
    """``p - pi`` with its mean over ``B_R`` removed; pressures are only defined up to constants."""
    d = p.values - pi.values
    mask = Region.ball(R).mask(p.grid)
    return ScalarField(p.grid, values=d - float(np.mean(d[mask])))


def _differences(v: Trajectory, res: TransferResult, t: float, ks, qs) -> dict:
    i = v.index(t)
    R = res.R
    dv = v.slices[i] - res.w.slices[i]
    dp = _pressure_gap(res.p.slices[i], res.pi.slices[i], R)
    region = Region.ball(R)
    out = {}
    for k in ks:
        for q in qs:
            out[(k, q)] = (jet_norm(dv, k, q, region), jet_norm(dp, k, q, region))
    return out


def _diagnostics(v: Trajectory, res: TransferResult, t: float) -> dict:
    """Support and agreement audits at time ``t``."""
    i = v.index(t)
    grid = v.grid
    R = res.R
    r = grid.radius
    w = np.abs(res.w.slices[i].values)
    vt = np.abs(res.v_tilde.slices[i].values)
    gap = np.abs(v.slices[i].values - res.w.slices[i].values)
    core = r < R - 1.5
    return {
        "R": R,
        "t": t,
        "iterations": res.iterations,
        "contraction": res.contraction,
        "x_norm": res.x_norm,
        "core_gap_sup": float(gap[:, core].max()) if core.any() else 0.0,
        "v_tilde_sup_ball": float(vt[:, r <= R].max()),
        "v_sup": float(np.abs(v.slices[i].values).max()),
        "w_sup_outside": float(w[:, r > R].max()),
        "w_sup_inside": float(w[:, r <= R].max()),
        "w_divergence": float(res.w.slices[i].check_solenoidal(rtol=math.inf)),
        "timings": res.timings,
    }


class SweepResult(list):
    """The fitted rows, plus per-cell diagnostics and the cells that failed."""

    def __init__(self, fits=(), cells=None, failures=None):
        super().__init__(fits)
        self.cells = cells or []
        self.failures = failures or []

    @property
    def partial(self) -> bool:
        return bool(self.failures)


def _fit_rows(axis, xs, samples, ks, qs, n, eps, slack, note=""):
    fits = []
    for k in ks:
        for q in qs:
            ys_v = [s[(k, q)][0] for s in samples]
            ys_p = [s[(k, q)][1] for s in samples]
            # the temporal criterion bounds the slope only
            fits.append(DecayFit("velocity gap D^k(v - w) on B_R", axis, xs, ys_v,
                                 velocity_exponent(axis, n, k, q, eps), slack, k, q,
                                 display_id=f"transfer-velocity-{axis}", note=note, require_r2=axis == "R"))
            fits.append(DecayFit("pressure gap D^k(p - pi) on B_R", axis, xs, ys_p,
                                 pressure_exponent(axis, n, k, q), slack, k, q,
                                 display_id=f"transfer-pressure-{axis}", note=note, require_r2=axis == "R"))
    return fits


def sweep_radius(cfg: SweepConfig, v: Trajectory | None = None) -> SweepResult:
    """Run the pipeline for every radius and fit the gaps at ``t_fixed`` against ``R``."""
    if v is None:
        v = solve_reference(cfg)
    n = v.grid.n
    xs, samples, cells, failures = [], [], [], []
    for R in cfg.radii:
        try:
            res = transfer(v, R, cfg.mode, cfg.corrector, cfg.x_norm_k, 2.0, cfg.eps)
        except (SolverError, CompatibilityError, DomainError) as exc:
            failures.append({"R": R, "error": type(exc).__name__, "message": str(exc),
                             "diagnostics": getattr(exc, "diagnostics", {})})
            continue
        xs.append(R)
        samples.append(_differences(v, res, cfg.t_fixed, cfg.ks, cfg.qs))
        cells.append(_diagnostics(v, res, cfg.t_fixed))
        del res
    note = "partial: " + ", ".join(f"R={f['R']:g} failed" for f in failures) if failures else ""
    return SweepResult(_fit_rows("R", xs, samples, cfg.ks, cfg.qs, n, cfg.eps, cfg.slack, note), cells, failures)


def sweep_time(cfg: SweepConfig, v: Trajectory | None = None) -> SweepResult:
    """Run the pipeline once at ``R_fixed`` and fit the gaps against ``t``."""
    if max(cfg.times) > cfg.T * (1 + 1e-12):
        raise ValueError(f"time sweep reaches t={max(cfg.times)} beyond T={cfg.T}")
    if v is None:
        v = solve_reference(cfg)
    n = v.grid.n
    try:
        res = transfer(v, cfg.R_fixed, cfg.mode, cfg.corrector, cfg.x_norm_k, 2.0, cfg.eps)
    except (SolverError, CompatibilityError, DomainError) as exc:
        failure = {"R": cfg.R_fixed, "error": type(exc).__name__, "message": str(exc),
                   "diagnostics": getattr(exc, "diagnostics", {})}
        return SweepResult(_fit_rows("t", [], [], cfg.ks, cfg.qs, n, cfg.eps, cfg.slack, "pipeline failed"),
                           [], [failure])
    samples = [_differences(v, res, t, cfg.ks, cfg.qs) for t in cfg.times]
    cells = [_diagnostics(v, res, t) for t in cfg.times]
    return SweepResult(_fit_rows("t", list(cfg.times), samples, cfg.ks, cfg.qs, n, cfg.eps, cfg.slack), cells)


# --- annulus estimates -----------------------------------------------------


@dataclass(frozen=True)
class _Row:
    display_id: str
    quantity: str
    axis: str
    # exponent as a function of (n, k, q)
    exponent: object
    ks: str = "all"


def _rate_R(shift):
    return lambda n, k, q: -(n + shift + k - (n - 1) / q)


def _rate_t(shift):
    return lambda n, k, q: -(n + shift + k - n / q) / 2


ANNULUS_ROWS = (
    _Row("annulus-velocity-R", "||D^k v|| on the annulus", "R", _rate_R(1)),
    _Row("annulus-velocity-t", "||D^k v|| on the annulus", "t", _rate_t(1)),
    _Row("annulus-pressure-R", "||D^k p|| on the annulus", "R", _rate_R(0)),
    _Row("annulus-pressure-t", "||D^k p|| on the annulus", "t", _rate_t(0)),
    _Row("cutoff-velocity-R", "||D^k (phi v)|| on the annulus", "R", _rate_R(1)),
    _Row("cutoff-velocity-t", "||D^k (phi v)|| on the annulus", "t", _rate_t(1)),
    _Row("truncation-forcing-R", "||D^k F1|| on B_R", "R", _rate_R(1)),
    _Row("truncation-forcing-t", "||D^k F1|| on B_R", "t", _rate_t(1)),
    _Row("corrector-forcing-R", "||F2|| on the annulus", "R", _rate_R(1), ks="0"),
    _Row("total-forcing-R", "||F1 + F2|| on B_R", "R", _rate_R(1), ks="0"),
    _Row("forcing-derivatives-R", "||D^k F2|| + ||D^k (F1 + F2)||", "R", _rate_R(1)),
    _Row("forcing-derivatives-t", "||D^k (F1 + F2)|| on B_R", "t", _rate_t(1)),
)


def _annulus_quantities(v: VectorField, p: ScalarField, dv: VectorField, R: float, ks, qs, mode, quad) -> dict:
    """All row quantities at one (R, t); keys ``(display_id, k, q)``."""
    grid = v.grid
    cutoff = make_cutoff(R, grid=grid)
    ann = Region.annulus(R - 1, R)
    ball = Region.ball(R)
    vc, dvc = corrector_trajectory([v], [dv], cutoff, mode, quad)
    f1 = compute_f1(v, cutoff)
    f2 = compute_f2([v], cutoff, vc, dvc, mode)[0]
    total = f1 + f2
    phiv = VectorField(grid, values=cutoff.values(grid) * v.values)
    out = {}
    for k in ks:
        for q in qs:
            vals = {
                "annulus-velocity": jet_norm(v, k, q, ann),
                "annulus-pressure": jet_norm(p, k, q, ann),
                "cutoff-velocity": jet_norm(phiv, k, q, ann),
                "truncation-forcing": jet_norm(f1, k, q, ball),
                "corrector-forcing": jet_norm(f2, k, q, ann),
                "total-forcing": jet_norm(total, k, q, ball),
            }
            vals["forcing-derivatives"] = vals["corrector-forcing"] + vals["total-forcing"]
            for key, val in vals.items():
                out[(key, k, q)] = val
    return out


def verify_annulus_estimates(v: Trajectory, p: Trajectory | None, cfg: SweepConfig,
                             quad: RayQuadrature = RayQuadrature(), axes=("R", "t")) -> list[DecayFit]:
    """One fit per (row, k, q): spatial rows over ``cfg.radii`` at ``t_fixed``, temporal rows at ``R_fixed``.

    The cutoff is rebuilt per radius, so only ``v`` and ``p`` are needed.
    ``axes`` selects which family to compute; the temporal family needs a
    trajectory that reaches every time in ``cfg.times``.
    """
    n = v.grid.n
    if p is None:
        p = Trajectory(v.times, [pressure_from_velocity(s) for s in v.slices])
    ks, qs = cfg.ks, cfg.qs
    spatial, temporal = [], []
    if "R" in axes:
        i = v.index(cfg.t_fixed)
        dv_fixed = nse_time_derivative(v.slices[i])
        for R in cfg.radii:
            spatial.append(_annulus_quantities(v.slices[i], p.slices[i], dv_fixed, R, ks, qs, cfg.mode, quad))
    if "t" in axes:
        for t in cfg.times:
            j = v.index(t)
            temporal.append(_annulus_quantities(v.slices[j], p.slices[j], nse_time_derivative(v.slices[j]),
                                                cfg.R_fixed, ks, qs, cfg.mode, quad))
    fits = []
    for row in ANNULUS_ROWS:
        if row.axis not in axes:
            continue
        key = row.display_id.rsplit("-", 1)[0]
        xs, samples = (list(cfg.radii), spatial) if row.axis == "R" else (list(cfg.times), temporal)
        for k in ks:
            if row.ks == "0" and k != 0:
                continue
            for q in qs:
                ys = [s[(key, k, q)] for s in samples]
                fits.append(DecayFit(row.quantity, row.axis, xs, ys, row.exponent(n, k, q), cfg.slack, k, q,
                                     display_id=row.display_id))
    return fits


# --- full verification ----------------------------------------------------


@dataclass
class VerifyResult:
    """Gating rows, informational annulus rows, per-cell diagnostics and failures."""

    rows: list
    annulus: list
    cells: list
    failures: list
    timings: dict

    @property
    def passed(self) -> bool:
        return not self.failures and all(r.passed is not False for r in self.rows)


def _solver_rows(v: Trajectory) -> list[CheckRow]:
    energy = np.asarray(v.log.get("energy", []), dtype=float)
    e0 = energy[0] if energy.size else 0.0
    rise = float(np.max(np.diff(energy))) / e0 if energy.size > 1 and e0 > 0 else 0.0
    div = max(s.check_solenoidal(rtol=math.inf) for s in v.slices)
    return [
        CheckRow("solver-energy", "largest per-step L2 energy rise / initial energy", rise, 1e-6, rise <= 1e-6),
        CheckRow("solver-solenoidal", "largest relative divergence over the trajectory", div, 1e-10, div <= 1e-10),
    ]


def _stokes_times(times) -> tuple[np.ndarray, list]:
    """A uniform grid from 0 that contains every sample time."""
    times = sorted(float(t) for t in times)
    dt = min(times[0], *(b - a for a, b in zip(times, times[1:]))) if len(times) > 1 else times[0]
    steps = int(round(times[-1] / dt))
    grid = uniform_times(times[-1], steps)
    return grid, [float(grid[int(round(t / dt))]) for t in times]


def verify_suite(cfg_r: SweepConfig, cfg_t: SweepConfig | None = None, annulus: bool = True) -> VerifyResult:
    """Solver checks, the Stokes exterior fits, both transfer sweeps and the annulus rows.

    ``cfg_t`` defaults to ``cfg_r``; its ``T`` must reach ``max(times)``.
    Gating rows are those with an acceptance bound; annulus rows are
    reported alongside but do not gate.
    """
    cfg_t = cfg_t or cfg_r
    clock = {}
    rows, cells, failures = [], [], []

    t0 = time.perf_counter()
    v = solve_reference(cfg_r)
    rows += _solver_rows(v)
    clock["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    v0 = v.slices[0]
    grid_t, samples = _stokes_times(cfg_t.times)
    st = stokes_evolve(v0, grid_t)
    for q in cfg_r.qs:
        rows += check_stokes_assumption(st, cfg_r.v0.radius, q, cfg_r.ks, slack=cfg_r.slack, t_samples=samples)
    del st
    clock["stokes"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ann_rows = verify_annulus_estimates(v, None, cfg_r, axes=("R",)) if annulus else []
    clock["annulus"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sweep = sweep_radius(cfg_r, v)
    rows += list(sweep)
    for c in sweep.cells:
        rows.append(CheckRow("corrector-contraction", f"measured contraction factor at R={c['R']:g}",
                             c["contraction"], 1.0, c["contraction"] < 1.0))
    cells += sweep.cells
    failures += sweep.failures
    clock["sweep_radius"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if cfg_t is not cfg_r:
        del v
        v = solve_reference(cfg_t)
    sweep = sweep_time(cfg_t, v)
    rows += list(sweep)
    cells += sweep.cells
    failures += sweep.failures
    clock["sweep_time"] = time.perf_counter() - t0

    # temporal annulus rows need the trajectory that reaches every sample time
    t0 = time.perf_counter()
    if annulus:
        ann_rows += verify_annulus_estimates(v, None, cfg_t, axes=("t",))
    clock["annulus"] += time.perf_counter() - t0
    return VerifyResult(rows, ann_rows, cells, failures, clock)


# --- output ----------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


def write_report(path, fits) -> Path:
    """Report CSV with one row per fit; floats in round-trip ``repr`` form."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for f in fits:
            row = f.row() if hasattr(f, "row") else f
            writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return path


def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["k"] = int(row["k"]) if row["k"] else None
        row["q"] = float(row["q"]) if row["q"] else None
        for c in ("predicted", "fitted", "r2"):
            row[c] = float(row[c])
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_summary(path, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(meta), indent=2, sort_keys=True))
    return path
