"""Stokes evolution, the mild Navier-Stokes solver, pressures and the corrector iteration.

All semigroup and projection actions are spectral.  Duhamel integrals over a
trajectory use trapezoidal product integration: the forcing ``G`` is
interpolated linearly between time nodes and integrated exactly against the
semigroup, mode by mode.  For ``D(t) = int_0^t exp((t - s) Lap) G(s) ds``
this gives the recursion

    D(t + dt) = E D(t) + dt (a(z) G(t) + b(z) G(t + dt)),   E = exp(-z),  z = dt |k|^2,

with ``a, b -> 1/2`` as ``z -> 0`` (the plain trapezoid weights with the
semigroup factor applied at the nodes) and ``a, b ~ 1/z`` for stiff modes,
where the plain rule would only be first order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fitting import DecayFit
from .spectral import (
    Grid,
    Region,
    ScalarField,
    VectorField,
    jet_norm,
    read_field,
    spectral_l2_norm,
    write_field,
)

__all__ = [
    "Trajectory",
    "IterSpec",
    "SolverError",
    "PicardError",
    "BlowUpError",
    "NonContractionError",
    "stokes_evolve",
    "check_stokes_assumption",
    "exterior_norm",
    "nonlinear_term",
    "nse_time_derivative",
    "nse_mild_solve",
    "picard_sweep",
    "pressure_from_velocity",
    "XNorm",
    "x_norm",
    "CorrectorResult",
    "corrector_iterate",
    "recover_pbar",
    "assemble",
    "save_trajectory",
    "load_trajectory",
]


class SolverError(RuntimeError):
    """Base class for solver failures; ``diagnostics`` carries what was measured."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class PicardError(SolverError):
    pass


class BlowUpError(SolverError):
    pass


class NonContractionError(SolverError):
    pass


@dataclass(frozen=True)
class IterSpec:
    tol: float = 1e-10
    max: int = 50


@dataclass
class Trajectory:
    """Fields on a uniform time grid starting at 0."""

    times: np.ndarray
    slices: list
    log: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.times.ndim != 1 or len(self.times) != len(self.slices) or len(self.times) == 0:
            raise ValueError("a trajectory needs one slice per time")
        if self.times[0] != 0:
            raise ValueError("trajectories start at t = 0")
        if len(self.times) > 1:
            steps = np.diff(self.times)
            if np.any(steps <= 0) or np.max(np.abs(steps - steps[0])) > 1e-12 * max(1.0, self.times[-1]):
                raise ValueError("trajectory times must be uniformly spaced and increasing")
        grid = self.slices[0].grid
        if any(s.grid != grid for s in self.slices):
            raise ValueError("trajectory slices must share one grid")

    @property
    def grid(self) -> Grid:
        return self.slices[0].grid

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else 0.0

    @property
    def quad_weights(self) -> np.ndarray:
        """Trapezoid weights for ``int_0^T``."""
        w = np.full(len(self.times), self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        if len(w) == 1:
            w[0] = 0.0
        return w

    def __len__(self):
        return len(self.slices)

    def __getitem__(self, i):
        return self.slices[i]

    def index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise KeyError(f"time {t} is not on the trajectory grid")
        return i

    def at(self, t: float):
        return self.slices[self.index(t)]


def uniform_times(T: float, steps: int) -> np.ndarray:
    if steps < 1 or T <= 0:
        raise ValueError("need T > 0 and at least one step")
    return np.linspace(0.0, T, steps + 1)


# --- Stokes ----------------------------------------------------------------


def _require_solenoidal(v: VectorField, what: str):
    try:
        v.check_solenoidal()
    except ValueError as exc:
        raise ValueError(f"{what} must be solenoidal: {exc}") from None


def stokes_evolve(v0: VectorField, times) -> Trajectory:
    """``v_St(t) = exp(t Lap) v0``; the projection is the identity on solenoidal data."""
    _require_solenoidal(v0, "initial datum")
    times = np.asarray(times, dtype=float)
    k2 = v0.grid.k2
    hat = v0.hat
    slices = [VectorField(v0.grid, hat=hat * np.exp(-t * k2), solenoidal=True) for t in times]
    return Trajectory(times, slices)


def exterior_norm(u: VectorField, k: int, q: float, radius: float) -> float:
    """``||D^k u||_{L^q}`` outside ``B_radius``."""
    return jet_norm(u, k, q, Region.exterior(radius))


def check_stokes_assumption(v_st: Trajectory, R0: float, q: float, k_range, radii=None,
                            t_fixed: float | None = None, slack: float = 0.3, t_samples=None) -> list[DecayFit]:
    """Spatial and temporal exterior decay fits of a Stokes trajectory.

    The temporal fit uses ``t_samples`` (default: every positive time) at the
    fixed radius ``R0``; the spatial fit uses ``radii`` (default
    ``R0 * {1, 2, 3, 4}``) at ``t_fixed`` (default: the first temporal sample).
    """
    n = v_st.grid.n
    times = [t for t in (v_st.times if t_samples is None else t_samples) if t > 0]
    radii = list(radii) if radii is not None else [R0 * m for m in (1, 2, 3, 4)]
    if len(times) < 4 or len(radii) < 4:
        raise ValueError("exterior decay fits need at least four samples on each axis")
    t_fixed = times[0] if t_fixed is None else t_fixed
    fits = []
    for k in k_range:
        u = v_st.at(t_fixed)
        ys = [exterior_norm(u, k, q, rho) for rho in radii]
        fits.append(DecayFit(f"Stokes exterior D^{k} v", "R", radii, ys,
                             predicted=-(n + 1 + k - (n - 1) / q), slack=slack, k=k, q=q,
                             display_id="stokes-exterior-R", extra={"t": t_fixed}))
        ys = [exterior_norm(v_st.at(t), k, q, R0) for t in times]
        fits.append(DecayFit(f"Stokes exterior D^{k} v", "t", times, ys,
                             predicted=-(n + 1 + k - n / q) / 2, slack=slack, k=k, q=q,
                             display_id="stokes-exterior-t", extra={"R0": R0}))
    return fits


# --- Navier-Stokes ---------------------------------------------------------


def _product_weights(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``a(z) = (1 - (1 + z) e^-z) / z^2`` and ``b(z) = (z - 1 + e^-z) / z^2``, series near 0."""
    small = z < 0.1
    zs = np.where(small, z, 0.0)
    zl = np.where(small, 1.0, z)
    a = np.zeros_like(z)
    b = np.zeros_like(z)
    fact = 2.0
    term = np.ones_like(z)
    for j in range(10):
        a += (j + 1) * term / fact
        b += term / fact
        term = term * -zs
        fact *= j + 3
    ez = np.exp(-zl)
    a = np.where(small, a, (1.0 - (1.0 + zl) * ez) / zl**2)
    b = np.where(small, b, (zl - 1.0 + ez) / zl**2)
    return a, b


def _dealiased_values(hat: np.ndarray, grid: Grid) -> np.ndarray:
    if grid.dealias:
        hat = hat * grid.dealias_mask
    return grid.ifft(hat)


def _div_tensor(pairs, grid: Grid) -> np.ndarray:
    """Spectral ``div`` of the symmetric tensor given as ``{(i, j): T_ij}`` (physical values)."""
    n = grid.n
    kd = grid.kd
    out = np.zeros((n,) + grid.spectral_shape, dtype=complex)
    for (i, j), t in pairs.items():
        th = grid.fft(t)
        out[i] += 1j * kd[j] * th
        if i != j:
            out[j] += 1j * kd[i] * th
    return out


def _leray_hat(hat: np.ndarray, grid: Grid) -> np.ndarray:
    kd = grid.kd
    w = sum(kd[j] * hat[j] for j in range(grid.n)) * grid.kd2_inv
    return np.stack([hat[j] - kd[j] * w for j in range(grid.n)])


def _sym_products(a: np.ndarray, b: np.ndarray | None, n: int):
    """``a_i b_j + b_i a_j`` (or ``a_i a_j`` when ``b`` is None) for ``i <= j``."""
    out = {}
    for i in range(n):
        for j in range(i, n):
            out[(i, j)] = a[i] * a[j] if b is None else a[i] * b[j] + b[i] * a[j]
    return out


def nonlinear_term(hat: np.ndarray, grid: Grid) -> np.ndarray:
    """Spectral coefficients of ``P div(u (x) u)`` with 2/3-rule dealiasing."""
    u = _dealiased_values(hat, grid)
    return _leray_hat(_div_tensor(_sym_products(u, None, grid.n), grid), grid)


def nse_time_derivative(v: VectorField) -> VectorField:
    """``dv/dt = Lap v - P div(v (x) v)`` for the mild solution."""
    g = v.grid
    return VectorField(g, hat=-g.k2 * v.hat - nonlinear_term(v.hat, g), solenoidal=True)


def _rel_change(a: np.ndarray, b: np.ndarray) -> float:
    nb = float(np.sqrt(np.sum(np.abs(b) ** 2)))
    d = float(np.sqrt(np.sum(np.abs(a - b) ** 2)))
    return 0.0 if d == 0 else d / max(nb, 1e-300)


def nse_mild_solve(v0: VectorField, T: float, M: int, picard: IterSpec = IterSpec(),
                   blowup: float = 1e3) -> Trajectory:
    """March the mild formulation with trapezoid Duhamel steps and per-step Picard iteration."""
    _require_solenoidal(v0, "initial datum")
    grid = v0.grid
    times = uniform_times(T, M)
    dt = times[1] - times[0]
    z = dt * grid.k2
    E = np.exp(-z)
    wa, wb = _product_weights(z)
    u = _leray_hat(v0.hat, grid)
    vmax0 = v0.max_abs()
    slices = [VectorField(grid, hat=u, solenoidal=True)]
    energy = [spectral_l2_norm(slices[0])]
    iterations = []
    n_prev = nonlinear_term(u, grid)
    for m in range(M):
        base = E * u - dt * wa * n_prev
        new = base - dt * wb * n_prev
        for it in range(1, picard.max + 1):
            n_new = nonlinear_term(new, grid)
            nxt = _leray_hat(base - dt * wb * n_new, grid)
            change = _rel_change(nxt, new)
            new = nxt
            if change <= picard.tol:
                break
        else:
            raise PicardError(f"Picard iteration did not converge in step {m + 1}",
                              {"step": m + 1, "t": float(times[m + 1]), "last_change": change,
                               "iterations": picard.max})
        u = new
        n_prev = nonlinear_term(u, grid)
        field_ = VectorField(grid, hat=u, solenoidal=True)
        vmax = field_.max_abs()
        if vmax0 > 0 and vmax > blowup * vmax0:
            raise BlowUpError(f"velocity exceeded {blowup:g} times its initial maximum at t={times[m + 1]:g}",
                              {"step": m + 1, "t": float(times[m + 1]), "max": vmax, "initial_max": vmax0})
        slices.append(field_)
        energy.append(spectral_l2_norm(field_))
        iterations.append(it)
    return Trajectory(times, slices, log={"energy": energy, "picard_iterations": iterations})


def picard_sweep(v0: VectorField, times, previous: Trajectory | None = None) -> Trajectory:
    """One global Picard iterate ``exp(t Lap) v0 - int div exp((t-s) Lap) P(u (x) u) ds``.

    With ``previous=None`` the nonlinearity is taken to be zero, which gives
    the Stokes evolution.
    """
    grid = v0.grid
    times = np.asarray(times, dtype=float)
    if previous is None:
        forcing = [None] * len(times)
    else:
        if len(previous) != len(times):
            raise ValueError("previous iterate has a different time grid")
        forcing = [nonlinear_term(s.hat, grid) for s in previous.slices]
    return Trajectory(times, _duhamel(v0.hat, times, forcing, grid, sign=-1.0))


def _duhamel(init_hat, times, forcing, grid: Grid, sign: float):
    """Slices of ``exp(t Lap) init + sign * int_0^t exp((t-s) Lap) G(s) ds``; ``None`` entries of G are zero."""
    dt = times[1] - times[0] if len(times) > 1 else 0.0
    z = dt * grid.k2
    E = np.exp(-z)
    wa, wb = _product_weights(z)
    u = init_hat if init_hat is not None else np.zeros((grid.n,) + grid.spectral_shape, dtype=complex)
    out = [VectorField(grid, hat=u)]
    for m in range(1, len(times)):
        u = E * u
        g_old, g_new = forcing[m - 1], forcing[m]
        if g_old is not None:
            u = u + sign * dt * wa * g_old
        if g_new is not None:
            u = u + sign * dt * wb * g_new
        out.append(VectorField(grid, hat=u))
    return out


# --- pressures -------------------------------------------------------------


def _divdiv_hat(pairs, grid: Grid) -> np.ndarray:
    """``sum_jk d_j d_k T_jk`` for a symmetric tensor given on ``j <= k``."""
    kd = grid.kd
    out = np.zeros(grid.spectral_shape, dtype=complex)
    for (i, j), t in pairs.items():
        mult = -(kd[i] * kd[j]) * (1 if i == j else 2)
        out += mult * grid.fft(t)
    return out


def pressure_from_velocity(v: VectorField) -> ScalarField:
    """Solve ``-Lap p = div div(v (x) v)`` with zero mean; products dealiased."""
    g = v.grid
    u = _dealiased_values(v.hat, g)
    rhs = _divdiv_hat(_sym_products(u, None, g.n), g)
    return ScalarField(g, hat=rhs * g.kd2_inv)


# --- weighted norm ---------------------------------------------------------


@dataclass
class XNorm:
    k: int
    q: float
    R: float
    eps: float
    T: float
    value: float
    argmax: dict = field(default_factory=dict)


def _x_slice(u, t: float, k: int, q: float, R: float, eps: float, region: Region):
    """Largest weighted term of one slice and where it occurs."""
    n = u.grid.n
    best, where = 0.0, {}
    for m in range(k + 1):
        norm = jet_norm(u, m, q, region)
        a = n - 1 + m - n / q
        b = (n - 1 - eps + m - n / q) / 2
        for alpha in (0.0, 1.0):
            w = R ** (alpha * a) * t ** ((1 - alpha) * b)
            if w * norm > best:
                best, where = w * norm, {"t": float(t), "m": m, "alpha": alpha}
    return best, where


def x_norm(traj: Trajectory, k: int, q: float, R: float, eps: float = 0.05) -> XNorm:
    """Spacetime-weighted norm over ``B_R``; the ``t = 0`` slice is skipped.

    The weight ``R^(alpha a) t^((1 - alpha) b)`` is log-linear in ``alpha``, so
    its maximum over ``alpha in [0, 1]`` sits at an endpoint.
    """
    if not 0 < eps < 1:
        raise ValueError(f"slack exponent must lie in (0, 1), got {eps}")
    region = Region.ball(R)
    best, where = 0.0, {}
    for t, u in zip(traj.times, traj.slices):
        if t <= 0:
            continue
        val, at = _x_slice(u, t, k, q, R, eps, region)
        if val > best:
            best, where = val, at
    return XNorm(k, q, R, eps, float(traj.times[-1]), best, where)


# --- corrector iteration ---------------------------------------------------


@dataclass
class CorrectorResult:
    trajectory: Trajectory
    iterations: int
    distances: list
    contraction: float
    norm: XNorm


def _phi_grad_p(p: ScalarField, phi: np.ndarray) -> np.ndarray:
    g = p.grid
    ph = p.hat
    return np.stack([phi * g.ifft(1j * g.kd[a] * ph) for a in range(g.n)])


def corrector_iterate(F_traj: Trajectory, p_traj: Trajectory, cutoff, r_traj: Trajectory, R: float,
                      it: IterSpec = IterSpec(tol=1e-8, max=30), v0_tilde: VectorField | None = None,
                      k: int = 1, q: float = 2.0, eps: float = 0.05, nonlinear: bool = True) -> CorrectorResult:
    """Fixed-point iteration for the velocity corrector from ``u_0 = 0``.

        u_{i+1}(t) = exp(t Lap) v0_tilde - int exp((t-s) Lap) P(F - phi grad p) ds
                     - int div exp((t-s) Lap) P(p phi Id + u_i (x) u_i + u_i (x) r + r (x) u_i) ds

    Stops when successive iterates are within ``it.tol`` in the weighted norm.
    ``nonlinear=False`` drops the ``u_i (x) u_i`` term.
    """
    times = F_traj.times
    for tr in (p_traj, r_traj):
        if len(tr) != len(times) or np.any(tr.times != times):
            raise ValueError("corrector inputs must share one time grid")
    grid = F_traj.grid
    n = grid.n
    phi = cutoff.values(grid)
    lin = []
    for F, p, r in zip(F_traj.slices, p_traj.slices, r_traj.slices):
        g = F.values - _phi_grad_p(p, phi)
        pphi = p.values * phi
        # P div(p phi Id) = P grad(p phi) vanishes in exact arithmetic; it is kept as written
        iso = _leray_hat(_div_tensor({(i, i): pphi for i in range(n)}, grid), grid)
        lin.append(_leray_hat(grid.fft(g), grid) + iso)
    init = None if v0_tilde is None else v0_tilde.hat
    base = [b.hat for b in _duhamel(init, times, lin, grid, sign=-1.0)]
    del lin
    r_vals = [_dealiased_values(r.hat, grid) for r in r_traj.slices]
    dt = times[1] - times[0] if len(times) > 1 else 0.0
    z = dt * grid.k2
    E = np.exp(-z)
    wa, wb = _product_weights(z)
    region = Region.ball(R)

    def forcing(u_hat, rv):
        uv = _dealiased_values(u_hat, grid)
        pairs = _sym_products(uv, rv, n)
        if nonlinear:
            for key, val in _sym_products(uv, None, n).items():
                pairs[key] = pairs[key] + val
        return _leray_hat(_div_tensor(pairs, grid), grid)

    def apply(prev):
        """One application of the map, streamed over time; returns the new iterate and its norms."""
        out, dist, size = [], 0.0, 0.0
        tail = np.zeros_like(base[0])
        g_old = None
        for m, t in enumerate(times):
            g_new = forcing(prev[m], r_vals[m]) if prev is not None else None
            if m > 0:
                tail = E * tail
                if g_old is not None:
                    tail = tail - dt * wa * g_old
                if g_new is not None:
                    tail = tail - dt * wb * g_new
            g_old = g_new
            u = base[m] + tail
            out.append(u)
            if t > 0:
                size = max(size, _x_slice(VectorField(grid, hat=u), t, k, q, R, eps, region)[0])
                d = u if prev is None else u - prev[m]
                dist = max(dist, _x_slice(VectorField(grid, hat=d), t, k, q, R, eps, region)[0])
        return out, dist, size

    # u_0 = 0 contributes no forcing
    current = None
    distances = []
    for i in range(1, it.max + 1):
        nxt, dist, size = apply(current)
        distances.append(dist)
        if len(distances) >= 3 and distances[-1] > distances[-2] > distances[-3]:
            factor = distances[-1] / distances[-2]
            raise NonContractionError(f"corrector iteration is not contracting (factor {factor:.3g})",
                                      {"distances": distances, "factor": factor})
        current = nxt
        if dist <= it.tol * size or dist == 0.0:
            break
    else:
        raise NonContractionError(f"corrector iteration did not converge in {it.max} steps",
                                  {"distances": distances})
    contraction = _contraction(distances)
    traj = Trajectory(times, [VectorField(grid, hat=u, solenoidal=True) for u in current],
                      log={"distances": distances, "contraction": contraction})
    # the last application only confirmed the fixed point
    return CorrectorResult(traj, len(distances) - 1, distances, contraction, x_norm(traj, k, q, R, eps))


def _contraction(distances) -> float:
    """Largest ratio of successive iterate distances (0 when the map was exact after one step)."""
    ratios = [b / a for a, b in zip(distances, distances[1:]) if a > 0]
    return max(ratios) if ratios else 0.0


def recover_pbar(vt_traj: Trajectory, F_traj: Trajectory, p_traj: Trajectory, cutoff, r_traj: Trajectory) -> Trajectory:
    """``-Lap pbar = div(F - phi grad p) + div div(p phi Id + v (x) v + v (x) r + r (x) v)``, zero mean."""
    grid = vt_traj.grid
    n = grid.n
    phi = cutoff.values(grid)
    out = []
    for vt, F, p, r in zip(vt_traj.slices, F_traj.slices, p_traj.slices, r_traj.slices):
        g = F.values - _phi_grad_p(p, phi)
        div_g = sum(1j * grid.kd[a] * grid.fft(g[a]) for a in range(n))
        uv = _dealiased_values(vt.hat, grid)
        rv = _dealiased_values(r.hat, grid)
        pairs = _sym_products(uv, rv, n)
        for key, val in _sym_products(uv, None, n).items():
            pairs[key] = pairs[key] + val
        pphi = p.values * phi
        for i in range(n):
            pairs[(i, i)] = pairs[(i, i)] + pphi
        rhs = div_g + _divdiv_hat(pairs, grid)
        out.append(ScalarField(grid, hat=rhs * grid.kd2_inv))
    return Trajectory(vt_traj.times, out)


def assemble(v_traj: Trajectory, p_traj: Trajectory, cutoff, vc_traj: Trajectory, vt_traj: Trajectory,
             pbar_traj: Trajectory) -> tuple[Trajectory, Trajectory]:
    """``w = phi v + v_c + v_tilde`` and ``pi = phi p + pbar``."""
    grid = v_traj.grid
    phi = cutoff.values(grid)
    w = [VectorField(grid, values=phi * v.values + c.values + t.values)
         for v, c, t in zip(v_traj.slices, vc_traj.slices, vt_traj.slices)]
    pi = [ScalarField(grid, values=phi * p.values + pb.values) for p, pb in zip(p_traj.slices, pbar_traj.slices)]
    return Trajectory(v_traj.times, w), Trajectory(v_traj.times, pi)


# --- checkpoints -----------------------------------------------------------


def save_trajectory(traj: Trajectory, directory, name: str = "trajectory") -> Path:
    """Write NSEF dumps and a JSON manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, s in enumerate(traj.slices):
        fname = f"{name}_{i:04d}.nsef"
        write_field(directory / fname, s)
        files.append(fname)
    kind = "vector" if isinstance(traj.slices[0], VectorField) else "scalar"
    manifest = {"name": name, "kind": kind, "times": [float(t) for t in traj.times],
                "grid": traj.grid.describe(), "slices": files, "log": _jsonable(traj.log)}
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_trajectory(manifest_path) -> Trajectory:
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    dealias = bool(manifest["grid"].get("dealias", True))
    slices = [read_field(manifest_path.parent / f, dealias=dealias) for f in manifest["slices"]]
    return Trajectory(np.array(manifest["times"]), slices, log=manifest.get("log", {}))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
