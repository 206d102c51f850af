"""Radial cutoff, the truncated forcing F1, the corrector v_c and its forcing F2.

Products involving the cutoff are formed pointwise on the grid without
dealiasing.  Truncating the spectrum of ``phi * v`` would spread it over the
whole box, and the support statements below (``F1 = 0`` on ``B_{R-1}``, the
corrector vanishing inside the shell) are what the rest of the pipeline
relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bogovskii import BogovskiiDomain, RayQuadrature, ShellWeight, bogovskii_solve_many
from .smooth import smoothstep, smoothstep_derivative, smoothstep_second_derivative
from .spectral import MAX_DERIVATIVE_ORDER, Grid, ScalarField, VectorField, derivative, laplacian

__all__ = [
    "Cutoff",
    "make_cutoff",
    "compute_f1",
    "compute_f1_grouped",
    "corrector_datum",
    "corrector_domain",
    "compute_corrector",
    "corrector_trajectory",
    "truncated_field",
    "compute_f2",
]


@dataclass(frozen=True)
class Cutoff:
    """``phi(x) = sigma(R - |x|)``: 1 on ``B_{R-1}``, 0 outside ``B_R``.

    ``order`` is the highest derivative order served by :meth:`derivative`.
    ``gradient_bound`` is ``max |grad phi|`` (the maximum of ``sigma'``).
    """

    R: float
    order: int = MAX_DERIVATIVE_ORDER
    gradient_bound: float = 2.0

    def radial(self, r) -> np.ndarray:
        return smoothstep(self.R - np.asarray(r, dtype=float))

    def radial_derivative(self, r, m: int = 1) -> np.ndarray:
        tau = self.R - np.asarray(r, dtype=float)
        if m == 0:
            return smoothstep(tau)
        if m == 1:
            return -smoothstep_derivative(tau)
        if m == 2:
            return smoothstep_second_derivative(tau)
        raise ValueError("closed-form radial derivatives are available up to order 2")

    def values(self, grid: Grid) -> np.ndarray:
        return self.radial(grid.radius)

    def field(self, grid: Grid) -> ScalarField:
        return ScalarField(grid, values=self.values(grid))

    def gradient_values(self, grid: Grid) -> np.ndarray:
        r = grid.radius
        d = self.radial_derivative(r, 1) / np.where(r > 0, r, 1.0)
        return np.stack([d * grid.mesh(a) for a in range(grid.n)])

    def laplacian_values(self, grid: Grid) -> np.ndarray:
        r = grid.radius
        d1 = self.radial_derivative(r, 1)
        return self.radial_derivative(r, 2) + (grid.n - 1) * d1 / np.where(r > 0, r, 1.0)

    def derivative(self, grid: Grid, index) -> ScalarField:
        """Spectral derivative of the sampled cutoff."""
        return derivative(self.field(grid), index, max_order=self.order)

    def annulus_mask(self, grid: Grid) -> np.ndarray:
        r = grid.radius
        return (r >= self.R - 1) & (r <= self.R)


def make_cutoff(R: float, smoothness_order: int = MAX_DERIVATIVE_ORDER, grid: Grid | None = None) -> Cutoff:
    if R < 2:
        raise ValueError(f"cutoff radius must be at least 2, got {R}")
    if grid is not None and R >= grid.L / 2:
        raise ValueError(f"cutoff radius {R} does not fit in a box of side {grid.L}")
    return Cutoff(float(R), int(smoothness_order))


def _jacobian(v: VectorField) -> np.ndarray:
    """``J[i, j] = d_j v_i`` from spectral derivatives."""
    n = v.grid.n
    hat = v.hat
    kd = v.grid.kd
    return np.stack([np.stack([v.grid.ifft(1j * kd[j] * hat[i]) for j in range(n)]) for i in range(n)])


def _f1_parts(v: VectorField, cutoff: Cutoff):
    grid = v.grid
    u = v.values
    phi = cutoff.values(grid)
    gphi = cutoff.gradient_values(grid)
    lphi = cutoff.laplacian_values(grid)
    jac = _jacobian(v)
    adv = np.einsum("j...,ij...->i...", u, jac)
    flux = phi * np.einsum("j...,j...->...", u, gphi)
    stretch = np.einsum("j...,ij...->i...", gphi, jac)
    return phi, adv, flux, u, lphi, stretch


def compute_f1(v: VectorField, cutoff: Cutoff) -> VectorField:
    """``-phi(1-phi)(v.grad)v + (phi v.grad phi) v - v Lap phi - 2 (grad phi . grad) v``."""
    phi, adv, flux, u, lphi, stretch = _f1_parts(v, cutoff)
    out = -phi * (1 - phi) * adv + flux * u - u * lphi - 2 * stretch
    return VectorField(v.grid, values=out)


def compute_f1_grouped(v: VectorField, cutoff: Cutoff) -> VectorField:
    """F1 regrouped as ``(phi^2 - phi)(v.grad)v + ...``; agrees with :func:`compute_f1` up to round-off."""
    phi, adv, flux, u, lphi, stretch = _f1_parts(v, cutoff)
    out = phi * phi * adv - phi * adv + flux * u - (u * lphi + 2 * stretch)
    return VectorField(v.grid, values=out)


def corrector_domain(cutoff: Cutoff, mode: str = "annulus") -> BogovskiiDomain:
    if mode == "annulus":
        return BogovskiiDomain.annulus(cutoff.R)
    if mode == "ball":
        return BogovskiiDomain.ball(cutoff.R)
    raise ValueError(f"unknown corrector mode {mode!r}")


def corrector_datum(v: VectorField, cutoff: Cutoff) -> tuple[ScalarField, float]:
    """``f = -grad phi . v`` with its grid mean removed; returns ``(f, removed_mean)``.

    For solenoidal ``v`` the integral of ``f`` vanishes, but the closed-form
    gradient of the cutoff and the spectral divergence of ``v`` are not exact
    discrete adjoints, so a small mean survives.  It is taken out with the
    shell weight, which keeps the support inside the annulus.
    """
    grid = v.grid
    f = -np.einsum("j...,j...->...", cutoff.gradient_values(grid), v.values)
    weight = ShellWeight(cutoff.R)(grid.radius)
    mean = float(np.sum(f))
    f = f - mean / float(np.sum(weight)) * weight
    return ScalarField(grid, values=f), mean * grid.cell_volume


def compute_corrector(v: VectorField, cutoff: Cutoff, mode: str = "annulus",
                      quad: RayQuadrature = RayQuadrature()) -> VectorField:
    """Corrector ``v_c`` with ``div v_c = -div(phi v)`` supported in the cutoff annulus (or ball)."""
    f, _ = corrector_datum(v, cutoff)
    return bogovskii_solve_many([f], corrector_domain(cutoff, mode), quad)[0]


def corrector_trajectory(v_slices, dv_slices, cutoff: Cutoff, mode: str = "annulus",
                         quad: RayQuadrature = RayQuadrature()):
    """Correctors and their time derivatives for a velocity trajectory.

    ``dv_slices`` are the time derivatives of the velocity; since the
    corrector is linear in its datum, ``d/dt v_c`` is the corrector of
    ``-grad phi . dv/dt``.
    """
    v_slices, dv_slices = list(v_slices), list(dv_slices)
    if len(v_slices) != len(dv_slices):
        raise ValueError("velocity and time-derivative trajectories differ in length")
    data = [corrector_datum(v, cutoff)[0] for v in v_slices] + [corrector_datum(d, cutoff)[0] for d in dv_slices]
    sols = bogovskii_solve_many(data, corrector_domain(cutoff, mode), quad)
    m = len(v_slices)
    return sols[:m], sols[m:]


def truncated_field(v: VectorField, cutoff: Cutoff, vc: VectorField) -> VectorField:
    """``r = phi v + v_c``."""
    return VectorField(v.grid, values=cutoff.values(v.grid) * v.values + vc.values)


def _f2_slice(v: VectorField, vc: VectorField, dvc: VectorField, cutoff: Cutoff, mask: np.ndarray) -> VectorField:
    grid = v.grid
    phiv = VectorField(grid, values=cutoff.values(grid) * v.values)
    jc = _jacobian(vc)
    jp = _jacobian(phiv)
    c = vc.values
    out = (dvc.values - laplacian(vc).values
           + np.einsum("j...,ij...->i...", c, jc)
           + np.einsum("j...,ij...->i...", c, jp)
           + np.einsum("j...,ij...->i...", phiv.values, jc))
    # F2 inherits the support of v_c; spectral derivatives leave ringing elsewhere
    return VectorField(grid, values=np.where(mask, out, 0.0))


def compute_f2(v_slices, cutoff: Cutoff, vc_slices, dvc_slices, mode: str = "annulus") -> list[VectorField]:
    """``F2 = dv_c/dt - Lap v_c + (v_c.grad)v_c + (v_c.grad)(phi v) + (phi v.grad)v_c`` per time slice."""
    v_slices, vc_slices, dvc_slices = list(v_slices), list(vc_slices), list(dvc_slices)
    if not len(v_slices) == len(vc_slices) == len(dvc_slices):
        raise ValueError("trajectory lengths differ: "
                         f"{len(v_slices)} velocity, {len(vc_slices)} corrector, {len(dvc_slices)} derivative")
    if not v_slices:
        return []
    grid = v_slices[0].grid
    mask = corrector_domain(cutoff, mode).contains(grid.radius)
    return [_f2_slice(v, c, d, cutoff, mask) for v, c, d in zip(v_slices, vc_slices, dvc_slices)]
