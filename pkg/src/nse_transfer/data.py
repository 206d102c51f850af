"""Solenoidal initial data: curls of compactly supported vector potentials."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .spectral import Grid, ScalarField, VectorField

__all__ = ["BumpSpec", "solenoidal_bump", "single_mode", "divergence_datum"]

# a fixed matrix with no symmetry, so the potential M x has no preferred axis
_MIX = np.array([[0.0, 1.0, -0.5], [0.3, 0.0, 1.0], [-1.0, 0.4, 0.0]])
_SWIRL_AXIS = np.array([0.3, -0.5, 1.0])


@dataclass(frozen=True)
class BumpSpec:
    """Descriptor of a solenoidal bump ``curl(psi(|x - c| / R0) A(x))``.

    ``pattern`` picks the potential: ``"swirl"`` uses a constant direction
    (a rotating blob), ``"mixed"`` adds the linear field ``M (x - c) / R0``.
    ``amplitude`` is the grid maximum of ``|v0|``; 0 gives the zero field.
    ``smoothing`` is a heat-flow time applied to the sampled potential: the
    bump is not band-limited, and its spectral tail otherwise rings across
    the box and drives a stiff initial transient.  The smoothed datum is the
    Stokes evolution of the compact bump, shifted in time by ``smoothing``.
    """

    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 1.0
    amplitude: float = 1e-2
    pattern: str = "mixed"
    smoothing: float = 0.05

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("bump radius must be positive")
        if self.amplitude < 0:
            raise ValueError("bump amplitude must be nonnegative")
        if self.pattern not in ("swirl", "mixed"):
            raise ValueError(f"unknown bump pattern {self.pattern!r}")
        if self.smoothing < 0:
            raise ValueError("smoothing time must be nonnegative")
        if len(self.center) != 3:
            raise ValueError("bumps are three-dimensional")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        return d


def _profile(s):
    """``exp(-1/(1 - s^2))``, zero for ``s >= 1``."""
    psi = np.zeros_like(s)
    m = s < 1
    psi[m] = np.exp(-1.0 / (1.0 - s[m] ** 2))
    return psi


def solenoidal_bump(grid: Grid, spec: BumpSpec = BumpSpec()) -> VectorField:
    """Sample the potential on ``grid``, smooth it by heat flow and take its spectral curl.

    A spectral curl is divergence free coefficient by coefficient, so no
    projection is needed; projecting a sampled closed-form curl instead would
    add the gradient of a Newtonian potential, whose algebraic tail survives
    the smoothing.  The amplitude is fixed after the curl.
    """
    if grid.n != 3:
        raise ValueError("bumps are three-dimensional")
    x = np.stack(np.broadcast_arrays(*[grid.mesh(a) - spec.center[a] for a in range(3)]))
    r = np.sqrt(np.sum(x * x, axis=0))
    psi = _profile(r / spec.radius)
    pot = psi * _SWIRL_AXIS[:, None, None, None]
    if spec.pattern == "mixed":
        pot = pot + psi * np.einsum("ij,j...->i...", _MIX, x) / spec.radius
    if spec.amplitude == 0:
        return VectorField(grid, values=np.zeros_like(pot), solenoidal=True)
    ph = grid.fft(pot) * np.exp(-spec.smoothing * grid.k2)
    kd = grid.kd
    hat = 1j * np.stack([kd[1] * ph[2] - kd[2] * ph[1], kd[2] * ph[0] - kd[0] * ph[2], kd[0] * ph[1] - kd[1] * ph[0]])
    peak = VectorField(grid, hat=hat).max_abs()
    return VectorField(grid, hat=hat * (spec.amplitude / peak), solenoidal=True)


def single_mode(grid: Grid, mode=(1, 0, 0), direction=(0.0, 1.0, 0.0), amplitude: float = 1.0) -> VectorField:
    """``amplitude * d * cos(2 pi m.x / L)`` with ``d`` orthogonal to ``m``; an exact Stokes eigenfunction."""
    m = np.asarray(mode, dtype=float)
    d = np.asarray(direction, dtype=float)
    if abs(m @ d) > 1e-14 * max(1.0, np.linalg.norm(m) * np.linalg.norm(d)):
        raise ValueError("the direction must be orthogonal to the mode")
    phase = 2 * np.pi / grid.L * sum(m[a] * grid.mesh(a) for a in range(grid.n)) + np.zeros(grid.shape)
    vals = amplitude * d[:, None, None, None] * np.cos(phase)
    return VectorField(grid, values=vals, solenoidal=True)


def divergence_datum(grid: Grid, R: float = 2.0) -> ScalarField:
    """``f = -div(phi u) = -grad phi . u`` for the cutoff of radius ``R`` and ``u = (sin(2 pi y / L), 0, 0)``.

    ``u`` is solenoidal, so ``f`` is supported in the cutoff annulus and has
    zero integral.
    """
    from .truncation import Cutoff

    u0 = np.sin(2 * np.pi * grid.mesh(1) / grid.L) + np.zeros(grid.shape)
    gphi = Cutoff(float(R)).gradient_values(grid)
    return ScalarField(grid, values=-gphi[0] * u0)
