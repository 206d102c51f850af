"""Right inverses of the divergence on balls and spherical shells.

Ball mode is the Bogovskii integral operator.  For a domain star-shaped with
respect to a ball carrying the bump ``g``,

    v(x) = int f(y) (x - y)/|x - y|^n int_{|x-y|}^inf g(y + r e) r^(n-1) dr dy,
    e = (x - y)/|x - y|,

solves ``div v = f`` with ``v = 0`` on the boundary whenever ``int f = 0``.
Writing ``y = x - rho e`` removes the weak singularity:

    v(x) = int_S e  int_0^inf f(x - rho e) G(x, e, rho) drho  de,
    G(x, e, rho) = int_0^inf g(x + w e) (w + rho)^(n-1) dw
                 = sum_m C(n-1, m) rho^m  M_(n-1-m)(x, e),

with chord moments ``M_j = int g(x + w e) w^j dw`` of the analytic bump.
Only directions whose forward ray meets the bump ball contribute, so the
sphere integral runs over the cone toward that ball.

Annulus mode works on the shell ``R-1 <= |x| <= R`` in spherical
coordinates.  With ``F(e) = int f(s e) s^2 ds`` the datum's mass along each
ray and ``psi`` a radial weight of unit mass,

    v1 = e r^-2 int_{R-1}^r (f(s e) - F(e) psi(s)) s^2 ds,
    v2 = r psi(r) grad_S Phi(e),     Lap_S Phi = F,

gives ``div v1 = f - F psi`` and ``div v2 = F psi``.  Both pieces vanish
outside the shell, and ``Phi`` exists because ``int_S F = int f = 0``.  The
sphere Poisson problem is solved in spherical harmonics.

In both modes ``f`` is read along rays by tensor cubic Lagrange
interpolation of the grid samples.  Only three-dimensional grids are
supported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numba as nb
import numpy as np
import scipy.fft as sfft
import scipy.special as sps
from numpy.polynomial import legendre as _leg

from .spectral import Grid, ScalarField, VectorField, jet_magnitude


class CompatibilityError(ValueError):
    """Raised when the datum does not have zero mean."""


class DomainError(ValueError):
    """Raised when the datum is supported outside the domain."""


def _bump_profile(s2):
    out = np.zeros_like(s2)
    m = s2 < 1
    out[m] = np.exp(-1.0 / (1.0 - s2[m]))
    return out


@dataclass(frozen=True)
class BumpFunction:
    """``c * exp(-1/(1 - |x - center|^2 / radius^2))`` normalised to unit integral."""

    center: tuple
    radius: float

    @cached_property
    def scale(self) -> float:
        n = len(self.center)
        s, w = _leg.leggauss(200)
        s = 0.5 * (s + 1)
        w = 0.5 * w
        radial = float(np.sum(w * _bump_profile(s * s) * s ** (n - 1)))
        sphere = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
        return 1.0 / (sphere * radial * self.radius**n)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        d = x - np.asarray(self.center)
        s2 = np.sum(d * d, axis=-1) / self.radius**2
        return self.scale * _bump_profile(s2)


def _gauss(a, b, m):
    x, w = _leg.leggauss(m)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


@dataclass(frozen=True)
class ShellWeight:
    """Radial weight ``psi(s) = c (1 - tau^2)^4``, ``tau = 2(s - R + 1/2)``, with ``int psi s^2 ds = 1``.

    A broad C^3 profile keeps the tangential part of the corrector well
    resolved; profiles as steep as the cutoff derivative double the grid
    divergence error.
    """

    R: float

    def _raw(self, s):
        tau = 2.0 * (np.asarray(s, dtype=float) - self.R + 0.5)
        return np.clip(1.0 - tau * tau, 0.0, None) ** 4

    @cached_property
    def scale(self) -> float:
        s, w = _gauss(self.R - 1, self.R, 400)
        return 1.0 / float(np.sum(w * self._raw(s) * s * s))

    def __call__(self, s) -> np.ndarray:
        return self.scale * self._raw(s)

    def mass(self, r) -> np.ndarray:
        """``int_{R-1}^r psi(s) s^2 ds``, clipped to [0, 1] outside the shell."""
        r = np.clip(np.asarray(r, dtype=float), self.R - 1, self.R)
        x, w = _leg.leggauss(64)
        a = self.R - 1
        half = 0.5 * (r - a)
        s = a + half[..., None] * (x + 1)
        return np.sum(half[..., None] * w * self(s) * s * s, axis=-1)


@dataclass(frozen=True)
class BogovskiiDomain:
    """Ball ``B_R`` (bump on ``B_{R/2}``) or shell ``R-1 <= |x| <= R``.

    ``degree`` is the spherical-harmonic cutoff used by annulus mode; ``None``
    picks one from the grid's angular resolution at radius ``R``.
    """

    mode: str
    R: float
    degree: int | None = None

    def __post_init__(self):
        if self.mode not in ("ball", "annulus"):
            raise ValueError(f"unknown Bogovskii mode {self.mode!r}")
        if self.R <= (1.0 if self.mode == "annulus" else 0.0):
            raise ValueError(f"radius {self.R} too small for mode {self.mode}")

    @classmethod
    def ball(cls, R):
        return cls("ball", float(R))

    @classmethod
    def annulus(cls, R, degree=None):
        return cls("annulus", float(R), degree)

    @property
    def inner(self) -> float:
        return self.R - 1 if self.mode == "annulus" else 0.0

    def bump(self) -> BumpFunction:
        return BumpFunction((0.0, 0.0, 0.0), self.R / 2)

    def resolved_degree(self, grid: Grid) -> int:
        if self.degree is not None:
            return int(self.degree)
        return int(min(max(math.ceil(0.5 * math.pi * self.R / grid.h), 8), 64))

    def contains(self, r: np.ndarray) -> np.ndarray:
        if self.mode == "ball":
            return r <= self.R
        return (r >= self.R - 1) & (r <= self.R)

    def describe(self) -> dict:
        d = {"mode": self.mode, "R": self.R}
        if self.mode == "annulus" and self.degree is not None:
            d["degree"] = self.degree
        return d


@dataclass(frozen=True)
class RayQuadrature:
    """Node counts for the direction, chord and ray integrals.

    ``panel`` is the ray panel length in grid spacings; each panel carries
    ``panel_nodes`` Gauss-Legendre nodes.  The direction and chord counts
    only matter in ball mode.
    """

    polar: int = 6
    azimuth: int = 8
    full_polar: int = 12
    full_azimuth: int = 16
    chord: int = 24
    panel: float = 1.0
    panel_nodes: int = 2


# --- compiled core ---------------------------------------------------------


@nb.njit(cache=True)
def _interp(fsub, ox, oy, oz, inv_h, px, py, pz):
    gx = (px - ox) * inv_h
    gy = (py - oy) * inv_h
    gz = (pz - oz) * inv_h
    ix = int(math.floor(gx))
    iy = int(math.floor(gy))
    iz = int(math.floor(gz))
    nx, ny, nz = fsub.shape
    if ix < 1 or iy < 1 or iz < 1 or ix > nx - 3 or iy > ny - 3 or iz > nz - 3:
        return 0.0
    tx = gx - ix
    ty = gy - iy
    tz = gz - iz
    wx = np.empty(4)
    wy = np.empty(4)
    wz = np.empty(4)
    for t, w in ((tx, wx), (ty, wy), (tz, wz)):
        w[0] = -t * (t - 1.0) * (t - 2.0) / 6.0
        w[1] = (t + 1.0) * (t - 1.0) * (t - 2.0) * 0.5
        w[2] = -(t + 1.0) * t * (t - 2.0) * 0.5
        w[3] = (t + 1.0) * t * (t - 1.0) / 6.0
    acc = 0.0
    for a in range(4):
        sa = 0.0
        for b in range(4):
            sb = 0.0
            for c in range(4):
                sb += wz[c] * fsub[ix - 1 + a, iy - 1 + b, iz - 1 + c]
            sa += wy[b] * sb
        acc += wx[a] * sa
    return acc


@nb.njit(cache=True)
def _ray_interval(x0, x1, x2, e0, e1, e2, radius):
    """Parameters rho >= 0 with |x - rho e| <= radius, as (lo, hi); lo > hi if empty."""
    b = x0 * e0 + x1 * e1 + x2 * e2
    c = x0 * x0 + x1 * x1 + x2 * x2 - radius * radius
    disc = b * b - c
    if disc <= 0.0:
        return 1.0, -1.0
    s = math.sqrt(disc)
    return max(b - s, 0.0), b + s


@nb.njit(cache=True)
def _solve_points(pts, fsub, origin, h, shell_in, shell_out, gc, gr, gscale,
                  cone_u, cone_w, full_u, full_w, n_az, n_az_full,
                  chord_x, chord_w, panel_len, panel_x, panel_w, out):
    inv_h = 1.0 / h
    ox, oy, oz = origin[0], origin[1], origin[2]
    bx = ox + h * (fsub.shape[0] - 1)
    by = oy + h * (fsub.shape[1] - 1)
    bz = oz + h * (fsub.shape[2] - 1)
    two_pi = 2.0 * math.pi
    for ip in range(pts.shape[0]):
        x0, x1, x2 = pts[ip, 0], pts[ip, 1], pts[ip, 2]
        d0, d1, d2 = gc[0] - x0, gc[1] - x1, gc[2] - x2
        dist = math.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
        if dist > gr:
            a0, a1, a2 = d0 / dist, d1 / dist, d2 / dist
            cmax = math.sqrt(1.0 - (gr / dist) ** 2)
            us = cmax + (1.0 - cmax) * 0.5 * (cone_u + 1.0)
            uw = (1.0 - cmax) * 0.5 * cone_w
            naz = n_az
        else:
            a0, a1, a2 = 0.0, 0.0, 1.0
            us = full_u
            uw = full_w
            naz = n_az_full
        # orthonormal frame around the axis
        if abs(a2) < 0.9:
            p0, p1, p2 = -a1, a0, 0.0
        else:
            p0, p1, p2 = 0.0, -a2, a1
        pn = math.sqrt(p0 * p0 + p1 * p1 + p2 * p2)
        p0, p1, p2 = p0 / pn, p1 / pn, p2 / pn
        q0 = a1 * p2 - a2 * p1
        q1 = a2 * p0 - a0 * p2
        q2 = a0 * p1 - a1 * p0
        v0 = 0.0
        v1 = 0.0
        v2 = 0.0
        for iu in range(us.shape[0]):
            u = us[iu]
            sn = math.sqrt(max(0.0, 1.0 - u * u))
            for ia in range(naz):
                psi = two_pi * (ia + 0.5) / naz
                cp = math.cos(psi) * sn
                sp = math.sin(psi) * sn
                e0 = u * a0 + cp * p0 + sp * q0
                e1 = u * a1 + cp * p1 + sp * q1
                e2 = u * a2 + cp * p2 + sp * q2
                # chord of the bump ball along x + w e
                rx, ry, rz = x0 - gc[0], x1 - gc[1], x2 - gc[2]
                b = e0 * rx + e1 * ry + e2 * rz
                c = rx * rx + ry * ry + rz * rz - gr * gr
                disc = b * b - c
                if disc <= 0.0:
                    continue
                sq = math.sqrt(disc)
                w_lo = max(-b - sq, 0.0)
                w_hi = -b + sq
                if w_hi <= w_lo:
                    continue
                m0 = 0.0
                m1 = 0.0
                m2 = 0.0
                half = 0.5 * (w_hi - w_lo)
                mid = 0.5 * (w_hi + w_lo)
                for ic in range(chord_x.shape[0]):
                    w = mid + half * chord_x[ic]
                    sx, sy, sz = rx + w * e0, ry + w * e1, rz + w * e2
                    s2 = (sx * sx + sy * sy + sz * sz) / (gr * gr)
                    if s2 >= 1.0:
                        continue
                    gv = chord_w[ic] * half * math.exp(-1.0 / (1.0 - s2))
                    m0 += gv
                    m1 += gv * w
                    m2 += gv * w * w
                if m0 == 0.0:
                    continue
                # backward ray through the shell and the data box
                lo_o, hi_o = _ray_interval(x0, x1, x2, e0, e1, e2, shell_out)
                if hi_o <= lo_o:
                    continue
                # slab clip to the sub-box
                t_lo = lo_o
                t_hi = hi_o
                for xc, ec, lo_b, hi_b in ((x0, e0, ox, bx), (x1, e1, oy, by), (x2, e2, oz, bz)):
                    if abs(ec) < 1e-300:
                        if xc < lo_b or xc > hi_b:
                            t_hi = -1.0
                    else:
                        ta = (xc - lo_b) / ec
                        tb = (xc - hi_b) / ec
                        if ta > tb:
                            ta, tb = tb, ta
                        t_lo = max(t_lo, ta)
                        t_hi = min(t_hi, tb)
                if t_hi <= t_lo:
                    continue
                lo_i, hi_i = _ray_interval(x0, x1, x2, e0, e1, e2, shell_in)
                f0 = 0.0
                f1 = 0.0
                f2 = 0.0
                for seg in range(2):
                    if seg == 0:
                        s_lo = t_lo
                        s_hi = min(t_hi, lo_i) if hi_i > lo_i else t_hi
                    else:
                        if hi_i <= lo_i:
                            break
                        s_lo = max(t_lo, hi_i)
                        s_hi = t_hi
                    if s_hi <= s_lo:
                        continue
                    npan = int(math.ceil((s_hi - s_lo) / panel_len))
                    plen = (s_hi - s_lo) / npan
                    for k in range(npan):
                        pm = s_lo + (k + 0.5) * plen
                        for j in range(panel_x.shape[0]):
                            rho = pm + 0.5 * plen * panel_x[j]
                            fv = _interp(fsub, ox, oy, oz, inv_h, x0 - rho * e0, x1 - rho * e1, x2 - rho * e2)
                            if fv != 0.0:
                                fw = fv * panel_w[j] * 0.5 * plen
                                f0 += fw
                                f1 += fw * rho
                                f2 += fw * rho * rho
                # (w + rho)^2 = w^2 + 2 w rho + rho^2
                val = gscale * (m2 * f0 + 2.0 * m1 * f1 + m0 * f2) * uw[iu] * (two_pi / naz)
                v0 += val * e0
                v1 += val * e1
                v2 += val * e2
        out[ip, 0] += v0
        out[ip, 1] += v1
        out[ip, 2] += v2


@nb.njit(cache=True)
def _radial_integrals(dirs, ends, f, origin, h, r0, panel_len, panel_x, panel_w, out):
    """``out[i] = int_{r0}^{ends[i]} f(s dirs[i]) s^2 ds`` along rays from the origin."""
    inv_h = 1.0 / h
    for i in range(dirs.shape[0]):
        hi = ends[i]
        if hi <= r0:
            out[i] = 0.0
            continue
        e0, e1, e2 = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        npan = int(math.ceil((hi - r0) / panel_len))
        plen = (hi - r0) / npan
        acc = 0.0
        for k in range(npan):
            pm = r0 + (k + 0.5) * plen
            for j in range(panel_x.shape[0]):
                s = pm + 0.5 * plen * panel_x[j]
                fv = _interp(f, origin[0], origin[1], origin[2], inv_h, s * e0, s * e1, s * e2)
                acc += panel_w[j] * 0.5 * plen * s * s * fv
        out[i] = acc


# --- annulus mode ----------------------------------------------------------

# Polar axis of the spherical-harmonic frame.  A generic direction keeps grid
# points off the coordinate poles, where grad_S needs a 0/0 limit.
_AXIS = np.array([0.3141592653589793, 0.5772156649015329, 0.7536515080350522])


def _frame():
    ez = _AXIS / np.linalg.norm(_AXIS)
    ex = np.cross(ez, [0.0, 0.0, 1.0])
    ex /= np.linalg.norm(ex)
    ey = np.cross(ez, ex)
    return ex, ey, ez


def _angles(dirs):
    ex, ey, ez = _frame()
    theta = np.arccos(np.clip(dirs @ ez, -1.0, 1.0))
    phi = np.mod(np.arctan2(dirs @ ey, dirs @ ex), 2 * math.pi)
    return theta, phi


def _legendre(deg, theta, diff=0):
    """Orthonormal associated Legendre values and theta-derivatives up to ``diff``, ``0 <= m <= deg``.

    Shape ``(diff + 1, deg + 1, deg + 1, P)``.
    """
    p = sps.sph_legendre_p_all(deg, deg, theta, diff_n=diff)
    return p[:, :, : deg + 1, :]


class SphereGrid:
    """Gauss-Legendre by uniform-azimuth nodes, exact for harmonics of degree <= deg."""

    def __init__(self, deg: int):
        self.deg = deg
        ct, self.w = _leg.leggauss(deg + 1)
        self.theta = np.arccos(ct)
        self.nphi = 2 * deg + 2
        self.phi = 2 * math.pi * np.arange(self.nphi) / self.nphi
        ex, ey, ez = _frame()
        st = np.sin(self.theta)[:, None, None]
        self.dirs = (st * np.cos(self.phi)[None, :, None] * ex + st * np.sin(self.phi)[None, :, None] * ey
                     + np.cos(self.theta)[:, None, None] * ez).reshape(-1, 3)
        self.table = _legendre(deg, self.theta)[0]

    def analyse(self, values: np.ndarray):
        """Real coefficients ``(A, B)`` with ``F = sum P_lm (A cos m phi + B sin m phi)``."""
        vals = values.reshape(values.shape[0], len(self.theta), self.nphi)
        spec = sfft.rfft(vals, axis=-1)[..., : self.deg + 1] * (2 * math.pi / self.nphi)
        fac = np.full(self.deg + 1, 2.0)
        fac[0] = 1.0
        wc = self.w[None, :, None] * spec.real * fac
        ws = -self.w[None, :, None] * spec.imag * fac
        a = np.einsum("lmi,dim->dlm", self.table, wc)
        b = np.einsum("lmi,dim->dlm", self.table, ws)
        return a, b


def _sphere_gradient(a, b, theta, phi, chunk=4096):
    """``grad_S`` of ``sum P_lm (a cos m phi + b sin m phi)`` at the given angles: shape (D, P, 3)."""
    deg = a.shape[1] - 1
    ex, ey, ez = _frame()
    m = np.arange(deg + 1)
    out = np.empty((a.shape[0], theta.size, 3))
    for lo in range(0, theta.size, chunk):
        sl = slice(lo, lo + chunk)
        th, ph = theta[sl], phi[sl]
        p, dp = _legendre(deg, th, diff=1)
        cos_m = np.cos(m[:, None] * ph)
        sin_m = np.sin(m[:, None] * ph)
        gc, gs = np.einsum("lmp,dlm->dmp", p, a), np.einsum("lmp,dlm->dmp", p, b)
        dc, ds = np.einsum("lmp,dlm->dmp", dp, a), np.einsum("lmp,dlm->dmp", dp, b)
        d_theta = np.sum(dc * cos_m + ds * sin_m, axis=1)
        d_phi = np.sum(m[:, None] * (gs * cos_m - gc * sin_m), axis=1)
        st, ct = np.sin(th), np.cos(th)
        cp, sp = np.cos(ph), np.sin(ph)
        e_theta = (ct * cp)[:, None] * ex + (ct * sp)[:, None] * ey - st[:, None] * ez
        e_phi = -sp[:, None] * ex + cp[:, None] * ey
        out[:, sl] = d_theta[..., None] * e_theta + (d_phi / st)[..., None] * e_phi
    return out


def _solve_annulus(arrays, grid: Grid, domain: BogovskiiDomain, quad: RayQuadrature) -> np.ndarray:
    h = grid.h
    R = domain.R
    r = grid.radius.ravel()
    idx = np.flatnonzero(domain.contains(r))
    rs = r[idx]
    dirs = np.ascontiguousarray(grid.points().reshape(-1, 3)[idx] / rs[:, None])
    sphere = SphereGrid(domain.resolved_degree(grid))
    psi = ShellWeight(R)
    psi_r, mass_r = psi(rs), psi.mass(rs)
    panel_x, panel_w = _nodes(quad.panel_nodes)
    origin = np.full(3, grid.coords()[0])
    # the interpolant of data on the closed shell reaches two cells beyond it
    r0, r1 = R - 1 - 2 * h, R + 2 * h
    ends_pts = np.full(rs.size, r1)
    ends_nodes = np.full(sphere.dirs.shape[0], r1)

    def ray(f, d, ends):
        out = np.empty(d.shape[0])
        _radial_integrals(d, ends, f, origin, h, r0, quad.panel * h, panel_x, panel_w, out)
        return out

    v1 = np.empty((len(arrays), rs.size, 3))
    f_nodes = np.empty((len(arrays), sphere.dirs.shape[0]))
    for i, f in enumerate(arrays):
        f = np.ascontiguousarray(f)
        partial = ray(f, dirs, rs)
        total = ray(f, dirs, ends_pts)
        v1[i] = dirs * ((partial - total * mass_r) / rs**2)[:, None]
        f_nodes[i] = ray(f, sphere.dirs, ends_nodes)
    a, b = sphere.analyse(f_nodes)
    ell = np.arange(a.shape[1], dtype=float)
    inv = np.zeros_like(ell)
    inv[1:] = -1.0 / (ell[1:] * (ell[1:] + 1))
    theta, phi = _angles(dirs)
    grad = _sphere_gradient(a * inv[:, None], b * inv[:, None], theta, phi)
    v = v1 + (rs * psi_r)[None, :, None] * grad
    out = np.zeros((len(arrays), 3, r.size))
    out[:, :, idx] = np.transpose(v, (0, 2, 1))
    return out.reshape((len(arrays), 3) + grid.shape)


# --- ball mode -------------------------------------------------------------


def _subbox(mask: np.ndarray, pad: int):
    idx = np.nonzero(mask)
    lo = [max(int(i.min()) - pad, 0) for i in idx]
    hi = [min(int(i.max()) + pad + 1, s) for i, s in zip(idx, mask.shape)]
    return tuple(lo), tuple(hi)


def _nodes(m):
    x, w = _leg.leggauss(m)
    return np.ascontiguousarray(x), np.ascontiguousarray(w)


def _solve_ball(fv: np.ndarray, grid: Grid, domain: BogovskiiDomain, quad: RayQuadrature) -> np.ndarray:
    h = grid.h
    coords = grid.coords()
    flat_pts = grid.points().reshape(-1, 3)
    out = np.zeros((flat_pts.shape[0], 3))
    cand = np.flatnonzero(grid.radius.ravel() <= domain.R)
    if np.any(fv) and cand.size:
        lo, hi = _subbox(fv != 0, 3)
        sub = np.ascontiguousarray(fv[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]])
        origin = np.array([coords[i] for i in lo])
        bump = domain.bump()
        acc = np.zeros((cand.size, 3))
        _solve_points(np.ascontiguousarray(flat_pts[cand]), sub, origin, h, 0.0, domain.R + 2 * h,
                      np.asarray(bump.center, dtype=float), float(bump.radius), float(bump.scale),
                      *_nodes(quad.polar), *_nodes(quad.full_polar), quad.azimuth, quad.full_azimuth,
                      *_nodes(quad.chord), quad.panel * h, *_nodes(quad.panel_nodes), acc)
        out[cand] = acc
    return np.ascontiguousarray(out.T.reshape((3,) + grid.shape))


# --- public interface ------------------------------------------------------


def _check_datum(f: np.ndarray, grid: Grid, domain: BogovskiiDomain) -> bool:
    """Validate the datum; returns False for the zero datum."""
    if grid.n != 3:
        raise ValueError("the Bogovskii solver supports three dimensions only")
    amax = float(np.max(np.abs(f))) if f.size else 0.0
    if amax == 0.0:
        return False
    outside = ~domain.contains(grid.radius)
    if np.any(np.abs(f[outside]) > 1e-12 * amax):
        raise DomainError(f"datum is supported outside the {domain.mode} domain of radius {domain.R}")
    l1 = float(np.sum(np.abs(f)))
    mean = float(np.sum(f))
    if abs(mean) > 1e-8 * l1:
        raise CompatibilityError(f"datum has nonzero integral {mean * grid.cell_volume:.3e}")
    return True


def bogovskii_solve_many(fs, domain: BogovskiiDomain, quad: RayQuadrature = RayQuadrature()) -> list[VectorField]:
    """Solve ``div v = f`` for several data sharing one grid; ``v = 0`` outside the domain."""
    fs = list(fs)
    if not fs:
        return []
    grid = fs[0].grid
    live, arrays = [], []
    for i, f in enumerate(fs):
        fv = np.array(f.values, dtype=float)
        if _check_datum(fv, grid, domain):
            # values outside the domain below the round-off threshold are dropped
            fv[~domain.contains(grid.radius)] = 0.0
            live.append(i)
            arrays.append(fv)
    out = [np.zeros((3,) + grid.shape) for _ in fs]
    if arrays:
        if domain.mode == "annulus":
            sols = _solve_annulus(arrays, grid, domain, quad)
        else:
            sols = [_solve_ball(a, grid, domain, quad) for a in arrays]
        for i, s in zip(live, sols):
            out[i] = np.ascontiguousarray(s)
    return [VectorField(grid, values=v) for v in out]


def bogovskii_solve(f: ScalarField, domain: BogovskiiDomain, quad: RayQuadrature = RayQuadrature()) -> VectorField:
    """Solve ``div v = f`` in the domain with ``v = 0`` outside it."""
    return bogovskii_solve_many([f], domain, quad)[0]


def sobolev_norm(u, k: int, q: float) -> float:
    """``W^{k,q}`` norm over the box from spectral derivatives."""
    total = 0.0
    cell = u.grid.cell_volume
    for m in range(k + 1):
        mag = jet_magnitude(u, m)
        total += float(np.sum(mag**q) * cell)
    return total ** (1.0 / q)


def bogovskii_estimate_ratio(f: ScalarField, domain: BogovskiiDomain, k: int = 1, q: float = 2.0,
                             quad: RayQuadrature = RayQuadrature()) -> float:
    """``||v||_{W^{k,q}} / ||f||_{W^{k-1,q}}`` for the solution ``v``."""
    if k < 1 or not 1 < q < math.inf:
        raise ValueError(f"need k >= 1 and 1 < q < inf, got k={k}, q={q}")
    den = sobolev_norm(f, k - 1, q)
    if den == 0:
        raise CompatibilityError("zero datum has no estimate ratio")
    v = bogovskii_solve(f, domain, quad)
    return sobolev_norm(v, k, q) / den


def divergence_residual(v: VectorField, f: ScalarField) -> float:
    """Relative L2 misfit of ``div v`` against ``f``, with second-order central differences.

    The solution is only finitely smooth across the domain boundary, where a
    spectral divergence rings; local differences keep the error local.
    """
    h = v.grid.h
    vals = v.values
    div = sum((np.roll(vals[a], -1, axis=a) - np.roll(vals[a], 1, axis=a)) / (2 * h) for a in range(v.grid.n))
    den = float(np.linalg.norm(f.values))
    if den == 0:
        raise CompatibilityError("zero datum has no relative residual")
    return float(np.linalg.norm(div - f.values)) / den


def time_derivative_corrector(dfs, domain: BogovskiiDomain, quad: RayQuadrature = RayQuadrature()) -> list[VectorField]:
    """Time derivative of the corrector from the time derivatives of its data.

    The operator does not depend on time, so ``d/dt B(f) = B(df/dt)``.
    """
    return bogovskii_solve_many(dfs, domain, quad)
