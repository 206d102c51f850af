"""Shared independent oracles for the test suite.

Every helper here is written against numpy directly rather than through the
package, so a test that compares the two is a genuine cross-check.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import integrate, special

from nse_transfer.data import BumpSpec, solenoidal_bump
from nse_transfer.spectral import Grid

SEED = 0x5EED


def central_divergence(values: np.ndarray, h: float) -> np.ndarray:
    """Second-order periodic central-difference divergence of a vector field."""
    return sum((np.roll(values[a], -1, axis=a) - np.roll(values[a], 1, axis=a)) / (2 * h) for a in range(values.shape[0]))


def rel_l2(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def rk4_oracle(grid: Grid, u_hat: np.ndarray, T: float, steps: int) -> np.ndarray:
    """Classical RK4 on the convective form ``u_t = Lap u - P (u.grad) u`` with 2/3 dealiasing."""
    m = grid.dealias_mask
    kd = grid.kd

    def rhs(uh):
        u = grid.ifft(uh * m)
        adv = np.stack([sum(u[j] * grid.ifft(1j * kd[j] * uh[i] * m) for j in range(3)) for i in range(3)])
        ah = grid.fft(adv)
        w = sum(kd[j] * ah[j] for j in range(3)) * grid.kd2_inv
        return -grid.k2 * uh - np.stack([ah[j] - kd[j] * w for j in range(3)])

    dt = T / steps
    for _ in range(steps):
        a = rhs(u_hat)
        b = rhs(u_hat + dt / 2 * a)
        c = rhs(u_hat + dt / 2 * b)
        d = rhs(u_hat + dt * c)
        u_hat = u_hat + dt / 6 * (a + 2 * b + 2 * c + d)
    return u_hat


def newtonian_pressure(values: np.ndarray, h: float, targets: np.ndarray) -> np.ndarray:
    """Free-space pressure ``p = d_j d_k Gamma * (u_j u_k)`` by direct quadrature over the box.

    With ``Gamma = 1 / (4 pi |x|)`` the kernel ``d_j d_k Gamma`` is the
    principal value ``(3 xh xh - delta) / (4 pi r^3)`` plus ``-delta_jk delta / 3``,
    so ``p(x) = pv int H_jk(x - y) u_j u_k(y) dy - |u(x)|^2 / 3``.  The self cell
    is dropped: ``H`` integrates to zero over a cube centred on the target.
    """
    N = values.shape[1]
    c = (np.arange(N) - N // 2) * h
    grid_pts = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)
    tensor = np.einsum("i...,j...->...ij", values, values).reshape(-1, 3, 3)
    out = np.empty(len(targets))
    for n, x in enumerate(targets):
        d = x - grid_pts
        r = np.linalg.norm(d, axis=-1)
        keep = r > 0.5 * h
        H = riesz_far_field(d[keep])
        pv = np.einsum("nij,nij->", H, tensor[keep]) * h**3
        local = np.trace(tensor[~keep].sum(axis=0)) if np.any(~keep) else 0.0
        out[n] = pv - local / 3
    return out


def riesz_far_field(x: np.ndarray) -> np.ndarray:
    """``d_j d_k (1 / 4 pi |x|) = (3 xh xh - delta) / (4 pi |x|^3)``."""
    r = np.linalg.norm(x, axis=-1)
    xh = x / r[..., None]
    return (3 * xh[..., :, None] * xh[..., None, :] - np.eye(3)) / (4 * np.pi * r[..., None, None] ** 3)


def image_correction(x: np.ndarray, L: float, reach: int = 6) -> np.ndarray:
    """``sum_{m != 0} [H(x + m L) - H(m L)]`` over a cubic block of images, ``H`` the far field above.

    Symmetric summation makes ``sum H(m L)`` vanish and the subtracted form
    absolutely convergent.
    """
    ms = np.array([m for m in np.ndindex(2 * reach + 1, 2 * reach + 1, 2 * reach + 1)]) - reach
    ms = ms[np.any(ms != 0, axis=1)] * L
    out = np.zeros(x.shape[:-1] + (3, 3))
    base = riesz_far_field(ms).sum(axis=0)
    for i, p in enumerate(x.reshape(-1, 3)):
        out.reshape(-1, 3, 3)[i] = riesz_far_field(p + ms).sum(axis=0) - base
    return out


def k1_spectral(x: np.ndarray, t: float) -> np.ndarray:
    """Heat-Leray kernel in 3D by inverting its symbol along rays.

    The angular average of ``(delta - xi xi / |xi|^2) exp(i xi . x)`` reduces
    to spherical Bessel functions, leaving one radial quadrature per entry.
    """
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1] + (3, 3))
    top = 12.0 / math.sqrt(t)
    for i, p in enumerate(x.reshape(-1, 3)):
        r = float(np.linalg.norm(p))
        xh = p / r

        def radial(g):
            return integrate.quad(lambda s: s * s * math.exp(-t * s * s) * g(s * r), 0, top,
                                  epsabs=1e-14 * top**3, epsrel=1e-10, limit=400)[0]

        j0 = radial(lambda z: special.spherical_jn(0, z))
        j1 = radial(lambda z: special.spherical_jn(1, z) / z)
        j2 = radial(lambda z: special.spherical_jn(2, z))
        out.reshape(-1, 3, 3)[i] = 4 * np.pi / (2 * np.pi) ** 3 * ((j0 - j1) * np.eye(3) + j2 * np.outer(xh, xh))
    return out


def sphere_area(n: int) -> float:
    return 2 * math.pi ** (n / 2) / math.gamma(n / 2)


@pytest.fixture(scope="session")
def grid32():
    return Grid(3, 8.0, 32)


@pytest.fixture(scope="session")
def bump32(grid32):
    return solenoidal_bump(grid32, BumpSpec(radius=1.5, amplitude=1e-2))


@pytest.fixture
def rng():
    return np.random.default_rng(SEED)


# acceptance verdicts, one entry per criterion: list of (item, ok, detail)
ACCEPTANCE: dict[int, list] = {}


def record(criterion: int, item: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((item, bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        items = ACCEPTANCE[c]
        verdict = "PASS" if all(ok for _, ok, _ in items) else "FAIL"
        parts = "; ".join(f"{name} {'ok' if ok else 'FAIL'} ({detail})" for name, ok, detail in items)
        terminalreporter.write_line(f"criterion {c}: {verdict}  {parts}")
