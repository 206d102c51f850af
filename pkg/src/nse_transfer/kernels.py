"""Heat kernel and the kernels of ``exp(tA) P`` and its gradient.

The projected heat kernel splits as ``K1 = G + Q`` with ``G = delta E_t`` the
Gaussian part and

    Q_jk(x, t) = int_t^inf d_j d_k E_s(x) ds

the Riesz part.  Substituting ``s = |x|^2 / u^2`` turns every spatial
derivative of ``Q`` into a finite sum of moment integrals

    I_p(U) = int_0^U u^p exp(-u^2/4) du,     U = |x| / sqrt(t),

weighted by polynomials in ``x/|x|``.  The integrands are smooth (the square
root singularity of the plain ``|x|^2/s`` substitution disappears), and the
moments are evaluated by adaptive Gauss-Legendre quadrature.

Array conventions: points are arrays of shape ``(..., n)``; ``k1`` returns
``(..., n, n)`` and ``k2`` returns ``(..., n, n, n)`` indexed ``[..., l, j, k]``
for ``d_l K1_jk``.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial import hermite as _herm
from numpy.polynomial import legendre as _leg

SEED = 0x5EED


@dataclass(frozen=True)
class QuadSpec:
    nodes: int = 16
    tol: float = 1e-10
    max_depth: int = 60


@lru_cache(maxsize=None)
def _gl_rule(m: int):
    x, w = _leg.leggauss(m)
    return x, w


def adaptive_gauss_legendre(f, a, b, tol=1e-10, nodes=16, max_depth=60):
    """Integrate vectorised ``f`` over each interval ``[a_i, b_i]``.

    Bisection on every interval whose ``nodes``-point estimate disagrees with
    the sum over its halves by more than its share of ``tol``.  The share is
    halved on each split so the absolute error target holds per interval.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    x, w = _gl_rule(nodes)
    out = np.zeros(a.shape)
    owner = np.arange(a.size)
    lo, hi = a.ravel().copy(), b.ravel().copy()
    tols = np.broadcast_to(np.asarray(tol, dtype=float), a.shape).ravel().copy()

    def rule(l, r):
        half = 0.5 * (r - l)
        mid = 0.5 * (r + l)
        pts = mid[:, None] + half[:, None] * x[None, :]
        return half * (f(pts) @ w)

    whole = rule(lo, hi)
    depth = 0
    flat = out.ravel()
    while lo.size:
        mid = 0.5 * (lo + hi)
        left = rule(lo, mid)
        right = rule(mid, hi)
        fine = left + right
        # round-off floor keeps tiny absolute targets from bisecting forever
        done = np.abs(fine - whole) <= np.maximum(tols, 64 * np.finfo(float).eps * np.abs(fine))
        if depth >= max_depth:
            done[:] = True
        np.add.at(flat, owner[done], fine[done])
        keep = ~done
        owner = np.concatenate([owner[keep], owner[keep]])
        lo, hi = np.concatenate([lo[keep], mid[keep]]), np.concatenate([mid[keep], hi[keep]])
        whole = np.concatenate([left[keep], right[keep]])
        tols = np.concatenate([tols[keep], tols[keep]]) * 0.5
        depth += 1
    return flat.reshape(a.shape)


def moment_integral(p: int, U, quad: QuadSpec = QuadSpec()) -> np.ndarray:
    """``I_p(U) = int_0^U u^p exp(-u^2/4) du`` for an array of upper limits.

    Limits are sorted and the integral is accumulated segment by segment, so
    many limits cost little more than the largest one.
    """
    U = np.asarray(U, dtype=float)
    flat = U.ravel()
    order = np.argsort(flat, kind="stable")
    edges = np.concatenate([[0.0], flat[order]])
    # the integrand is below 1e-300 well before u = 60
    clipped = np.minimum(edges, 60.0)
    span = max(clipped[-1], 1e-300)
    seg = adaptive_gauss_legendre(
        lambda u: u**p * np.exp(-0.25 * u * u),
        clipped[:-1],
        clipped[1:],
        tol=quad.tol * np.diff(clipped) / span,
        nodes=quad.nodes,
        max_depth=quad.max_depth,
    )
    cum = np.cumsum(seg)
    res = np.empty_like(flat)
    res[order] = cum
    return res.reshape(U.shape)


def _check_time(t):
    if not np.all(np.asarray(t) > 0):
        raise ValueError(f"kernel time must be positive, got {t}")


def heat_kernel(x, s) -> np.ndarray:
    """``(4 pi s)^(-n/2) exp(-|x|^2 / 4s)``."""
    _check_time(s)
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    r2 = np.sum(x * x, axis=-1)
    return (4 * np.pi * s) ** (-n / 2) * np.exp(-r2 / (4 * s))


@lru_cache(maxsize=None)
def _hermite_terms(gamma: tuple[int, ...]):
    """Expansion of ``prod_i H_{gamma_i}(y_i)`` as ``[(coef, exponent tuple)]``."""
    per_axis = []
    for g in gamma:
        coefs = _herm.herm2poly([0] * g + [1])
        per_axis.append([(c, e) for e, c in enumerate(coefs) if c != 0])
    terms = []
    for combo in itertools.product(*per_axis):
        coef = math.prod(c for c, _ in combo)
        terms.append((coef, tuple(e for _, e in combo)))
    return tuple(terms)


def _gaussian_derivative(x, t, gamma) -> np.ndarray:
    """``d^gamma E_t(x)`` through Hermite polynomials."""
    x = np.asarray(x, dtype=float)
    y = x / (2 * math.sqrt(t))
    poly = np.zeros(x.shape[:-1])
    for coef, exps in _hermite_terms(tuple(gamma)):
        term = np.full(x.shape[:-1], coef)
        for i, e in enumerate(exps):
            if e:
                term = term * y[..., i] ** e
        poly = poly + term
    g = sum(gamma)
    return (-1) ** g * (4 * t) ** (-g / 2) * poly * heat_kernel(x, t)


def _riesz_derivative(x, t, gamma, quad: QuadSpec, cache=None) -> np.ndarray:
    """``int_t^inf d^gamma E_s(x) ds`` for ``|gamma| >= 2``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r == 0):
        raise ValueError("the Riesz part is singular at x = 0")
    xh = x / r[..., None]
    U = r / math.sqrt(t)
    g = sum(gamma)
    cache = {} if cache is None else cache
    acc = np.zeros(r.shape)
    for coef, exps in _hermite_terms(tuple(gamma)):
        c = sum(exps)
        p = n + g + c - 3
        if p not in cache:
            cache[p] = moment_integral(p, U, quad)
        mono = np.ones(r.shape)
        for i, e in enumerate(exps):
            if e:
                mono = mono * xh[..., i] ** e
        acc = acc + coef * 2.0 ** (-c) * mono * cache[p]
    pref = (4 * np.pi) ** (-n / 2) * (-1) ** g * 2.0 ** (1 - g)
    return pref * r ** (2 - n - g) * acc


def _pair_index(n, j, k, beta=None):
    gamma = [0] * n if beta is None else list(beta)
    gamma[j] += 1
    gamma[k] += 1
    return tuple(gamma)


def k1_gaussian_part(x, t, j, k) -> np.ndarray:
    """Gaussian part ``delta_jk E_t(x)``."""
    _check_time(t)
    return heat_kernel(x, t) * (1.0 if j == k else 0.0)


def k1_riesz_part(x, t, j, k, quad: QuadSpec = QuadSpec()) -> np.ndarray:
    """Riesz part ``int_t^inf d_j d_k E_s(x) ds`` by moment quadrature."""
    _check_time(t)
    x = np.asarray(x, dtype=float)
    return _riesz_derivative(x, t, _pair_index(x.shape[-1], j, k), quad)


def k1_derivative(x, t, beta, quad: QuadSpec = QuadSpec()) -> np.ndarray:
    """``d^beta K1(x, t)`` as an array ``(..., n, n)``."""
    _check_time(t)
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    beta = tuple(beta)
    out = np.zeros(x.shape[:-1] + (n, n))
    gauss = _gaussian_derivative(x, t, beta)
    cache: dict = {}
    for j in range(n):
        out[..., j, j] += gauss
        for k in range(j, n):
            val = _riesz_derivative(x, t, _pair_index(n, j, k, beta), quad, cache)
            out[..., j, k] += val
            if k != j:
                out[..., k, j] += val
    return out


def k1(x, t, quad: QuadSpec = QuadSpec()) -> np.ndarray:
    """Kernel of ``exp(tA) P``: an ``n x n`` matrix per point."""
    x = np.asarray(x, dtype=float)
    return k1_derivative(x, t, (0,) * x.shape[-1], quad)


def k2(x, t, quad: QuadSpec = QuadSpec()) -> np.ndarray:
    """Kernel of ``grad exp(tA) P``: entry ``[..., l, j, k]`` is ``d_l K1_jk``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    return np.stack([k1_derivative(x, t, tuple(int(i == l) for i in range(n)), quad) for l in range(n)], axis=-3)


def kernel_jet(kernel: str, x, t, k: int = 0, quad: QuadSpec = QuadSpec()) -> np.ndarray:
    """Pointwise Frobenius magnitude of ``D^k`` applied to the named kernel.

    ``kernel`` is ``"K1"``, ``"K2"`` (one extra derivative of K1) or
    ``"Q"`` (the Riesz part of K1 alone).
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    order = k + (1 if kernel == "K2" else 0)
    acc = np.zeros(x.shape[:-1])
    for idx in itertools.product(range(n), repeat=order):
        beta = [0] * n
        for i in idx:
            beta[i] += 1
        if kernel == "Q":
            cache: dict = {}
            for j in range(n):
                for kk in range(n):
                    val = _riesz_derivative(x, t, _pair_index(n, j, kk, beta), quad, cache)
                    acc = acc + val * val
        else:
            val = k1_derivative(x, t, tuple(beta), quad)
            acc = acc + np.sum(val * val, axis=(-2, -1))
    return np.sqrt(acc)


def kernel_exterior_lq(kernel: str, t: float, q: float, n: int = 3, quad: QuadSpec = QuadSpec()) -> float:
    """``L^q`` norm of the kernel magnitude outside the unit ball.

    The magnitude is rotation invariant, so the norm reduces to a radial
    integral.  The radial range is cut where the integrand falls below
    ``1e-14`` of its maximum.
    """
    _check_time(t)
    if not q >= 1:
        raise ValueError(f"q must lie in [1, inf], got {q}")

    def mag(r):
        pts = np.zeros(np.shape(r) + (n,))
        pts[..., 0] = r
        return kernel_jet(kernel, pts, t, 0, quad)

    sphere = 2 * math.pi ** (n / 2) / math.gamma(n / 2)
    edges = [1.0]
    if math.isinf(q):
        best, r = 0.0, 1.0
        while r < 1e12:
            v = mag(np.geomspace(r, 2 * r, 65))
            best = max(best, float(v.max()))
            if v[-1] < 1e-14 * best:
                break
            r *= 2
        return best

    def integrand(r):
        return mag(r) ** q * r ** (n - 1) * sphere

    peak = 0.0
    r = 1.0
    while True:
        v = float(integrand(np.array([r]))[0])
        peak = max(peak, v)
        if len(edges) > 2 and v < 1e-14 * peak:
            break
        r *= 2.0
        edges.append(r)
        if r > 1e12:
            break
        # include interior maxima between dyadic points
        mid = np.geomspace(edges[-2], edges[-1], 9)
        peak = max(peak, float(integrand(mid).max()))
    edges = np.array(edges)
    tol = quad.tol * max(peak, 1e-300)
    parts = adaptive_gauss_legendre(integrand, edges[:-1], edges[1:], tol=tol, nodes=quad.nodes)
    return float(np.sum(parts) ** (1.0 / q))


# --- bound checks ----------------------------------------------------------


@dataclass
class BoundCheck:
    kernel: str
    k: int
    alpha: float
    beta: float
    t: float
    measured_sup: float
    dyadic_ratio: float


def sample_directions(n: int = 3, count: int = 26, seed: int = SEED) -> np.ndarray:
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def dyadic(lo_exp: int, hi_exp: int) -> np.ndarray:
    return 2.0 ** np.arange(lo_exp, hi_exp + 1)


def weight_total(kernel: str, k: int, n: int) -> int:
    """Homogeneity total ``alpha + beta`` of ``D^k`` of the kernel."""
    return n + k + (1 if kernel == "K2" else 0)


def shell_sups(kernel, k, alpha, beta, t, radii, directions, quad=QuadSpec()) -> np.ndarray:
    """Sup over each radius shell of ``|D^k kernel| |x|^alpha t^(beta/2)``."""
    radii = np.asarray(radii, dtype=float)
    pts = radii[:, None, None] * directions[None, :, :]
    vals = kernel_jet(kernel, pts, t, k, quad) * radii[:, None] ** alpha * t ** (beta / 2)
    return vals.max(axis=1)


def bound_check(kernel, k, alpha, t, radii=None, directions=None, n=3, beta=None, quad=QuadSpec()) -> BoundCheck:
    """One sampled bound check at time ``t``.

    ``beta`` defaults to the homogeneity total minus ``alpha``.
    ``dyadic_ratio`` is the largest ratio between sups on consecutive radius
    shells, the quantity that stays near 1 when the weighted kernel is
    bounded.
    """
    if radii is None:
        radii = dyadic(-2, 3)
    if directions is None:
        directions = sample_directions(n)
    total = weight_total(kernel, k, n)
    if beta is None:
        beta = total - alpha
    sups = shell_sups(kernel, k, alpha, beta, t, radii, directions, quad)
    ratio = float(np.max(sups[1:] / sups[:-1])) if len(sups) > 1 else 1.0
    return BoundCheck(kernel, k, float(alpha), float(beta), float(t), float(sups.max()), ratio)


def rescaling_ratio(kernel, k, alpha, t, radii=None, directions=None, n=3, quad=QuadSpec()) -> float:
    """Ratio of weighted sups after ``(x, t) -> (2x, 4t)``; exactly 1 when weights match the homogeneity."""
    if radii is None:
        radii = dyadic(-2, 3)
    if directions is None:
        directions = sample_directions(n)
    beta = weight_total(kernel, k, n) - alpha
    a = shell_sups(kernel, k, alpha, beta, t, radii, directions, quad).max()
    b = shell_sups(kernel, k, alpha, beta, 4 * t, 2 * np.asarray(radii), directions, quad).max()
    return float(b / a)


def bound_table(kernels=("K1", "K2"), ks=(0,), times=None, fractions=(0, 0.25, 0.5, 0.75, 1.0), n=3, quad=QuadSpec()):
    """Sweep the ``(alpha, beta)`` family over the standard sample set."""
    if times is None:
        times = dyadic(-4, 2)
    dirs = sample_directions(n)
    rows = []
    for kern in kernels:
        for k in ks:
            total = weight_total(kern, k, n)
            for frac in fractions:
                for t in times:
                    rows.append(bound_check(kern, k, frac * total, t, directions=dirs, n=n, quad=quad))
    return rows


BOUND_COLUMNS = ("kernel", "k", "alpha", "beta", "t", "measured_sup", "dyadic_ratio")


def write_bound_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUND_COLUMNS)
        for row in rows:
            d = asdict(row)
            w.writerow([d[c] if isinstance(d[c], str) else repr(d[c]) for c in BOUND_COLUMNS])


def read_bound_csv(path) -> list[BoundCheck]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        return [
            BoundCheck(r["kernel"], int(r["k"]), float(r["alpha"]), float(r["beta"]), float(r["t"]),
                       float(r["measured_sup"]), float(r["dyadic_ratio"]))
            for r in rd
        ]


def exterior_slope(kernel: str, times, q: float, n: int = 3, quad: QuadSpec = QuadSpec()):
    """Log-log slope of the exterior norm against ``t``; returns ``(slope, norms)``."""
    times = np.asarray(times, dtype=float)
    norms = np.array([kernel_exterior_lq(kernel, t, q, n, quad) for t in times])
    slope = np.polyfit(np.log(times), np.log(norms), 1)[0]
    return float(slope), norms
