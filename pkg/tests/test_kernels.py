import math

import numpy as np
import pytest
import scipy.fft as sfft
from scipy import special

from conftest import SEED, image_correction, k1_spectral
from nse_transfer.kernels import (
    QuadSpec,
    bound_check,
    bound_table,
    exterior_slope,
    heat_kernel,
    k1,
    k1_derivative,
    k1_gaussian_part,
    k1_riesz_part,
    k2,
    kernel_exterior_lq,
    kernel_jet,
    read_bound_csv,
    rescaling_ratio,
    sample_directions,
    write_bound_csv,
)

DIRS = sample_directions(3, 26, SEED)


def riesz_closed_form(x, t):
    """Incomplete-gamma form of the Riesz part: pi^-a |x|^-n [xh xh g(a+1, z) - delta g(a, z) / 2]."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    a, z = 1.5, r * r / (4 * t)
    lo = lambda s: special.gammainc(s, z) * special.gamma(s)  # noqa: E731
    xh = x / r[..., None]
    outer = xh[..., :, None] * xh[..., None, :]
    return math.pi**-a * r[..., None, None] ** -3 * (outer * lo(a + 1)[..., None, None]
                                                      - np.eye(3) * lo(a)[..., None, None] / 2)


def periodic_kernel(L, N, t, symbol):
    """Values on the FFT grid (index order) of the inverse transform of a sampled symbol."""
    h = L / N
    k = 2 * np.pi * sfft.fftfreq(N, h)
    K = np.meshgrid(k, k, k, indexing="ij")
    K2 = K[0] ** 2 + K[1] ** 2 + K[2] ** 2
    idx = np.arange(N)
    idx = np.where(idx < N // 2, idx, idx - N)
    X = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1) * h
    return X, np.real(sfft.ifftn(symbol(K, K2))) / h**3


class TestHeatKernel:
    def test_origin(self):
        assert heat_kernel(np.zeros(3), 1.0) == pytest.approx((4 * math.pi) ** -1.5, rel=1e-15)

    def test_scaling(self, rng):
        x = rng.standard_normal((10, 3))
        lam = 1.7
        assert np.allclose(heat_kernel(lam * x, lam**2 * 0.3), lam**-3 * heat_kernel(x, 0.3), rtol=1e-12, atol=0)

    def test_unit_mass(self):
        L, N, s = 12.0, 96, 0.5
        h = L / N
        c = (np.arange(N) - N // 2) * h
        X = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
        assert np.sum(heat_kernel(X, s)) * h**3 == pytest.approx(1.0, abs=1e-8)

    def test_rejects_nonpositive_time(self):
        with pytest.raises(ValueError):
            heat_kernel(np.zeros(3), 0.0)


class TestGaussianPart:
    def test_off_diagonal_zero(self):
        assert k1_gaussian_part(np.ones(3), 1.0, 0, 1) == 0.0

    def test_origin(self):
        assert k1_gaussian_part(np.zeros(3), 1.0, 2, 2) == pytest.approx((4 * math.pi) ** -1.5)

    def test_fft_oracle(self):
        L, N, t = 16.0, 64, 1.0
        X, per = periodic_kernel(L, N, t, lambda K, K2: np.exp(-t * K2))
        r = np.linalg.norm(X, axis=-1)
        # away from the wrap-around zone
        m = r <= L / 4
        exact = k1_gaussian_part(X[m], t, 0, 0)
        assert np.max(np.abs(per[m] - exact) / exact) <= 1e-6


class TestRieszPart:
    def test_matches_incomplete_gamma_form(self, rng):
        x = rng.standard_normal((20, 3)) * 2
        closed = riesz_closed_form(x, 0.7)
        for j in range(3):
            for k in range(3):
                assert np.allclose(k1_riesz_part(x, 0.7, j, k), closed[:, j, k], rtol=1e-9, atol=1e-14)

    def test_trace_is_minus_heat_kernel(self, rng):
        # sum_j d_j d_j E_s = d_s E_s, so the trace integrates to E_inf - E_t = -E_t
        x = rng.standard_normal((30, 3)) * 1.5
        tr = sum(k1_riesz_part(x, 0.5, j, j) for j in range(3))
        assert np.allclose(tr, -heat_kernel(x, 0.5), rtol=1e-8, atol=1e-12)

    def test_symmetric(self, rng):
        x = rng.standard_normal((5, 3))
        assert np.array_equal(k1_riesz_part(x, 1.0, 0, 2), k1_riesz_part(x, 1.0, 2, 0))

    def test_singular_at_origin(self):
        with pytest.raises(ValueError):
            k1_riesz_part(np.zeros(3), 1.0, 0, 0)

    def test_time_rejected(self):
        with pytest.raises(ValueError):
            k1_riesz_part(np.ones(3), -1.0, 0, 0)

    @pytest.mark.xfail(strict=True, reason="the Riesz part is homogeneous of degree -n, so |x|^(n+1) Q grows like |x|")
    def test_weighted_dyadic_ratio_literal(self):
        chk = bound_check("Q", 0, 4.0, 1.0, radii=[1, 2, 4, 8], directions=DIRS, beta=0.0)
        assert chk.dyadic_ratio <= 1.15

    def test_degree_minus_n_weight_saturates(self):
        # |x|^n Q settles onto its far-field profile once |x| >> sqrt(t)
        chk = bound_check("Q", 0, 3.0, 1.0, radii=[8, 16, 32, 64], directions=DIRS, beta=0.0)
        assert chk.dyadic_ratio <= 1.15


class TestK1:
    def test_symmetric(self, rng):
        m = k1(rng.standard_normal((7, 3)), 0.8)
        assert np.array_equal(m, np.swapaxes(m, -1, -2))

    def test_fft_oracle(self):
        L, N, t = 16.0, 64, 0.5

        def symbol(K, K2):
            safe = np.where(K2 == 0, 1.0, K2)
            s = np.exp(-t * K2) * (np.eye(3)[:, :, None, None, None] - np.einsum("i...,j...->ij...", K, K) / safe)
            s[:, :, 0, 0, 0] = 0.0
            return s

        h = L / N
        k = 2 * np.pi * sfft.fftfreq(N, h)
        K = np.stack(np.meshgrid(k, k, k, indexing="ij"))
        K2 = np.sum(K * K, axis=0)
        per = np.real(sfft.ifftn(symbol(K, K2), axes=(-3, -2, -1))) / h**3
        idx = np.arange(N)
        idx = np.where(idx < N // 2, idx, idx - N)
        X = np.stack(np.meshgrid(idx, idx, idx, indexing="ij"), axis=-1) * h
        r = np.linalg.norm(X, axis=-1)
        sel = np.argwhere((r >= 1) & (r <= L / 4))[::7]
        pts = X[tuple(sel.T)]
        free = k1(pts, t)
        # the zero mode removes the box means of both parts; the images add a smooth lattice sum
        oracle = free + image_correction(pts, L) - (2 / 3) * np.eye(3) / L**3
        got = np.moveaxis(per[:, :, sel[:, 0], sel[:, 1], sel[:, 2]], -1, 0)
        scale = np.linalg.norm(free, axis=(-2, -1))
        err = np.linalg.norm(got - oracle, axis=(-2, -1)) / scale
        assert err.max() <= 1e-3

    @pytest.mark.parametrize("t", [0.25, 1.0, 4.0])
    def test_spectral_inversion(self, rng, t):
        dirs = rng.standard_normal((4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pts = np.concatenate([dirs * r for r in (0.3, 1.0, 2.5, 6.0)])
        want = k1_spectral(pts, t)
        err = np.linalg.norm(k1(pts, t) - want, axis=(-2, -1)) / np.linalg.norm(want, axis=(-2, -1))
        assert err.max() <= 1e-6

    def test_decays_monotonically_for_large_t(self):
        x = np.array([1.0, 0.5, -0.3])
        r2 = float(x @ x)
        ts = r2 * np.geomspace(1, 100, 12)
        mags = np.array([np.linalg.norm(k1(x, t)) for t in ts])
        assert np.all(np.diff(mags) < 0)
        assert mags[-1] < 1e-2 * mags[0]

    def test_divergence_free_by_differences(self):
        x = np.array([[0.9, -0.4, 0.7], [1.5, 0.2, 0.1], [-0.3, 1.1, 0.8]])
        t = 0.6

        def residual(h):
            out = np.zeros((len(x), 3))
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                out += (k1(x + e, t)[:, j, :] - k1(x - e, t)[:, j, :]) / (2 * h)
            return np.abs(out).max()

        r1, r2 = residual(0.02), residual(0.01)
        assert r2 < r1
        assert 3.5 <= r1 / r2 <= 4.5


class TestK2:
    def test_antisymmetric(self, rng):
        x = rng.standard_normal((6, 3))
        assert np.allclose(k2(-x, 0.7), -k2(x, 0.7), rtol=1e-12, atol=1e-15)

    def test_finite_difference_order(self):
        x = np.array([[0.8, -0.5, 0.6], [1.2, 0.3, -0.9]])
        t = 0.9
        exact = k2(x, t)

        def err(h):
            fd = np.stack([(k1(x + h * np.eye(3)[l], t) - k1(x - h * np.eye(3)[l], t)) / (2 * h) for l in range(3)], axis=1)
            return np.abs(fd - exact).max()

        e1, e2 = err(0.02), err(0.01)
        assert 3.5 <= e1 / e2 <= 4.5

    def test_is_gradient_of_k1(self):
        x = np.array([0.4, 0.9, -1.1])
        g = k2(x, 0.5)
        for l in range(3):
            beta = tuple(int(i == l) for i in range(3))
            assert np.array_equal(g[l], k1_derivative(x, 0.5, beta))

    @pytest.mark.xfail(strict=True, reason="|x|^(n+1) K2 is still rising on |x| <= 8 at t = 1 (smooth core of size sqrt(t))")
    def test_weighted_dyadic_ratio_literal(self):
        chk = bound_check("K2", 0, 4.0, 1.0, radii=[1, 2, 4, 8], directions=DIRS)
        assert chk.dyadic_ratio <= 1.15

    def test_weighted_dyadic_ratio_far_field(self):
        chk = bound_check("K2", 0, 4.0, 1.0, radii=[8, 16, 32, 64], directions=DIRS)
        assert chk.dyadic_ratio <= 1.15


class TestBoundFamily:
    @pytest.mark.parametrize("k", [0, 1, 2])
    @pytest.mark.parametrize("frac", [0, 0.25, 0.5, 0.75, 1.0])
    def test_rescaling_invariance(self, k, frac):
        ratio = rescaling_ratio("K1", k, frac * (3 + k), 0.25, radii=[0.5, 1, 2], directions=DIRS[:8])
        assert abs(ratio - 1) <= 0.2

    def test_alpha_beta_total(self):
        chk = bound_check("K2", 1, 2.0, 1.0, radii=[1, 2], directions=DIRS[:4])
        assert chk.alpha + chk.beta == 3 + 1 + 1
        assert math.isfinite(chk.measured_sup)

    def test_csv_round_trip(self, tmp_path):
        rows = bound_table(kernels=("K1",), ks=(0,), times=[0.5], fractions=(0, 1.0))
        write_bound_csv(tmp_path / "b.csv", rows)
        assert read_bound_csv(tmp_path / "b.csv") == rows


class TestExteriorNorms:
    def test_infinity_norm_is_shell_sup(self):
        sup = kernel_exterior_lq("K1", 1.0, math.inf)
        at_one = float(kernel_jet("K1", np.array([[1.0, 0, 0]]), 1.0)[0])
        assert sup >= at_one
        assert sup == pytest.approx(at_one, rel=1e-6)

    def test_scaling_in_q(self):
        assert kernel_exterior_lq("K1", 1.0, 2) > 0
        assert kernel_exterior_lq("K2", 1.0, 4) > 0

    @pytest.mark.parametrize("q", [2.0, 4.0])
    def test_k2_slope(self, q):
        slope, _ = exterior_slope("K2", [0.25, 0.5, 1, 2, 4], q)
        assert abs(slope - (-(3 + 1 - 3 / q) / 2)) <= 0.1

    @pytest.mark.xfail(strict=True, reason="on t in [1/4, 4] the unit ball still cuts the Gaussian core; slope is -0.59")
    def test_k1_slope_stated_window(self):
        slope, _ = exterior_slope("K1", [0.25, 0.5, 1, 2, 4], 2.0)
        assert abs(slope - (-0.75)) <= 0.1

    @pytest.mark.parametrize("q", [2.0, 4.0])
    def test_k1_slope_asymptotic_window(self, q):
        slope, _ = exterior_slope("K1", [16, 32, 64, 128, 256], q)
        assert abs(slope - (-(3 - 3 / q) / 2)) <= 0.1

    def test_quadrature_tolerance_respected(self):
        a = kernel_exterior_lq("K1", 1.0, 2.0, quad=QuadSpec(tol=1e-8))
        b = kernel_exterior_lq("K1", 1.0, 2.0, quad=QuadSpec(tol=1e-12))
        assert a == pytest.approx(b, rel=1e-6)
