import math

import numpy as np
import pytest
from scipy import integrate

from conftest import central_divergence, sphere_area
from nse_transfer.bogovskii import (
    BogovskiiDomain,
    BumpFunction,
    CompatibilityError,
    DomainError,
    ShellWeight,
    bogovskii_estimate_ratio,
    bogovskii_solve,
    bogovskii_solve_many,
    time_derivative_corrector,
)
from nse_transfer.data import divergence_datum, single_mode
from nse_transfer.spectral import Grid, ScalarField
from nse_transfer.truncation import Cutoff, corrector_datum

# the reference datum lives in the cutoff annulus of radius 2; the box is
# only slightly larger than the ball so the grid resolves it cheaply
L_REF = 4.5
R_REF = 2.0


def residual(v, f):
    """Relative L2 misfit of a second-order central-difference divergence."""
    d = central_divergence(v.values, f.grid.h) - f.values
    return float(np.linalg.norm(d) / np.linalg.norm(f.values))


@pytest.fixture(scope="module")
def g32():
    return Grid(3, L_REF, 32)


@pytest.fixture(scope="module")
def datum32(g32):
    return divergence_datum(g32, R_REF)


@pytest.fixture(scope="module")
def shell32(datum32):
    return bogovskii_solve(datum32, BogovskiiDomain.annulus(R_REF))


def second_datum(grid):
    """``-grad phi . u`` for a different solenoidal ``u``, mean removed."""
    u = single_mode(grid, mode=(0, 0, 1), direction=(1.0, 0.0, 0.0), amplitude=0.7)
    return corrector_datum(u, Cutoff(R_REF))[0]


class TestValidation:
    @pytest.mark.parametrize("mode", ["ball", "annulus"])
    def test_zero_datum(self, g32, mode):
        dom = BogovskiiDomain(mode, R_REF)
        v = bogovskii_solve(ScalarField(g32, values=np.zeros(g32.shape)), dom)
        assert v.max_abs() == 0.0

    def test_nonzero_mean_rejected(self, g32):
        f = ScalarField(g32, values=np.where(g32.radius < 1.0, 1.0, 0.0))
        with pytest.raises(CompatibilityError):
            bogovskii_solve(f, BogovskiiDomain.ball(R_REF))

    def test_outside_support_rejected(self, g32, datum32):
        with pytest.raises(DomainError):
            bogovskii_solve(datum32, BogovskiiDomain.ball(1.5))

    def test_annulus_rejects_inner_support(self, g32):
        f = ScalarField(g32, values=np.where(g32.radius < 0.5, g32.mesh(0) + 0 * g32.radius, 0.0))
        with pytest.raises(DomainError):
            bogovskii_solve(f, BogovskiiDomain.annulus(R_REF))

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            BogovskiiDomain("cube", 2.0)

    def test_ratio_rejects_q_infinity(self, datum32):
        with pytest.raises(ValueError):
            bogovskii_estimate_ratio(datum32, BogovskiiDomain.annulus(R_REF), q=math.inf)


class TestWeights:
    def test_bump_unit_integral(self):
        b = BumpFunction((0.0, 0.0, 0.0), 1.3)
        radial, _ = integrate.quad(lambda r: b(np.array([r, 0.0, 0.0])) * r * r, 0, 1.3, epsabs=0, epsrel=1e-13)
        assert sphere_area(3) * radial == pytest.approx(1.0, abs=1e-10)

    def test_shell_weight_unit_mass(self):
        w = ShellWeight(3.0)
        radial, _ = integrate.quad(lambda s: float(w(s)) * s * s, 2.0, 3.0, epsabs=0, epsrel=1e-13)
        assert radial == pytest.approx(1.0, abs=1e-10)
        assert float(w.mass(3.0)) == pytest.approx(1.0, abs=1e-10)


class TestShell:
    def test_residual_at_48(self):
        g = Grid(3, L_REF, 48)
        f = divergence_datum(g, R_REF)
        assert residual(bogovskii_solve(f, BogovskiiDomain.annulus(R_REF)), f) <= 0.05

    def test_residual_decreases(self, datum32, shell32):
        g24 = Grid(3, L_REF, 24)
        f24 = divergence_datum(g24, R_REF)
        coarse = residual(bogovskii_solve(f24, BogovskiiDomain.annulus(R_REF)), f24)
        assert residual(shell32, datum32) < coarse

    def test_vanishes_outside(self, g32, shell32):
        mag = np.abs(shell32.values).max(axis=0)
        r = g32.radius
        assert mag[r > R_REF].max() == 0.0
        assert mag[r < R_REF - 1].max() == 0.0

    def test_inner_ball_negligible(self, g32, shell32):
        mag = np.abs(shell32.values).max(axis=0)
        r = g32.radius
        ann = (r >= R_REF - 1) & (r <= R_REF)
        assert mag[r < R_REF - 1.5].max() <= 1e-6 * mag[ann].max()

    def test_linearity(self, g32, datum32):
        g = second_datum(g32)
        dom = BogovskiiDomain.annulus(R_REF)
        a, b = 0.3, -1.7
        combo = ScalarField(g32, values=a * datum32.values + b * g.values)
        va, vb, vc = bogovskii_solve_many([datum32, g, combo], dom)
        expect = a * va.values + b * vb.values
        assert np.max(np.abs(vc.values - expect)) <= 1e-8 * np.max(np.abs(expect))

    def test_ratio_scale_invariant(self, datum32):
        dom = BogovskiiDomain.annulus(R_REF)
        r1 = bogovskii_estimate_ratio(datum32, dom)
        r2 = bogovskii_estimate_ratio(ScalarField(datum32.grid, values=1e-3 * datum32.values), dom)
        assert r2 == pytest.approx(r1, rel=1e-8)

    def test_ratio_golden(self, datum32):
        # recorded at N=32 with the default quadrature
        assert bogovskii_estimate_ratio(datum32, BogovskiiDomain.annulus(R_REF)) == pytest.approx(
            3.1406612553413122, rel=1e-9)

    def test_ratio_stable_in_N(self, datum32):
        dom = BogovskiiDomain.annulus(R_REF)
        g48 = Grid(3, L_REF, 48)
        ratios = [bogovskii_estimate_ratio(datum32, dom), bogovskii_estimate_ratio(divergence_datum(g48, R_REF), dom)]
        assert max(ratios) / min(ratios) - 1 <= 0.10


class TestBall:
    def test_residual_and_support_at_24(self):
        g = Grid(3, L_REF, 24)
        f = divergence_datum(g, R_REF)
        v = bogovskii_solve(f, BogovskiiDomain.ball(R_REF))
        assert np.abs(v.values).max(axis=0)[g.radius > R_REF].max() == 0.0
        assert residual(v, f) <= 0.2

    def test_agrees_with_shell_on_divergence(self, g32, datum32, shell32):
        # different right inverses, same divergence up to discretisation error
        ball = bogovskii_solve(datum32, BogovskiiDomain.ball(R_REF))
        d_ball = central_divergence(ball.values, g32.h)
        d_shell = central_divergence(shell32.values, g32.h)
        assert np.linalg.norm(d_ball - d_shell) <= 0.25 * np.linalg.norm(datum32.values)


class TestTimeDerivative:
    def test_static_datum_has_zero_derivative(self, g32):
        out = time_derivative_corrector([ScalarField(g32, values=np.zeros(g32.shape))], BogovskiiDomain.annulus(R_REF))
        assert out[0].max_abs() == 0.0

    def test_exponential_datum(self, datum32, shell32):
        # f(t) = exp(lam t) f0 gives d/dt B f = lam B f
        lam = -2.5
        df = ScalarField(datum32.grid, values=lam * datum32.values)
        out = time_derivative_corrector([df], BogovskiiDomain.annulus(R_REF))[0]
        assert np.max(np.abs(out.values - lam * shell32.values)) <= 1e-8 * abs(lam) * shell32.max_abs()

    def test_difference_quotient(self, g32, datum32):
        # B commutes with d/dt: compare against a difference quotient of the solution
        g = second_datum(g32)
        dom = BogovskiiDomain.annulus(R_REF)

        def f(t):
            return ScalarField(g32, values=math.cos(t) * datum32.values + t * t * g.values)

        t, dt = 0.4, 1e-4
        hi, lo = bogovskii_solve_many([f(t + dt), f(t - dt)], dom)
        quotient = (hi.values - lo.values) / (2 * dt)
        df = ScalarField(g32, values=-math.sin(t) * datum32.values + 2 * t * g.values)
        out = time_derivative_corrector([df], dom)[0].values
        assert np.max(np.abs(out - quotient)) <= 1e-6 * np.max(np.abs(out))
