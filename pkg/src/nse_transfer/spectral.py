"""Periodic grids, spectral fields, Fourier multipliers and region norms.

The periodic box ``[-L/2, L/2)^n`` stands in for all of space.  Grid points
sit at ``(i - N/2) * h`` so the origin is a grid point and radial regions are
centred on it.

Two wavenumber families are kept:

* ``k``: the plain FFT wavenumbers, used for the heat multiplier
  ``exp(-t |k|^2)``;
* ``kd``: the same with the Nyquist entry zeroed, used for every odd
  derivative, the divergence and the Leray projection so that
  ``div(leray_project(u)) == 0`` holds coefficient by coefficient.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Grid",
    "ScalarField",
    "VectorField",
    "Region",
    "set_threads",
    "get_threads",
    "leray_project",
    "heat_semigroup",
    "derivative",
    "gradient",
    "divergence",
    "laplacian",
    "inverse_laplacian",
    "product",
    "lq_norm",
    "jet_norm",
    "spectral_l2_norm",
    "inner",
    "write_field",
    "read_field",
]

_THREADS = 1


def set_threads(n: int | None) -> None:
    """Set the worker count used by the FFT backend.

    Each 1-D transform is computed identically whatever the split, so
    results are bit-identical across thread counts.
    """
    global _THREADS
    _THREADS = max(1, int(n or 1))


def get_threads() -> int:
    return _THREADS


if os.environ.get("NSE_TRANSFER_THREADS"):
    try:
        set_threads(int(os.environ["NSE_TRANSFER_THREADS"]))
    except ValueError:
        pass


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid of ``N**n`` points on a box of side ``L``."""

    n: int = 3
    L: float = 2 * math.pi
    N: int = 32
    dealias: bool = True

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"dimension must be a positive integer, got {self.n}")
        if self.N < 8 or self.N % 2:
            raise ValueError(f"N must be even and >= 8, got {self.N}")
        if not self.L > 0:
            raise ValueError(f"box side must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def spectral_shape(self) -> tuple[int, ...]:
        return (self.N,) * (self.n - 1) + (self.N // 2 + 1,)

    @property
    def cell_volume(self) -> float:
        return self.h**self.n

    @property
    def axes(self) -> tuple[int, ...]:
        return tuple(range(-self.n, 0))

    def coords(self) -> np.ndarray:
        """1-D coordinates of the grid points along any axis."""
        return (np.arange(self.N) - self.N // 2) * self.h

    def mesh(self, axis: int) -> np.ndarray:
        """Broadcastable coordinate array along ``axis``."""
        shape = [1] * self.n
        shape[axis] = self.N
        return self.coords().reshape(shape)

    @cached_property
    def radius(self) -> np.ndarray:
        r2 = sum(self.mesh(a) ** 2 for a in range(self.n))
        return np.sqrt(r2)

    def points(self) -> np.ndarray:
        """All grid points as an array of shape ``shape + (n,)``."""
        return np.stack(np.broadcast_arrays(*[self.mesh(a) for a in range(self.n)]), axis=-1)

    def _wavenumber(self, axis: int, nyquist: bool) -> np.ndarray:
        if axis == self.n - 1:
            k = 2 * np.pi * sfft.rfftfreq(self.N, self.h)
        else:
            k = 2 * np.pi * sfft.fftfreq(self.N, self.h)
        if not nyquist:
            # index N/2 is the Nyquist entry in both the full and the half spectrum
            k = k.copy()
            k[self.N // 2] = 0.0
        shape = [1] * self.n
        shape[axis] = k.size
        return k.reshape(shape)

    @cached_property
    def k(self) -> tuple[np.ndarray, ...]:
        return tuple(self._wavenumber(a, True) for a in range(self.n))

    @cached_property
    def kd(self) -> tuple[np.ndarray, ...]:
        return tuple(self._wavenumber(a, False) for a in range(self.n))

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(ka**2 for ka in self.k)

    @cached_property
    def kd2(self) -> np.ndarray:
        return sum(ka**2 for ka in self.kd)

    @cached_property
    def kd2_inv(self) -> np.ndarray:
        """``1/|kd|^2`` with zero wherever ``kd`` vanishes (mean and pure Nyquist modes)."""
        out = np.zeros(self.spectral_shape)
        nz = self.kd2 > 0
        out[nz] = 1.0 / self.kd2[nz]
        return out

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        cut = self.N / 3.0
        m = np.ones(self.spectral_shape, dtype=bool)
        for a in range(self.n):
            idx = np.abs(self.k[a] * self.L / (2 * np.pi))
            m &= idx < cut
        return m

    def fft(self, values: np.ndarray) -> np.ndarray:
        return sfft.rfftn(values, axes=self.axes, workers=_THREADS)

    def ifft(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.irfftn(coeffs, s=self.shape, axes=self.axes, workers=_THREADS)

    def describe(self) -> dict:
        return {"n": self.n, "L": self.L, "N": self.N, "dealias": self.dealias}


class _Field:
    """Shared storage: physical samples and spectral coefficients, synced lazily."""

    ncomp: int = 1

    def __init__(self, grid: Grid, values=None, hat=None):
        if values is None and hat is None:
            raise ValueError("a field needs physical values or spectral coefficients")
        self.grid = grid
        self._values = None if values is None else np.asarray(values, dtype=float)
        self._hat = None if hat is None else np.asarray(hat, dtype=complex)
        expect = self._lead + grid.shape
        if self._values is not None and self._values.shape != expect:
            raise ValueError(f"expected physical shape {expect}, got {self._values.shape}")
        if self._hat is not None and self._hat.shape != self._lead + grid.spectral_shape:
            raise ValueError(
                f"expected spectral shape {self._lead + grid.spectral_shape}, got {self._hat.shape}"
            )

    @property
    def _lead(self) -> tuple[int, ...]:
        return ()

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            self._values = self.grid.ifft(self._hat)
        return self._values

    @property
    def hat(self) -> np.ndarray:
        if self._hat is None:
            self._hat = self.grid.fft(self._values)
        return self._hat

    def release(self, keep: str = "hat"):
        """Drop the cached representation other than ``keep`` (``"hat"`` or ``"values"``); returns self."""
        if keep == "hat":
            _ = self.hat
            self._values = None
        elif keep == "values":
            _ = self.values
            self._hat = None
        else:
            raise ValueError(f"keep must be 'hat' or 'values', got {keep!r}")
        return self

    @classmethod
    def zeros(cls, grid: Grid, **kw):
        lead = (grid.n,) if cls is VectorField else ()
        return cls(grid, values=np.zeros(lead + grid.shape), **kw)

    def _new(self, values=None, hat=None):
        return type(self)(self.grid, values=values, hat=hat)

    def __add__(self, other):
        self._check(other)
        if self._values is not None and other._values is not None:
            return self._new(values=self._values + other._values)
        return self._new(hat=self.hat + other.hat)

    def __sub__(self, other):
        self._check(other)
        if self._values is not None and other._values is not None:
            return self._new(values=self._values - other._values)
        return self._new(hat=self.hat - other.hat)

    def __neg__(self):
        if self._values is not None:
            return self._new(values=-self._values)
        return self._new(hat=-self._hat)

    def __mul__(self, c):
        if isinstance(c, _Field):
            raise TypeError("use product() for pointwise products of fields")
        c = float(c)
        if self._values is not None:
            return self._new(values=c * self._values)
        return self._new(hat=c * self._hat)

    __rmul__ = __mul__

    def _check(self, other):
        if type(other) is not type(self) or other.grid != self.grid:
            raise ValueError("fields must share type and grid")

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0


class ScalarField(_Field):
    pass


class VectorField(_Field):
    def __init__(self, grid: Grid, values=None, hat=None, solenoidal: bool = False):
        super().__init__(grid, values=values, hat=hat)
        self.solenoidal = solenoidal

    @property
    def _lead(self):
        return (self.grid.n,)

    def component(self, j: int) -> ScalarField:
        if self._values is not None:
            return ScalarField(self.grid, values=self._values[j])
        return ScalarField(self.grid, hat=self._hat[j])

    @classmethod
    def from_components(cls, comps, solenoidal=False) -> "VectorField":
        grid = comps[0].grid
        if all(c._values is not None for c in comps):
            return cls(grid, values=np.stack([c.values for c in comps]), solenoidal=solenoidal)
        return cls(grid, hat=np.stack([c.hat for c in comps]), solenoidal=solenoidal)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values**2, axis=0))

    def check_solenoidal(self, rtol: float = 1e-10) -> float:
        """Return ``max|div u| / (max|u| * 2 pi N / L)``; raise if it exceeds ``rtol``."""
        g = self.grid
        scale = self.max_abs() * 2 * np.pi * g.N / g.L
        if scale == 0:
            return 0.0
        rel = divergence(self).max_abs() / scale
        if rel > rtol:
            raise ValueError(f"field is not solenoidal: relative divergence {rel:.3e}")
        return rel


@dataclass(frozen=True)
class Region:
    """Origin-centred measurement region.

    ``kind`` is one of ``"ball"`` (radius ``outer``), ``"annulus"``
    (``inner <= |x| < outer``), ``"exterior"`` (``|x| >= inner``, clipped to
    the box) or ``"box"``.
    """

    kind: str
    outer: float = math.inf
    inner: float = 0.0

    @classmethod
    def ball(cls, R):
        return cls("ball", outer=float(R))

    @classmethod
    def annulus(cls, r_in, r_out):
        return cls("annulus", outer=float(r_out), inner=float(r_in))

    @classmethod
    def exterior(cls, R0):
        return cls("exterior", inner=float(R0))

    @classmethod
    def box(cls):
        return cls("box")

    def __post_init__(self):
        if self.kind not in ("ball", "annulus", "exterior", "box"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.inner < 0 or (self.kind == "annulus" and self.inner > self.outer):
            raise ValueError(f"bad region radii inner={self.inner}, outer={self.outer}")

    def validate(self, grid: Grid) -> None:
        radius = {"ball": self.outer, "annulus": self.outer, "exterior": self.inner}.get(self.kind, 0.0)
        if radius >= grid.L / 2:
            raise ValueError(f"region radius {radius} does not fit in a box of side {grid.L}")

    def mask(self, grid: Grid) -> np.ndarray:
        self.validate(grid)
        r = grid.radius
        if self.kind == "ball":
            return r < self.outer
        if self.kind == "annulus":
            return (r >= self.inner) & (r < self.outer)
        if self.kind == "exterior":
            return r >= self.inner
        return np.ones(grid.shape, dtype=bool)


# --- multipliers -----------------------------------------------------------


def leray_project(u: VectorField) -> VectorField:
    """Project onto divergence-free fields; the mean passes through unchanged."""
    g = u.grid
    uh = u.hat
    kdotu = sum(g.kd[j] * uh[j] for j in range(g.n))
    w = kdotu * g.kd2_inv
    out = np.stack([uh[j] - g.kd[j] * w for j in range(g.n)])
    return VectorField(g, hat=out, solenoidal=True)


def heat_semigroup(u, t: float):
    """Apply ``exp(t * Laplacian)`` spectrally."""
    if t < 0:
        raise ValueError(f"heat semigroup needs t >= 0, got {t}")
    if t == 0:
        return u
    mult = np.exp(-t * u.grid.k2)
    out = type(u)(u.grid, hat=u.hat * mult)
    if isinstance(u, VectorField):
        out.solenoidal = u.solenoidal
    return out


MAX_DERIVATIVE_ORDER = 4


def _derivative_multiplier(grid: Grid, index) -> np.ndarray | complex:
    mult = 1.0 + 0j
    for axis, order in enumerate(index):
        if order:
            mult = mult * (1j * grid.kd[axis]) ** order
    return mult


def derivative(u, index, max_order: int = MAX_DERIVATIVE_ORDER):
    """Spectral partial derivative ``d^index u``; ``index`` is a multi-index of length n."""
    index = tuple(int(i) for i in index)
    if len(index) != u.grid.n or min(index) < 0:
        raise ValueError(f"multi-index {index} does not match dimension {u.grid.n}")
    if sum(index) > max_order:
        raise ValueError(f"derivative order {sum(index)} exceeds configured maximum {max_order}")
    if sum(index) == 0:
        return u
    return type(u)(u.grid, hat=u.hat * _derivative_multiplier(u.grid, index))


def _unit(n, axis, order=1):
    idx = [0] * n
    idx[axis] = order
    return tuple(idx)


def gradient(s: ScalarField) -> VectorField:
    g = s.grid
    sh = s.hat
    return VectorField(g, hat=np.stack([1j * g.kd[a] * sh for a in range(g.n)]))


def divergence(u: VectorField) -> ScalarField:
    g = u.grid
    uh = u.hat
    return ScalarField(g, hat=sum(1j * g.kd[a] * uh[a] for a in range(g.n)))


def laplacian(u):
    return type(u)(u.grid, hat=-u.grid.k2 * u.hat)


def inverse_laplacian(s: ScalarField) -> ScalarField:
    """Solve ``Lap p = s`` with the zero-mean convention, using the same symbol as ``divergence``."""
    return ScalarField(s.grid, hat=-s.hat * s.grid.kd2_inv)


def product(a: np.ndarray, b: np.ndarray, grid: Grid, dealias: bool | None = None) -> np.ndarray:
    """Pointwise product of physical arrays, optionally with 2/3-rule dealiasing of the factors."""
    if dealias is None:
        dealias = grid.dealias
    if not dealias:
        return a * b
    m = grid.dealias_mask
    return grid.ifft(grid.fft(a) * m) * grid.ifft(grid.fft(b) * m)


# --- norms -----------------------------------------------------------------


def _pointwise_magnitude(u) -> np.ndarray:
    if isinstance(u, VectorField):
        return u.magnitude()
    if isinstance(u, ScalarField):
        return np.abs(u.values)
    return np.abs(np.asarray(u))


def _masked_lq(mag: np.ndarray, q: float, mask: np.ndarray, cell: float) -> float:
    vals = mag[mask]
    if vals.size == 0:
        return 0.0
    if math.isinf(q):
        return float(vals.max())
    if q == 2:
        return float(math.sqrt(np.sum(vals * vals) * cell))
    return float((np.sum(vals**q) * cell) ** (1.0 / q))


def lq_norm(u, q: float, region: Region, grid: Grid | None = None) -> float:
    """Midpoint-rule ``L^q`` norm of the pointwise magnitude over a sharply masked region."""
    if not (q >= 1):
        raise ValueError(f"q must lie in [1, inf], got {q}")
    grid = grid or u.grid
    return _masked_lq(_pointwise_magnitude(u), q, region.mask(grid), grid.cell_volume)


def _multi_indices(n: int, m: int):
    if m == 0:
        yield (0,) * n
        return
    if n == 1:
        yield (m,)
        return
    for first in range(m, -1, -1):
        for rest in _multi_indices(n - 1, m - first):
            yield (first,) + rest


def jet_magnitude(u, m: int) -> np.ndarray:
    """Pointwise Frobenius magnitude of the full order-``m`` derivative tensor.

    Each mixed partial is counted with its multinomial multiplicity so the
    result equals the norm over all ordered index tuples.
    """
    if m == 0:
        return _pointwise_magnitude(u)
    g = u.grid
    lead = (g.n,) if isinstance(u, VectorField) else ()
    acc = np.zeros(g.shape)
    uh = u.hat
    for idx in _multi_indices(g.n, m):
        mult = math.factorial(m) // math.prod(math.factorial(i) for i in idx)
        d = g.ifft(uh * _derivative_multiplier(g, idx))
        sq = d * d
        acc += mult * (np.sum(sq, axis=0) if lead else sq)
    return np.sqrt(acc)


def jet_norm(u, m: int, q: float, region: Region) -> float:
    """``L^q`` norm over ``region`` of ``|D^m u|``."""
    grid = u.grid
    return _masked_lq(jet_magnitude(u, m), q, region.mask(grid), grid.cell_volume)


def spectral_l2_norm(u) -> float:
    """Whole-box ``L^2`` norm from spectral coefficients (Parseval with half-spectrum weights)."""
    g = u.grid
    uh = u.hat
    w = np.full(g.spectral_shape[-1], 2.0)
    w[0] = 1.0
    if g.N % 2 == 0:
        w[-1] = 1.0
    s = np.sum(np.abs(uh) ** 2 * w)
    return float(math.sqrt(s * g.L**g.n / g.N ** (2 * g.n)))


def inner(u, v) -> float:
    """Discrete ``L^2`` inner product over the box."""
    return float(np.sum(u.values * v.values) * u.grid.cell_volume)


# --- binary dumps ----------------------------------------------------------

_MAGIC = b"NSEF"
_VERSION = 1


def write_field(path, u) -> None:
    """Write a field as an NSEF dump (little-endian, row-major)."""
    g = u.grid
    data = np.ascontiguousarray(u.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IB", _VERSION, g.n))
        fh.write(struct.pack(f"<{g.n}Q", *g.shape))
        fh.write(struct.pack("<d", g.L))
        fh.write(data.tobytes(order="C"))


def read_field(path, dealias: bool = True):
    """Read an NSEF dump; one component gives a ScalarField, n components a VectorField."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not an NSEF file")
    version, n = struct.unpack_from("<IB", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported NSEF version {version}")
    off = 9
    dims = struct.unpack_from(f"<{n}Q", raw, off)
    off += 8 * n
    (L,) = struct.unpack_from("<d", raw, off)
    off += 8
    if len(set(dims)) != 1:
        raise ValueError(f"{path}: only cubic grids are supported, got {dims}")
    grid = Grid(n=n, L=L, N=dims[0], dealias=dealias)
    arr = np.frombuffer(raw, dtype="<f8", offset=off).astype(float)
    per = math.prod(dims)
    if arr.size % per:
        raise ValueError(f"{path}: payload size is not a multiple of the grid size")
    ncomp = arr.size // per
    if ncomp == 1:
        return ScalarField(grid, values=arr.reshape(dims))
    if ncomp == n:
        return VectorField(grid, values=arr.reshape((n,) + tuple(dims)))
    raise ValueError(f"{path}: {ncomp} components do not match dimension {n}")
