"""
Periodic fields on the unit torus [0,1]^n

Grid values are primary; spectral views are computed on demand. Fields may
carry leading batch axes (a time family is a field with a leading time axis),
and every spectral operator acts on the trailing n spatial axes.
"""

import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import Polynomial
from scipy.integrate import trapezoid

from .constants import MAX_DIMENSION, MIN_POINTS_PER_AXIS, TOL_ALGEBRAIC
from .errors import GridError

logger = logging.getLogger('wildeuler.torus_fields')

__all__ = [
    'GridSpec', 'ScalarGridField', 'VectorGridField', 'SymMatrixGridField',
    'SpectralCoeffs', 'TimeBump', 'TimeRamp', 'TrigPolynomial', 'TestFunction',
    'forward_transform', 'inverse_transform', 'spectral_gradient',
    'spectral_divergence', 'spectral_laplacian', 'norms', 'spectral_l2',
    'weak_pairing', 'mass_pairing', 'standard_test_basis',
    'space_time_integral', 'sym_pairs', 'sym_to_full', 'full_to_sym',
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid on [0,1]^n with a uniform time step"""
    n: int = 2
    N: int = 64
    dt: float = 1.0 / 64
    T: float = 1.0

    def __post_init__(self):
        if not 2 <= self.n <= MAX_DIMENSION:
            raise GridError(f"Spatial dimension must be 2 or 3, got {self.n}")
        if self.N < MIN_POINTS_PER_AXIS or self.N & (self.N - 1):
            raise GridError(f"Points per axis must be a power of two >= {MIN_POINTS_PER_AXIS}, got {self.N}")
        if not self.T > 0 or not self.dt > 0:
            raise GridError("Time horizon and time step must be positive")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise GridError(f"Time step {self.dt} does not divide the horizon {self.T}")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.N,) * self.n

    @property
    def steps(self) -> int:
        """Number of time steps across the horizon T"""
        return int(round(self.T / self.dt))

    def time_samples(self, first: int, last: int) -> np.ndarray:
        """Times dt*i for i = first..last inclusive"""
        return self.dt * np.arange(first, last + 1, dtype=float)

    def coordinates(self) -> Tuple[np.ndarray, ...]:
        return _coordinates(self.n, self.N)

    def wavenumbers(self) -> np.ndarray:
        """Integer wavevectors, shape (n, N, ..., N)"""
        return _wavenumbers(self.n, self.N)


@lru_cache(maxsize=8)
def _coordinates(n: int, N: int) -> Tuple[np.ndarray, ...]:
    axis = np.arange(N) / N
    grids = np.meshgrid(*([axis] * n), indexing='ij')
    for g in grids:
        g.setflags(write=False)
    return tuple(grids)


@lru_cache(maxsize=8)
def _wavenumbers(n: int, N: int) -> np.ndarray:
    axis = np.rint(np.fft.fftfreq(N, d=1.0 / N)).astype(int)
    k = np.stack(np.meshgrid(*([axis] * n), indexing='ij'))
    k.setflags(write=False)
    return k


@lru_cache(maxsize=8)
def _derivative_symbols(n: int, N: int) -> np.ndarray:
    """2*pi*i*k with every Nyquist component zeroed, shape (n, N, ..., N)"""
    k = _wavenumbers(n, N)
    symbols = 2j * np.pi * k.astype(float)
    symbols[k == -N // 2] = 0.0
    symbols.setflags(write=False)
    return symbols


def _spatial_axes(n: int) -> Tuple[int, ...]:
    return tuple(range(-n, 0))


def _fft(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.fft.fftn(values, axes=_spatial_axes(grid.n)) / grid.N ** grid.n


def _ifft(coeffs: np.ndarray, grid: GridSpec) -> np.ndarray:
    return np.real(np.fft.ifftn(coeffs * grid.N ** grid.n, axes=_spatial_axes(grid.n)))


# Symmetric storage: upper triangle, row-major

@lru_cache(maxsize=4)
def sym_pairs(n: int) -> Tuple[Tuple[int, int], ...]:
    return tuple((i, j) for i in range(n) for j in range(i, n))


def sym_to_full(values: np.ndarray, n: int) -> np.ndarray:
    """(..., p, *space) symmetric storage -> (..., n, n, *space)"""
    comp_axis = values.ndim - n - 1
    lead = values.shape[:comp_axis]
    space = values.shape[comp_axis + 1:]
    full = np.empty(lead + (n, n) + space, dtype=values.dtype)
    for idx, (i, j) in enumerate(sym_pairs(n)):
        component = values[(Ellipsis, idx) + (slice(None),) * n]
        full[(Ellipsis, i, j) + (slice(None),) * n] = component
        full[(Ellipsis, j, i) + (slice(None),) * n] = component
    return full


def full_to_sym(full: np.ndarray, n: int) -> np.ndarray:
    """(..., n, n, *space) -> symmetric storage, averaging the off-diagonal pair"""
    parts = []
    for i, j in sym_pairs(n):
        a = full[(Ellipsis, i, j) + (slice(None),) * n]
        b = full[(Ellipsis, j, i) + (slice(None),) * n]
        parts.append(a if i == j else 0.5 * (a + b))
    return np.stack(parts, axis=full.ndim - n - 2)


def _check_values(grid: GridSpec, values: np.ndarray, components: Optional[int], kind: str):
    expected = grid.shape if components is None else (components,) + grid.shape
    if values.shape[values.ndim - len(expected):] != expected:
        raise GridError(f"{kind} values of shape {values.shape} do not match grid {grid.shape}")
    if not np.all(np.isfinite(values)):
        raise GridError(f"{kind} contains non-finite values")


@dataclass(frozen=True, eq=False)
class ScalarGridField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        _check_values(self.grid, self.values, None, 'ScalarGridField')

    @cached_property
    def spectrum(self) -> np.ndarray:
        return _fft(self.values, self.grid)


@dataclass(frozen=True, eq=False)
class VectorGridField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        _check_values(self.grid, self.values, self.grid.n, 'VectorGridField')

    @cached_property
    def spectrum(self) -> np.ndarray:
        return _fft(self.values, self.grid)


@dataclass(frozen=True, eq=False)
class SymMatrixGridField:
    grid: GridSpec
    values: np.ndarray
    trace_free: bool = True

    def __post_init__(self):
        n = self.grid.n
        _check_values(self.grid, self.values, n * (n + 1) // 2, 'SymMatrixGridField')
        if self.trace_free:
            scale = max(1.0, float(np.max(np.abs(self.values))) if self.values.size else 1.0)
            trace = self.trace()
            if trace.size and np.max(np.abs(trace)) > TOL_ALGEBRAIC * scale:
                raise GridError(f"Trace-free field has trace {np.max(np.abs(trace)):.3e}")

    def trace(self) -> np.ndarray:
        n = self.grid.n
        diag = [idx for idx, (i, j) in enumerate(sym_pairs(n)) if i == j]
        axis = self.values.ndim - n - 1
        return np.take(self.values, diag, axis=axis).sum(axis=axis)

    @cached_property
    def full(self) -> np.ndarray:
        return sym_to_full(self.values, self.grid.n)

    @cached_property
    def spectrum(self) -> np.ndarray:
        return _fft(self.values, self.grid)


GridField = Union[ScalarGridField, VectorGridField, SymMatrixGridField]


@dataclass(frozen=True, eq=False)
class SpectralCoeffs:
    """Fourier coefficients c(k) of f(x) = sum_k c(k) exp(2 pi i k.x)"""
    grid: GridSpec
    coeffs: np.ndarray
    zero_mean: bool = False

    def coefficient(self, k: Sequence[int]) -> complex:
        half = self.grid.N // 2
        if len(k) != self.grid.n or any(not -half <= int(ki) < half for ki in k):
            raise GridError(f"Wavevector {tuple(k)} outside the grid band")
        index = tuple(int(ki) % self.grid.N for ki in k)
        return complex(self.coeffs[(Ellipsis,) + index])

    def is_hermitian(self, tol: float = TOL_ALGEBRAIC) -> bool:
        flipped = np.conj(np.roll(np.flip(self.coeffs, axis=_spatial_axes(self.grid.n)),
                                  1, axis=_spatial_axes(self.grid.n)))
        scale = max(1.0, float(np.max(np.abs(self.coeffs))))
        return bool(np.max(np.abs(self.coeffs - flipped)) <= tol * scale)


def forward_transform(f: GridField) -> SpectralCoeffs:
    coeffs = f.spectrum
    mean = np.abs(coeffs[(Ellipsis,) + (0,) * f.grid.n])
    return SpectralCoeffs(f.grid, coeffs, zero_mean=bool(np.all(mean <= TOL_ALGEBRAIC)))


def inverse_transform(c: SpectralCoeffs) -> ScalarGridField:
    return ScalarGridField(c.grid, _ifft(c.coeffs, c.grid))


def gradient_values(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """(..., *space) -> (..., n, *space)"""
    symbols = _derivative_symbols(grid.n, grid.N)
    fhat = np.expand_dims(_fft(values, grid), axis=values.ndim - grid.n)
    return _ifft(fhat * symbols, grid)


def divergence_values(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Contract the last component axis with the gradient: (..., n, *space) -> (..., *space)"""
    symbols = _derivative_symbols(grid.n, grid.N)
    vhat = _fft(values, grid)
    return _ifft(np.sum(vhat * symbols, axis=values.ndim - grid.n - 1), grid)


def spectral_gradient(f: ScalarGridField) -> VectorGridField:
    return VectorGridField(f.grid, gradient_values(f.values, f.grid))


def spectral_divergence(v: Union[VectorGridField, SymMatrixGridField]):
    """Divergence of a vector field, or row-wise divergence of a symmetric matrix field"""
    if isinstance(v, SymMatrixGridField):
        return VectorGridField(v.grid, divergence_values(v.full, v.grid))
    if isinstance(v, VectorGridField):
        return ScalarGridField(v.grid, divergence_values(v.values, v.grid))
    raise GridError(f"Cannot take the divergence of {type(v).__name__}")


def spectral_laplacian(f: ScalarGridField) -> ScalarGridField:
    symbols = _derivative_symbols(f.grid.n, f.grid.N)
    return ScalarGridField(f.grid, _ifft(f.spectrum * np.sum(symbols ** 2, axis=0), f.grid))


def _magnitude(f: GridField) -> np.ndarray:
    n = f.grid.n
    if isinstance(f, ScalarGridField):
        return np.abs(f.values)
    if isinstance(f, VectorGridField):
        return np.sqrt(np.sum(f.values ** 2, axis=f.values.ndim - n - 1))
    full = f.full
    return np.sqrt(np.sum(full ** 2, axis=(full.ndim - n - 2, full.ndim - n - 1)))


def norms(f: GridField) -> Dict[str, float]:
    """Sup norm and L2 norm (grid quadrature over the unit cube) of the pointwise magnitude"""
    mag = _magnitude(f)
    if mag.size == 0:
        return {'sup': 0.0, 'L2': 0.0}
    return {'sup': float(np.max(mag)), 'L2': float(np.sqrt(np.mean(mag ** 2)))}


def spectral_l2(c: SpectralCoeffs) -> float:
    """L2 norm from coefficients (Parseval)"""
    return float(np.sqrt(np.sum(np.abs(c.coeffs) ** 2)))


def space_time_integral(values: np.ndarray, times: np.ndarray) -> float:
    """Exact grid mean in space, trapezoid in time; values of shape (Nt, *space)"""
    return float(trapezoid(values.reshape(values.shape[0], -1).mean(axis=1), times))


@dataclass(frozen=True)
class TimeBump:
    """Raised-cosine bump ((1 + cos(pi s))/2)^3, s = (t - center)/half_width

    C^5 with support [center - half_width, center + half_width]. When both
    ends are grid times the bump, its square and its derivative are
    trigonometric polynomials over the support, so the trapezoid rule
    integrates them exactly.
    """
    center: float
    half_width: float

    def _s(self, t):
        return (np.asarray(t, dtype=float) - self.center) / self.half_width

    def value(self, t) -> np.ndarray:
        s = self._s(t)
        out = np.zeros_like(s)
        inside = np.abs(s) < 1.0
        out[inside] = (0.5 * (1.0 + np.cos(np.pi * s[inside]))) ** 3
        return out

    def derivative(self, t) -> np.ndarray:
        s = self._s(t)
        out = np.zeros_like(s)
        inside = np.abs(s) < 1.0
        si = s[inside]
        out[inside] = (-1.5 * np.pi * (0.5 * (1.0 + np.cos(np.pi * si))) ** 2
                       * np.sin(np.pi * si) / self.half_width)
        return out


# 1 at 0 and 0 at 1, first three derivatives zero at both ends
SMOOTH_RAMP = Polynomial([1.0, 0.0, 0.0, 0.0, -35.0, 84.0, -70.0, 20.0])


@dataclass(frozen=True)
class TimeRamp:
    """Profile equal to 1 at start and falling to 0 at start + width

    Uses 1 - 35s^4 + 84s^5 - 70s^6 + 20s^7 on s = (t - start)/width, whose
    first three derivatives vanish at both ends. Only t >= start is meant to
    be sampled. With the ends on grid times the trapezoid rule misses the
    integral of a smooth multiple of its derivative by O((dt/width)^4).
    """
    start: float
    width: float

    def _s(self, t):
        return np.clip((np.asarray(t, dtype=float) - self.start) / self.width, 0.0, 1.0)

    def value(self, t) -> np.ndarray:
        return SMOOTH_RAMP(self._s(t))

    def derivative(self, t) -> np.ndarray:
        return SMOOTH_RAMP.deriv()(self._s(t)) / self.width


@dataclass(frozen=True, eq=False)
class TrigPolynomial:
    """sum_j a_j cos(2 pi k_j.x) + b_j sin(2 pi k_j.x) with C components"""
    wavevectors: np.ndarray  # (J, n) integers
    cos_coeffs: np.ndarray   # (J, C)
    sin_coeffs: np.ndarray   # (J, C)

    @property
    def components(self) -> int:
        return self.cos_coeffs.shape[1]

    def _phases(self, grid: GridSpec) -> np.ndarray:
        x = np.stack(grid.coordinates())
        return 2.0 * np.pi * np.tensordot(self.wavevectors.astype(float), x, axes=(1, 0))

    def evaluate(self, grid: GridSpec) -> np.ndarray:
        """(C, *space)"""
        phase = self._phases(grid)
        return (np.tensordot(self.cos_coeffs, np.cos(phase), axes=(0, 0))
                + np.tensordot(self.sin_coeffs, np.sin(phase), axes=(0, 0)))

    def gradient(self, grid: GridSpec) -> np.ndarray:
        """(C, n, *space)"""
        phase = self._phases(grid)
        cos, sin = np.cos(phase), np.sin(phase)
        out = []
        for axis in range(grid.n):
            kl = 2.0 * np.pi * self.wavevectors[:, axis].astype(float)
            out.append(np.tensordot(-kl[:, None] * self.cos_coeffs, sin, axes=(0, 0))
                       + np.tensordot(kl[:, None] * self.sin_coeffs, cos, axes=(0, 0)))
        return np.stack(out, axis=1)


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Trigonometric polynomial in x times a time bump or an anchored ramp"""
    __test__ = False

    spatial: TrigPolynomial
    profile: Union[TimeBump, TimeRamp]

    def values(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        """(Nt, C, *space)"""
        theta = self.profile.value(times)
        return np.multiply.outer(theta, self.spatial.evaluate(grid))

    def time_derivative(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        dtheta = self.profile.derivative(times)
        return np.multiply.outer(dtheta, self.spatial.evaluate(grid))

    def gradient(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        """(Nt, C, n, *space)"""
        theta = self.profile.value(times)
        return np.multiply.outer(theta, self.spatial.gradient(grid))


def _as_family(field, grid_kind: str) -> Tuple[GridSpec, np.ndarray]:
    if isinstance(field, (ScalarGridField, VectorGridField, SymMatrixGridField)):
        return field.grid, field.values
    raise GridError(f"{grid_kind} must be a grid field, got {type(field).__name__}")


def weak_pairing(field: VectorGridField, times: np.ndarray, test: TestFunction,
                 stress: Optional[np.ndarray] = None) -> float:
    """Integral of m.dt(phi) + stress:grad(phi) over Q x [t0, t1]

    `field` is a time family of shape (Nt, n, *space); `stress` a full
    matrix family of shape (Nt, n, n, *space), row index contracted with
    the test component.
    """
    grid, m = _as_family(field, 'field')
    n = grid.n
    times = np.asarray(times, dtype=float)
    if m.ndim != n + 2 or m.shape[0] != times.shape[0]:
        raise GridError(f"Field family of shape {m.shape} does not match {times.shape[0]} time samples")
    if test.spatial.components != n:
        raise GridError("Momentum pairing needs a vector test function")

    integrand = np.sum(m * test.time_derivative(grid, times), axis=1)
    if stress is not None:
        if stress.shape != (m.shape[0], n, n) + grid.shape:
            raise GridError(f"Stress family of shape {stress.shape} does not match the grid")
        integrand = integrand + np.sum(stress * test.gradient(grid, times), axis=(1, 2))
    return space_time_integral(integrand, times)


def mass_pairing(rho: ScalarGridField, m: VectorGridField, times: np.ndarray,
                 test: TestFunction) -> float:
    """Integral of rho dt(psi) + m.grad(psi) over Q x [t0, t1] for a scalar test"""
    grid, m_values = _as_family(m, 'm')
    if rho.grid != grid:
        raise GridError("Density and momentum live on different grids")
    if test.spatial.components != 1:
        raise GridError("Mass pairing needs a scalar test function")
    times = np.asarray(times, dtype=float)
    if m_values.shape[0] != times.shape[0]:
        raise GridError("Momentum family does not match the time samples")

    dpsi = test.time_derivative(grid, times)[:, 0]
    grad = test.gradient(grid, times)[:, 0]
    integrand = rho.values * dpsi + np.sum(m_values * grad, axis=1)
    return space_time_integral(integrand, times)


def _random_wavevectors(rng: np.random.Generator, n: int, count: int, max_mode: int) -> np.ndarray:
    out = []
    while len(out) < count:
        k = rng.integers(-max_mode, max_mode + 1, size=n)
        if np.any(k != 0):
            out.append(k)
    return np.array(out, dtype=int)


def random_time_bump(rng: np.random.Generator, grid: GridSpec, t0: float, t1: float) -> TimeBump:
    """Bump centred on a grid time, both support ends on grid times inside [t0, t1]"""
    span = t1 - t0
    center = t0 + span * rng.uniform(0.3, 0.7)
    center = grid.dt * round(center / grid.dt)
    room = min(center - t0, t1 - center)
    if room < 4 * grid.dt - 1e-12:
        raise GridError(f"Time window [{t0}, {t1}] too short for a test bump")
    return TimeBump(center, grid.dt * max(4, int(room * rng.uniform(0.6, 0.95) / grid.dt)))


def anchored_time_ramp(rng: np.random.Generator, grid: GridSpec, t0: float, t1: float) -> TimeRamp:
    """Ramp from 1 at t0 down to 0 at a grid time inside (t0, t1]"""
    room = t1 - t0
    if room < 4 * grid.dt - 1e-12:
        raise GridError(f"Time window [{t0}, {t1}] too short for a test ramp")
    return TimeRamp(t0, grid.dt * max(4, int(room * rng.uniform(0.4, 0.95) / grid.dt)))


def standard_test_basis(grid: GridSpec, t0: float, t1: float, count: int, seed: int,
                        components: Optional[int] = None, max_mode: int = 2,
                        anchored: bool = False) -> List[TestFunction]:
    """Seeded low-mode test functions; vector-valued unless components says otherwise

    Anchored tests peak at t0 instead of vanishing there and are meant for
    pairings that carry an initial-data term at t0.
    """
    bump = anchored_time_ramp if anchored else random_time_bump
    rng = np.random.default_rng(seed)
    components = grid.n if components is None else components
    tests = []
    for _ in range(count):
        terms = int(rng.integers(1, 4))
        spatial = TrigPolynomial(
            wavevectors=_random_wavevectors(rng, grid.n, terms, max_mode),
            cos_coeffs=rng.standard_normal((terms, components)),
            sin_coeffs=rng.standard_normal((terms, components)),
        )
        tests.append(TestFunction(spatial, bump(rng, grid, t0, t1)))
    return tests
