"""
Stationary subsolution from the density, time-family states and the flat
subsolution built by localized improvement around t = 0
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .admissibility import ChiProfile, PressureLaw
from .constants import (
    MIN_BALL_CELLS, STANDARD_TEST_COUNT, STANDARD_TEST_SEED, TOL_DIVERGENCE,
    TOL_GEOMETRIC, TOL_SUBSOLUTION, TOL_WEAK,
)
from .errors import InvariantError, SubsolutionError
from .relaxation_geometry import e_field
from .torus_fields import (
    GridSpec, ScalarGridField, SymMatrixGridField, VectorGridField,
    _fft, _ifft, divergence_values, gradient_values,
    mass_pairing, space_time_integral, standard_test_basis, sym_pairs,
    sym_to_full, weak_pairing,
)

logger = logging.getLogger('wildeuler.subsolution')


def density_field(grid: GridSpec, mean: float, modes: Sequence[Dict] = ()) -> ScalarGridField:
    """mean + sum of cos/sin Fourier modes; modes are {'k': [...], 'cos': a, 'sin': b}"""
    x = np.stack(grid.coordinates())
    values = np.full(grid.shape, float(mean))
    for mode in modes:
        k = np.asarray(mode['k'], dtype=float)
        if k.shape != (grid.n,):
            raise SubsolutionError(f"Density mode {mode['k']} does not match dimension {grid.n}")
        phase = 2.0 * np.pi * np.tensordot(k, x, axes=(0, 0))
        values += float(mode.get('cos', 0.0)) * np.cos(phase) + float(mode.get('sin', 0.0)) * np.sin(phase)
    if np.min(values) <= 0.0:
        raise SubsolutionError(f"Density must be positive, minimum is {np.min(values):.3e}")
    return ScalarGridField(grid, values)


def pressure_field(rho0: ScalarGridField, law: PressureLaw) -> ScalarGridField:
    values = np.asarray(law.pressure(rho0.values), dtype=float)
    if not np.all(np.isfinite(values)):
        raise SubsolutionError("Pressure law produced non-finite values")
    return ScalarGridField(rho0.grid, values)


def _points_matrix(full: np.ndarray, n: int) -> np.ndarray:
    """(..., n, n, *space) -> (..., *space, n, n)"""
    lead = full.ndim - n - 2
    return np.moveaxis(np.moveaxis(full, lead, -1), lead, -1)


def _points_vector(values: np.ndarray, n: int) -> np.ndarray:
    """(..., n, *space) -> (..., *space, n)"""
    return np.moveaxis(values, values.ndim - n - 1, -1)


def choose_chi(lambda_tilde: float, margin: float, T: float, n: int = 2, floor: float = 1.0) -> ChiProfile:
    """Constant chi = margin * max(n * lambda_tilde, floor) on [0, T]"""
    if not margin > 1.0:
        raise SubsolutionError(f"chi margin must exceed 1, got {margin}")
    if not floor > 0.0:
        raise SubsolutionError(f"chi floor must be positive, got {floor}")
    return ChiProfile(margin * max(n * lambda_tilde, floor), 0.0, 0.0, T)


@dataclass(frozen=True, eq=False)
class StationarySubsolution:
    rho0: ScalarGridField
    pressure: ScalarGridField
    U_tilde: SymMatrixGridField
    lambda_tilde: float
    chi_profile: ChiProfile
    sign: int
    residual: float

    @property
    def grid(self) -> GridSpec:
        return self.rho0.grid

    def q_tilde(self, t) -> np.ndarray:
        """p(rho0(x)) + chi(t)/n, shape (Nt, *space) for an array of times"""
        chi = np.atleast_1d(self.chi_profile(np.asarray(t, dtype=float)))
        return self.pressure.values[None] + (chi / self.grid.n).reshape((-1,) + (1,) * self.grid.n)

    def to_dict(self) -> Dict:
        return {'sign': self.sign, 'lambda_tilde': self.lambda_tilde,
                'chi_tilde': self.chi_profile.chi0, 'residual': self.residual}


def _stationary_symbol(grid: GridSpec) -> np.ndarray:
    """(n k_i k_j - delta_ij |k|^2) / ((n-1)|k|^2) in symmetric storage, zero at k = 0 and Nyquist"""
    n = grid.n
    k = grid.wavenumbers().astype(float)
    k_sq = np.sum(k ** 2, axis=0)
    dead = (k_sq == 0) | np.any(grid.wavenumbers() == -grid.N // 2, axis=0)
    safe = np.where(dead, 1.0, k_sq)
    parts = []
    for i, j in sym_pairs(n):
        entry = n * k[i] * k[j] - (k_sq if i == j else 0.0)
        parts.append(np.where(dead, 0.0, entry / ((n - 1) * safe)))
    return np.stack(parts)


def _stationary_residual(U: np.ndarray, p: np.ndarray, grid: GridSpec) -> float:
    full = sym_to_full(U, grid.n)
    residual = divergence_values(full, grid) + gradient_values(p, grid)
    return float(np.max(np.sqrt(np.sum(residual ** 2, axis=0))))


def build_stationary_subsolution(rho0: ScalarGridField, law: PressureLaw, chi_margin: float = 1.5,
                                 chi_floor: float = 1.0, T: float = 1.0) -> StationarySubsolution:
    """Trace-free U_tilde with div U_tilde + grad p(rho0) = 0 from the Fourier symbol

    Both signs of the symbol are tried; the one with the smaller residual is kept.
    """
    if np.min(rho0.values) <= 0.0:
        raise SubsolutionError(f"Density must be positive, minimum is {np.min(rho0.values):.3e}")
    grid = rho0.grid
    pressure = pressure_field(rho0, law)
    p = pressure.values
    p_hat = _fft(p, grid)
    symbol = _stationary_symbol(grid)

    best = None
    for sign in (1, -1):
        U = _ifft(sign * symbol * p_hat[None], grid)
        residual = _stationary_residual(U, p, grid)
        logger.debug(f"Fourier sign {sign:+d}: residual {residual:.3e}")
        if best is None or residual < best[2]:
            best = (sign, U, residual)
    sign, U, residual = best
    if residual > TOL_SUBSOLUTION:
        raise SubsolutionError(f"No sign branch solves div U + grad q = 0: residual {residual:.3e}")

    # Remove round-off trace so the field is trace-free to machine precision
    diag = [index for index, (i, j) in enumerate(sym_pairs(grid.n)) if i == j]
    U[diag] -= np.sum(U[diag], axis=0) / grid.n
    U_tilde = SymMatrixGridField(grid, U)

    lambda_tilde = float(np.max(e_field(rho0.values, np.zeros(grid.shape + (grid.n,)),
                                        _points_matrix(U_tilde.full, grid.n))))
    lambda_tilde = max(lambda_tilde, 0.0)
    profile = choose_chi(lambda_tilde, chi_margin, T, grid.n, chi_floor)
    logger.info(f"Stationary subsolution: sign {sign:+d}, lambda {lambda_tilde:.6e}, chi {profile.chi0:.6e}")
    return StationarySubsolution(rho0, pressure, U_tilde, lambda_tilde, profile, sign, residual)


@dataclass(frozen=True, eq=False)
class SubsolutionState:
    """Time family (m, U) with chi samples; q0 = p(rho0) + chi/n"""
    grid: GridSpec
    times: np.ndarray
    m: np.ndarray           # (Nt, n, *space)
    U: np.ndarray           # (Nt, n(n+1)/2, *space)
    rho0: ScalarGridField
    pressure: ScalarGridField
    chi: np.ndarray         # (Nt,)

    def __post_init__(self):
        Nt = self.times.shape[0]
        n = self.grid.n
        if self.m.shape != (Nt, n) + self.grid.shape:
            raise SubsolutionError(f"Momentum family of shape {self.m.shape} does not match the grid")
        if self.U.shape != (Nt, len(sym_pairs(n))) + self.grid.shape or self.chi.shape != (Nt,):
            raise SubsolutionError("Stress family or chi samples do not match the time samples")

    def _expand_time(self, values: np.ndarray) -> np.ndarray:
        return values.reshape((-1,) + (1,) * self.grid.n)

    @cached_property
    def U_full(self) -> np.ndarray:
        return sym_to_full(self.U, self.grid.n)

    @property
    def q0(self) -> np.ndarray:
        return self.pressure.values[None] + self._expand_time(self.chi) / self.grid.n

    def deficit_density(self) -> np.ndarray:
        return self.rho0.values[None] * self._expand_time(self.chi) - np.sum(self.m ** 2, axis=1)

    @cached_property
    def deficit(self) -> float:
        return space_time_integral(self.deficit_density(), self.times)

    def slice_deficit(self, index: int) -> float:
        return float(np.mean(self.deficit_density()[index]))

    def hint_gap(self) -> np.ndarray:
        """chi/n - e(rho0, m, U) at every sample, shape (Nt, *space)"""
        n = self.grid.n
        e = e_field(self.rho0.values[None], _points_vector(self.m, n), _points_matrix(self.U_full, n))
        return self._expand_time(self.chi) / n - e

    def with_fields(self, m: np.ndarray, U: np.ndarray) -> 'SubsolutionState':
        return dataclasses.replace(self, m=m, U=U)

    def restrict(self, first: int, last: int) -> 'SubsolutionState':
        """Time samples first..last inclusive"""
        window = slice(first, last + 1)
        return dataclasses.replace(self, times=self.times[window], m=self.m[window],
                                   U=self.U[window], chi=self.chi[window])

    def index_of(self, t: float) -> int:
        index = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[index] - t) > 1e-9 * max(1.0, abs(t)):
            raise SubsolutionError(f"Time {t} is not a sample of the state")
        return index


def initial_state(stat: StationarySubsolution, times: np.ndarray) -> SubsolutionState:
    """m = 0, U = U_tilde at every time sample"""
    grid = stat.grid
    times = np.asarray(times, dtype=float)
    U = np.broadcast_to(stat.U_tilde.values, (times.size,) + stat.U_tilde.values.shape).copy()
    return SubsolutionState(grid, times, np.zeros((times.size, grid.n) + grid.shape), U,
                            stat.rho0, stat.pressure, np.asarray(stat.chi_profile(times), dtype=float))


@dataclass
class StateResiduals:
    divergence: float
    weak_momentum: float
    weak_mass: float
    hint_margin: float
    deficit: float

    def failures(self) -> List[Tuple[str, float, float]]:
        """(name, value, tolerance) for every failing check"""
        failed = []
        if self.divergence > TOL_DIVERGENCE:
            failed.append(('divergence', self.divergence, TOL_DIVERGENCE))
        if self.weak_momentum > TOL_WEAK:
            failed.append(('weak_momentum', self.weak_momentum, TOL_WEAK))
        if self.weak_mass > TOL_WEAK:
            failed.append(('weak_mass', self.weak_mass, TOL_WEAK))
        if not self.hint_margin > 0.0:
            failed.append(('hyperinterior', -self.hint_margin, 0.0))
        if self.deficit < -TOL_GEOMETRIC:
            failed.append(('deficit', -self.deficit, TOL_GEOMETRIC))
        return failed

    @property
    def passed(self) -> bool:
        return not self.failures()

    def to_dict(self) -> Dict:
        data = dataclasses.asdict(self)
        data['passed'] = self.passed
        return data


def state_residuals(state: SubsolutionState, momentum_tests=None, mass_tests=None) -> StateResiduals:
    """Divergence sup, weak momentum and mass residual maxima, hyperinterior margin and deficit"""
    grid = state.grid
    n = grid.n
    t0, t1 = float(state.times[0]), float(state.times[-1])
    if momentum_tests is None:
        momentum_tests = standard_test_basis(grid, t0, t1, STANDARD_TEST_COUNT, STANDARD_TEST_SEED)
    if mass_tests is None:
        mass_tests = standard_test_basis(grid, t0, t1, STANDARD_TEST_COUNT, STANDARD_TEST_SEED + 1, components=1)

    divergence = float(np.max(np.abs(divergence_values(state.m, grid))))
    stress = state.U_full + state.q0[:, None, None] * np.eye(n).reshape((1, n, n) + (1,) * n)
    momentum = VectorGridField(grid, state.m)
    weak_momentum = max((abs(weak_pairing(momentum, state.times, test, stress)) for test in momentum_tests),
                        default=0.0)
    weak_mass = max((abs(mass_pairing(state.rho0, momentum, state.times, test)) for test in mass_tests),
                    default=0.0)
    return StateResiduals(divergence, weak_momentum, weak_mass,
                          float(np.min(state.hint_gap())), state.deficit)


def check_state(state: SubsolutionState, context: str = 'state', residuals: Optional[StateResiduals] = None):
    """Raise InvariantError naming the first failing check"""
    residuals = residuals or state_residuals(state)
    failures = residuals.failures()
    if failures:
        name, value, tolerance = failures[0]
        logger.error(f"{context}: invariant {name} failed ({value:.3e})")
        raise InvariantError(f"{context}: {name}", value, tolerance)
    return residuals


def time_symmetric_data(flat: SubsolutionState, T: float) -> SubsolutionState:
    """Reflect a flat state on [-T, T] onto [0, 2T]: t in [0, T] maps to t, t in (T, 2T] to t - 2T"""
    grid = flat.grid
    M = int(round(T / grid.dt))
    expected = grid.time_samples(-M, M)
    if flat.times.shape != expected.shape or np.max(np.abs(flat.times - expected)) > 1e-12:
        raise SubsolutionError("Flat state must be sampled on dt * (-M..M) with M = T/dt")
    seam_m = float(np.max(np.abs(flat.m[0] - flat.m[-1])))
    seam_U = float(np.max(np.abs(flat.U[0] - flat.U[-1])))
    if max(seam_m, seam_U) > TOL_GEOMETRIC:
        raise SubsolutionError(f"Flat state branches disagree at the seam by {max(seam_m, seam_U):.3e}")

    j = np.arange(2 * M + 1)
    source = np.where(j <= M, M + j, j - M)
    return SubsolutionState(grid, grid.time_samples(0, 2 * M), flat.m[source].copy(), flat.U[source].copy(),
                            flat.rho0, flat.pressure, flat.chi[source].copy())


def sub_cube_side(k: int, n: int) -> float:
    """Side of the centred cube Q_k with |Q minus Q_k| <= 2^-k"""
    return (1.0 - 2.0 ** (-k)) ** (1.0 / n)


@dataclass
class FlatSubsolution:
    state: SubsolutionState
    alphas: List[float] = field(default_factory=list)
    reports: List = field(default_factory=list)
    truncated_at: Optional[int] = None

    @property
    def deficit_at_zero(self) -> float:
        return self.alphas[-1]

    @property
    def beta_impl(self) -> float:
        from .oscillation import fit_beta
        return fit_beta(self.alphas)

    def to_dict(self) -> Dict:
        return {'alphas': self.alphas, 'beta_impl': self.beta_impl,
                'truncated_at': self.truncated_at, 'deficit_at_zero': self.deficit_at_zero}


def approximate_flat_subsolution(stat: StationarySubsolution, iters: int, seed: int, k_min: int = 8,
                                 settings=None, check: bool = True) -> FlatSubsolution:
    """Improve the stationary state around t = 0 on [-T, T] with windows 2^-k T"""
    from .oscillation import CoverRegion, ImprovementSettings, improvement_step
    from .utils import step_rng

    if iters < 0:
        raise SubsolutionError(f"iters must be nonnegative, got {iters}")
    settings = settings or ImprovementSettings()
    grid = stat.grid
    M = grid.steps
    state = initial_state(stat, grid.time_samples(-M, M))
    result = FlatSubsolution(state, [state.slice_deficit(M)])

    for k in range(1, iters + 1):
        window = 2.0 ** (-k) * grid.T
        if window < MIN_BALL_CELLS * grid.h:
            logger.warning(f"Flat iteration truncated at k={k}: window {window:.3e} below {MIN_BALL_CELLS} cells, "
                           f"residual deficit {result.alphas[-1]:.6e}")
            result.truncated_at = k
            break
        region = CoverRegion(mode='slice', time_index=M, max_radius=window,
                             cube_side=sub_cube_side(k, grid.n))
        state, report = improvement_step(state, int(step_rng(seed, 0, k).integers(2 ** 63)),
                                         k_min, settings, region)
        if check:
            check_state(state, f"flat iteration {k}")
        result.state = state
        result.alphas.append(state.slice_deficit(M))
        result.reports.append(report)
        logger.info(f"Flat iteration {k}: deficit at t=0 {result.alphas[-1]:.6e}")
    return result
