"""
Energy admissibility: pressure laws, internal energy, the chi profile and
the maximal time on which the energy inequality is certified
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline, PchipInterpolator
from scipy.optimize import bisect

from .constants import ENERGY_TEST_COUNT, RK4_STEP, TOL_ENERGY
from .errors import AdmissibilityError, ConfigError
from .torus_fields import (
    GridSpec, ScalarGridField, TestFunction, gradient_values,
    space_time_integral, standard_test_basis,
)

if TYPE_CHECKING:
    from .subsolution import SubsolutionState

logger = logging.getLogger('wildeuler.admissibility')


class PressureLaw:
    """Strictly increasing C^1 pressure law p(rho)"""

    def pressure(self, rho):
        raise NotImplementedError

    def derivative(self, rho):
        raise NotImplementedError

    def energy_closed_form(self, rho, rho_ref):
        """epsilon(rho) - epsilon(rho_ref) when a closed form exists, else None"""
        return None

    def to_dict(self) -> Dict:
        raise NotImplementedError


@dataclass(frozen=True)
class PolytropicLaw(PressureLaw):
    """p(rho) = k rho^gamma"""
    k: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if not self.k > 0 or not self.gamma > 1:
            raise ConfigError(f"pressure: polytropic law needs k > 0 and gamma > 1 (k={self.k}, gamma={self.gamma})")

    def pressure(self, rho):
        return self.k * np.power(rho, self.gamma)

    def derivative(self, rho):
        return self.k * self.gamma * np.power(rho, self.gamma - 1.0)

    def energy_closed_form(self, rho, rho_ref):
        g1 = self.gamma - 1.0
        return self.k * (np.power(rho, g1) - np.power(rho_ref, g1)) / g1

    def to_dict(self) -> Dict:
        return {'type': 'polytropic', 'k': self.k, 'gamma': self.gamma}


class TabulatedLaw(PressureLaw):
    """Monotone C^1 interpolation of a strictly increasing pressure table"""

    def __init__(self, rho, p):
        self.rho = np.asarray(rho, dtype=float)
        self.p = np.asarray(p, dtype=float)
        if self.rho.ndim != 1 or self.rho.shape != self.p.shape or self.rho.size < 3:
            raise ConfigError("pressure: table needs at least three matching (rho, p) pairs")
        if np.any(np.diff(self.rho) <= 0) or np.any(np.diff(self.p) <= 0) or self.rho[0] < 0:
            raise ConfigError("pressure: table must be strictly increasing in rho and p")
        self._interp = PchipInterpolator(self.rho, self.p, extrapolate=False)
        self._slope = self._interp.derivative()

    def _check(self, rho):
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < self.rho[0]) or np.any(rho > self.rho[-1]):
            raise AdmissibilityError(f"Density outside the pressure table [{self.rho[0]}, {self.rho[-1]}]")
        return rho

    def pressure(self, rho):
        return self._interp(self._check(rho))

    def derivative(self, rho):
        return self._slope(self._check(rho))

    def to_dict(self) -> Dict:
        return {'type': 'tabulated', 'rho': self.rho.tolist(), 'p': self.p.tolist()}


def pressure_law_from_config(spec: Dict) -> PressureLaw:
    kind = spec.get('type')
    if kind == 'polytropic':
        return PolytropicLaw(float(spec.get('k', 1.0)), float(spec.get('gamma', 2.0)))
    if kind == 'tabulated':
        return TabulatedLaw(spec.get('rho', []), spec.get('p', []))
    raise ConfigError(f"pressure.type: unknown pressure law '{kind}'")


def internal_energy(law: PressureLaw, rho: float, rho_ref: float) -> float:
    """epsilon(rho) - epsilon(rho_ref) with p(r) = r^2 epsilon'(r)"""
    if not rho > 0 or not rho_ref > 0:
        raise AdmissibilityError(f"Internal energy needs positive densities (rho={rho}, rho_ref={rho_ref})")
    closed = law.energy_closed_form(rho, rho_ref)
    if closed is not None:
        return float(closed)
    value, _ = quad(lambda s: float(law.pressure(s)) / s ** 2, rho_ref, rho, epsabs=1e-13, epsrel=1e-12)
    return float(value)


def internal_energy_values(law: PressureLaw, rho: np.ndarray, rho_ref: float) -> np.ndarray:
    """internal_energy over an array, integrating between consecutive sorted values"""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0) or not rho_ref > 0:
        raise AdmissibilityError("Internal energy needs positive densities")
    closed = law.energy_closed_form(rho, rho_ref)
    if closed is not None:
        return np.asarray(closed, dtype=float)
    levels, inverse = np.unique(rho, return_inverse=True)
    energies = np.empty_like(levels)
    energies[0] = internal_energy(law, levels[0], rho_ref)
    for i in range(1, levels.size):
        piece, _ = quad(lambda s: float(law.pressure(s)) / s ** 2, levels[i - 1], levels[i],
                        epsabs=1e-14, epsrel=1e-12)
        energies[i] = energies[i - 1] + piece
    return energies[inverse].reshape(rho.shape)


@dataclass(frozen=True)
class AdmissibilityConstants:
    c0: float
    c1: float
    c2: float
    C1: float
    C2: float

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def _composite_fields(rho0: ScalarGridField, law: PressureLaw):
    rho = rho0.values
    if np.min(rho) <= 0:
        raise AdmissibilityError("Density must stay positive for the admissibility constants")
    energy = internal_energy_values(law, rho, 1.0)
    G = energy + law.pressure(rho) / rho
    H = 1.0 / rho
    return G, H


def compute_constants(rho0: ScalarGridField, law: PressureLaw) -> AdmissibilityConstants:
    G, H = _composite_fields(rho0, law)
    grad_G = gradient_values(G, rho0.grid)
    grad_H = gradient_values(H, rho0.grid)
    c0 = math.sqrt(float(np.max(rho0.values)))
    c1 = float(np.max(np.sqrt(np.sum(grad_G ** 2, axis=0))))
    c2 = float(np.max(np.sqrt(np.sum(grad_H ** 2, axis=0))))
    return AdmissibilityConstants(c0, c1, c2, 2.0 * c1 * c0, c2 * c0)


@dataclass(frozen=True, eq=False)
class ChiProfile:
    """Solution of chi' = -C1 sqrt(chi) - C2 chi^(3/2), via u = sqrt(chi)

    C1 and C2 already include the slack factor.
    """
    chi0: float
    C1: float
    C2: float
    t_max: float
    representation: str = 'closed_form'
    sample_times: Optional[np.ndarray] = None
    sample_u: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.chi0 > 0:
            raise AdmissibilityError(f"chi0 must be positive, got {self.chi0}")
        if self.C1 < 0 or self.C2 < 0:
            raise AdmissibilityError("chi constants must be nonnegative")

    @property
    def branch(self) -> str:
        if self.C1 == 0 and self.C2 == 0:
            return 'constant'
        if self.C2 == 0:
            return 'linear'
        if self.C1 == 0:
            return 'reciprocal'
        return 'tangent'

    @property
    def extinction_time(self) -> float:
        u0 = math.sqrt(self.chi0)
        branch = self.branch
        if branch == 'linear':
            return 2.0 * u0 / self.C1
        if branch == 'tangent':
            a = math.sqrt(self.C1 / self.C2)
            return 2.0 * math.atan(u0 / a) / math.sqrt(self.C1 * self.C2)
        return math.inf

    def root(self, t) -> np.ndarray:
        """u(t) = sqrt(chi(t)), clipped at zero"""
        t = np.asarray(t, dtype=float)
        if self.representation == 'rk4':
            spline = CubicHermiteSpline(self.sample_times, self.sample_u,
                                        -0.5 * (self.C1 + self.C2 * self.sample_u ** 2))
            inside = np.clip(t, self.sample_times[0], self.sample_times[-1])
            return np.maximum(spline(inside), 0.0)
        u0 = math.sqrt(self.chi0)
        branch = self.branch
        if branch == 'constant':
            return np.full_like(t, u0)
        if branch == 'linear':
            return np.maximum(u0 - 0.5 * self.C1 * t, 0.0)
        if branch == 'reciprocal':
            return u0 / (1.0 + 0.5 * self.C2 * u0 * t)
        a = math.sqrt(self.C1 / self.C2)
        b = 0.5 * math.sqrt(self.C1 * self.C2)
        phase = np.minimum(b * t, math.atan(u0 / a))
        return np.maximum(a * np.tan(math.atan(u0 / a) - phase), 0.0)

    def __call__(self, t) -> np.ndarray:
        return self.root(t) ** 2

    def derivative(self, t) -> np.ndarray:
        u = self.root(t)
        rate = np.where(u > 0, -0.5 * (self.C1 + self.C2 * u ** 2), 0.0)
        return 2.0 * u * rate

    def to_dict(self) -> Dict:
        return {'chi0': self.chi0, 'C1': self.C1, 'C2': self.C2,
                't_max': self.t_max, 'branch': self.branch,
                'representation': self.representation}


def _rk4_root(u0: float, C1: float, C2: float, t_max: float, step: float):
    def rate(u):
        return -0.5 * (C1 + C2 * u * u)

    count = max(1, int(math.ceil(t_max / step)))
    h = t_max / count
    times = h * np.arange(count + 1)
    u = np.empty(count + 1)
    u[0] = u0
    for i in range(count):
        y = u[i]
        if y <= 0.0:
            u[i + 1:] = 0.0
            break
        k1 = rate(y)
        k2 = rate(y + 0.5 * h * k1)
        k3 = rate(y + 0.5 * h * k2)
        k4 = rate(y + h * k3)
        u[i + 1] = max(y + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0, 0.0)
    return times, u


def chi_solve(chi0: float, constants: AdmissibilityConstants, t_max: float,
              method: str = 'closed_form', slack: float = 1.0, step: float = RK4_STEP) -> ChiProfile:
    """Solve the chi equation with equality; slack >= 1 scales C1 and C2"""
    if slack < 1.0:
        raise AdmissibilityError(f"Slack factor must be >= 1, got {slack}")
    C1, C2 = slack * constants.C1, slack * constants.C2
    if method == 'closed_form':
        return ChiProfile(chi0, C1, C2, t_max)
    if method == 'rk4':
        times, u = _rk4_root(math.sqrt(chi0), C1, C2, t_max, step)
        return ChiProfile(chi0, C1, C2, t_max, 'rk4', times, u)
    raise AdmissibilityError(f"Unknown chi method '{method}'")


def maximal_time(profile: ChiProfile, threshold: float, horizon: Optional[float] = None,
                 method: str = 'closed_form') -> float:
    """First time chi reaches the threshold; the horizon stands in for infinity"""
    if profile.chi0 <= threshold:
        raise AdmissibilityError(f"chi0 = {profile.chi0} does not exceed the threshold {threshold}")
    unbounded = math.inf if horizon is None else horizon
    branch = profile.branch
    if branch == 'constant' or (branch == 'reciprocal' and threshold <= 0):
        return unbounded

    if method == 'closed_form' and profile.representation == 'closed_form':
        u0 = math.sqrt(profile.chi0)
        level = math.sqrt(max(threshold, 0.0))
        if branch == 'linear':
            t_bar = 2.0 * (u0 - level) / profile.C1
        elif branch == 'reciprocal':
            t_bar = 2.0 * (u0 / level - 1.0) / (profile.C2 * u0)
        else:
            a = math.sqrt(profile.C1 / profile.C2)
            b = 0.5 * math.sqrt(profile.C1 * profile.C2)
            t_bar = (math.atan(u0 / a) - math.atan(level / a)) / b
        return min(t_bar, unbounded)

    upper = profile.extinction_time
    if not math.isfinite(upper):
        upper = max(profile.t_max, 1.0)
        while float(profile(upper)) > threshold:
            upper *= 2.0
    if profile.representation == 'rk4':
        upper = min(upper, float(profile.sample_times[-1]))
        if float(profile(upper)) > threshold:
            return unbounded
    t_bar = bisect(lambda t: float(profile(t)) - threshold, 0.0, upper, xtol=1e-12, maxiter=200)
    return min(t_bar, unbounded)


@dataclass(frozen=True, eq=False)
class SquaredTest:
    """Nonnegative test (theta(t) P(x))^2 built from a scalar test function"""
    base: TestFunction

    def values(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        return self.base.values(grid, times)[:, 0] ** 2

    def time_derivative(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        return (2.0 * self.base.values(grid, times)[:, 0]
                * self.base.time_derivative(grid, times)[:, 0])

    def gradient(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        """(Nt, n, *space)"""
        phi = self.base.values(grid, times)[:, 0]
        return 2.0 * phi[:, None] * self.base.gradient(grid, times)[:, 0]


def nonnegative_tests(grid: GridSpec, t0: float, t1: float, count: int = ENERGY_TEST_COUNT,
                      seed: int = 0) -> List[SquaredTest]:
    """count squared tests: half vanish near both ends of [t0, t1], the rest peak at t0"""
    interior = count // 2
    base = standard_test_basis(grid, t0, t1, interior, seed, components=1)
    base += standard_test_basis(grid, t0, t1, count - interior, seed + 1, components=1, anchored=True)
    return [SquaredTest(test) for test in base]


@dataclass
class EnergyReport:
    worst_reduced: float
    reduced: List[float]
    full: List[float]
    bound_violation: float
    tolerance: float = TOL_ENERGY

    @property
    def full_min(self) -> float:
        return min(self.full) if self.full else 0.0

    @property
    def passed(self) -> bool:
        return (self.worst_reduced <= self.tolerance and self.bound_violation <= self.tolerance
                and self.full_min >= -self.tolerance)

    def to_dict(self) -> Dict:
        return {
            'worst_reduced': self.worst_reduced,
            'full_min': self.full_min,
            'bound_violation': self.bound_violation,
            'tolerance': self.tolerance,
            'tests': len(self.reduced),
            'passed': self.passed,
        }


def enforce_modulus(state: 'SubsolutionState', profile: ChiProfile) -> 'SubsolutionState':
    """Rescale m pointwise to |m|^2 = rho0 chi(t); zero momentum is sent along e1"""
    chi = profile(state.times)
    n = state.grid.n
    expand = (slice(None),) + (None,) * n
    target = np.sqrt(state.rho0.values[None] * chi[expand])
    norm = np.sqrt(np.sum(state.m ** 2, axis=1))
    unit = np.zeros_like(state.m)
    unit[:, 0] = 1.0
    safe = np.where(norm > 0, norm, 1.0)
    direction = np.where((norm > 0)[:, None], state.m / safe[:, None], unit)
    return dataclasses.replace(state, m=direction * target[:, None], chi=chi)


def energy_residual(state: 'SubsolutionState', profile: ChiProfile, tests: List[SquaredTest],
                    law: PressureLaw, constants: Optional[AdmissibilityConstants] = None,
                    tolerance: float = TOL_ENERGY) -> EnergyReport:
    """Weak energy inequality of a modulus-enforced state over nonnegative tests

    reduced holds the pairings of 1/2 chi' + m.grad(eps + p/rho0) + chi/2 m.grad(1/rho0),
    which must stay <= tolerance. full holds the pairings of the energy
    inequality itself, energy * dphi/dt + flux . grad phi plus the initial
    energy |m(t0)|^2/(2 rho0) + rho0 eps(rho0) against phi(t0); these must
    stay >= -tolerance. The state is assumed to start at the initial time.
    """
    grid = state.grid
    n = grid.n
    times = state.times
    chi = profile(times)
    dchi = profile.derivative(times)
    rho = state.rho0.values
    expand = (slice(None),) + (None,) * n

    modulus = np.sum(state.m ** 2, axis=1)
    excess = modulus - rho[None] * chi[expand]
    scale = max(1.0, float(np.max(rho)) * float(np.max(chi)))
    if np.max(excess) > 1e-10 * scale:
        raise AdmissibilityError(f"State exceeds |m|^2 <= rho0 chi by {np.max(excess):.3e}")

    constants = constants or compute_constants(state.rho0, law)
    G, H = _composite_fields(state.rho0, law)
    grad_G = gradient_values(G, grid)
    grad_H = gradient_values(H, grid)
    flux_G = np.sum(state.m * grad_G[None], axis=1)
    flux_H = np.sum(state.m * grad_H[None], axis=1)
    reduced_density = 0.5 * dchi[expand] + flux_G + 0.5 * chi[expand] * flux_H

    root_chi = np.sqrt(chi)[expand]
    bound_G = np.abs(flux_G) - constants.c1 * constants.c0 * root_chi
    bound_H = 0.5 * chi[expand] * np.abs(flux_H) - 0.5 * constants.c2 * constants.c0 * root_chi ** 3
    slack_scale = max(1.0, constants.c0 * (constants.c1 + constants.c2) * float(np.max(chi)) ** 1.5)
    bound_violation = max(0.0, float(np.max(bound_G)), float(np.max(bound_H))) / slack_scale

    energy = 0.5 * modulus / rho[None] + (rho * internal_energy_values(law, rho, 1.0))[None]
    flux = (energy + law.pressure(rho)[None])[:, None] * state.m / rho[None, None]

    reduced, full = [], []
    for test in tests:
        phi = test.values(grid, times)
        reduced.append(space_time_integral(reduced_density * phi, times))
        pairing = energy * test.time_derivative(grid, times) + np.sum(flux * test.gradient(grid, times), axis=1)
        initial = float(np.mean(energy[0] * phi[0]))
        full.append(space_time_integral(pairing, times) + initial)

    worst = max(reduced) if reduced else 0.0
    logger.info(f"Energy residual over {len(tests)} tests: worst reduced {worst:.3e}, "
                f"least full pairing {min(full) if full else 0.0:.3e}")
    return EnergyReport(float(worst), reduced, full, bound_violation, tolerance)

