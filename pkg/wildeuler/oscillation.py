"""
Localized oscillations and the improvement step

A wave is generated by a third-order potential: for the special direction
with generators (c, d) the operator maps a scalar Phi to a symmetric
space-time matrix whose spatial block is U, whose mixed column is m and
whose corner vanishes, and which solves div m = 0, dt m + div U = 0 for any
Phi. On the grid the spatial derivatives of Phi are taken spectrally through
an antisymmetric matrix potential, which keeps both identities exact per
time slice; the potential itself and its time derivative are sampled
analytically from the cutoff and the phase.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space
from scipy.special import gamma as gamma_fn

from .constants import (
    CUTOFF_PROFILE, FREQUENCY_CAP_FRACTION, HINT_MARGIN_FLOOR, INNER_FRACTION,
    MIN_BALL_CELLS, SEGMENT_SAMPLES, STANDARD_TEST_COUNT, STANDARD_TEST_SEED,
    TOL_ALGEBRAIC, TOL_GEOMETRIC,
)
from .errors import CoverError, GeometryError, ImprovementError
from .relaxation_geometry import (
    AdmissibleSegment, ConstraintParams, HullStatus, StateTriple,
    admissible_segment, e_field, in_hull, special_direction,
)
from .subsolution import SubsolutionState, check_state
from .torus_fields import (
    SMOOTH_RAMP, GridSpec, _derivative_symbols, _fft, _ifft, space_time_integral,
    standard_test_basis, sym_pairs,
)
from .utils import step_rng

logger = logging.getLogger('wildeuler.oscillation')

# 1 - S7(s) = (1 - s)^4 (1 + 4s + 10s^2 + 20s^3)
_BUMP = SMOOTH_RAMP
_BUMP_DERIVATIVES = [_BUMP] + [_BUMP.deriv(order) for order in (1, 2, 3)]


def cutoff_derivatives(u: np.ndarray, inner: float = INNER_FRACTION) -> List[np.ndarray]:
    """F, F', F'', F''' of the cutoff as a function of u = |z|^2

    F = 1 for |z| <= inner, F = 0 for |z| >= 1, C^3 in between.
    """
    u = np.asarray(u, dtype=float)
    width = 1.0 - inner ** 2
    s = (u - inner ** 2) / width
    ramp = (s > 0.0) & (s < 1.0)
    out = []
    for order, poly in enumerate(_BUMP_DERIVATIVES):
        values = np.zeros_like(s)
        if order == 0:
            values[s <= 0.0] = 1.0
        values[ramp] = poly(s[ramp]) / width ** order
        out.append(values)
    return out


def ball_volume(radius: float, dim: int) -> float:
    return math.pi ** (dim / 2.0) / gamma_fn(dim / 2.0 + 1.0) * radius ** dim


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """Constant-coefficient third-order operator Phi -> symmetric (n+1)x(n+1) matrix

    M_ij = sum_abc coefficients[i, j, a, b, c] d_a d_b d_c Phi, symmetric in (a, b, c).
    """
    coefficients: np.ndarray
    eta: np.ndarray
    omega: np.ndarray
    direction: StateTriple

    @property
    def n(self) -> int:
        return self.omega.shape[0]

    def apply(self, third: np.ndarray) -> np.ndarray:
        """(..., D, D, D) third derivatives -> (..., D, D)"""
        return np.einsum('ijabc,...abc->...ij', self.coefficients, third)

    def apply_divergence(self, fourth: np.ndarray) -> np.ndarray:
        """Row divergence sum_i d_i M_ij from (..., D, D, D, D) fourth derivatives"""
        return np.einsum('ijabc,...iabc->...j', self.coefficients, fourth)

    def direction_matrix(self) -> np.ndarray:
        """Space-time matrix [[U, m], [m, 0]] of the special direction"""
        n = self.n
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = self.direction.U
        M[:n, n] = self.direction.m
        M[n, :n] = self.direction.m
        return M


def _symmetrize_last_three(G: np.ndarray) -> np.ndarray:
    perms = [(0, 1, 2, 3, 4), (0, 1, 2, 4, 3), (0, 1, 3, 2, 4),
             (0, 1, 3, 4, 2), (0, 1, 4, 2, 3), (0, 1, 4, 3, 2)]
    return sum(np.transpose(G, p) for p in perms) / 6.0


def potential_operator(c, d, rho: float) -> OperatorSpec:
    """Potential reproducing (M_c - M_d) psi'''(y.eta) on plane waves psi(y.eta)"""
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    direction = special_direction(c, d, rho)
    n = c.size
    T = n
    total = c + d
    if np.linalg.norm(total) > TOL_GEOMETRIC * max(1.0, np.linalg.norm(c)):
        xi = total / np.linalg.norm(total)
        tau = -(c @ c + c @ d) / (rho * np.linalg.norm(total))
    else:
        xi = null_space(c[None, :])[:, 0]
        tau = 0.0
    w = d - c
    omega = np.outer(w, xi) - np.outer(xi, w)

    G = np.zeros((n + 1,) * 5)
    for i in range(n):
        for j in range(n):
            for l in range(n):
                G[i, j, T, i, l] += omega[j, l]
                G[i, j, T, j, l] += omega[i, l]
        for a in range(n):
            for l in range(n):
                G[i, T, a, a, l] -= omega[i, l]
                G[T, i, a, a, l] -= omega[i, l]
    G = _symmetrize_last_three(G)

    eta = np.append(xi, tau)
    spec = OperatorSpec(G, eta, omega, direction)
    reproduced = spec.apply(np.einsum('a,b,c->abc', eta, eta, eta))
    target = spec.direction_matrix()
    if np.max(np.abs(reproduced - target)) > TOL_GEOMETRIC * max(1.0, np.max(np.abs(target))):
        raise GeometryError("Potential operator does not reproduce the special direction")
    return spec


@dataclass(frozen=True, eq=False)
class WaveSpec:
    c: np.ndarray
    d: np.ndarray
    rho_local: float
    eta: np.ndarray
    k: int
    center: np.ndarray
    radius: float
    amplitude: float = 1.0
    inner_fraction: float = INNER_FRACTION
    cutoff: str = CUTOFF_PROFILE

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float)
        d = np.asarray(self.d, dtype=float)
        if abs(c @ c - d @ d) > TOL_ALGEBRAIC * max(1.0, c @ c):
            raise GeometryError("Wave generators differ in length")
        eta = np.asarray(self.eta, dtype=float)
        if np.linalg.norm(eta[:-1]) <= TOL_GEOMETRIC * max(1.0, np.linalg.norm(eta)):
            raise GeometryError("Wave covector is parallel to the time axis")
        if self.k < 1 or not self.radius > 0 or not 0 < self.inner_fraction < 1:
            raise GeometryError("Wave needs k >= 1, a positive radius and an inner fraction in (0, 1)")
        if self.cutoff != CUTOFF_PROFILE:
            raise GeometryError(f"Unknown cutoff profile '{self.cutoff}'")

    @property
    def m_bar(self) -> np.ndarray:
        return self.amplitude * (np.asarray(self.c) - np.asarray(self.d))


def wave_for(op: OperatorSpec, c, d, rho: float, k: int, center, radius: float,
             amplitude: float = 1.0) -> WaveSpec:
    return WaveSpec(np.asarray(c, dtype=float), np.asarray(d, dtype=float), float(rho),
                    op.eta, int(k), np.asarray(center, dtype=float), float(radius), float(amplitude))


def _displacements(spec: WaveSpec, points: np.ndarray) -> np.ndarray:
    """Space-time offsets from the centre, spatial part wrapped to [-1/2, 1/2)"""
    disp = np.asarray(points, dtype=float) - spec.center
    disp[..., :-1] = (disp[..., :-1] + 0.5) % 1.0 - 0.5
    return disp


def _cutoff_tensors(disp: np.ndarray, radius: float, inner: float):
    z = disp / radius
    F0, F1, F2, F3 = cutoff_derivatives(np.sum(z ** 2, axis=-1), inner)
    eye = np.eye(disp.shape[-1])
    chi1 = (2.0 / radius) * F1[:, None] * z
    chi2 = ((4.0 / radius ** 2) * F2[:, None, None] * z[:, :, None] * z[:, None, :]
            + (2.0 / radius ** 2) * F1[:, None, None] * eye)
    sym = (np.einsum('ab,pc->pabc', eye, z) + np.einsum('ac,pb->pabc', eye, z)
           + np.einsum('bc,pa->pabc', eye, z))
    chi3 = ((8.0 / radius ** 3) * F3[:, None, None, None] * np.einsum('pa,pb,pc->pabc', z, z, z)
            + (4.0 / radius ** 3) * F2[:, None, None, None] * sym)
    return F0, chi1, chi2, chi3


def potential_third_derivatives(spec: WaveSpec, disp: np.ndarray) -> np.ndarray:
    """d_a d_b d_c of Phi = cutoff * k^-3 cos(k eta.disp), shape (P, D, D, D)"""
    eta, k = np.asarray(spec.eta, dtype=float), float(spec.k)
    chi0, chi1, chi2, chi3 = _cutoff_tensors(disp, spec.radius, spec.inner_fraction)
    theta = k * disp @ eta
    cos, sin = np.cos(theta), np.sin(theta)
    g0 = cos / k ** 3
    g1 = -(sin / k ** 2)[:, None] * eta
    g2 = -(cos / k)[:, None, None] * np.outer(eta, eta)
    g3 = sin[:, None, None, None] * np.einsum('a,b,c->abc', eta, eta, eta)
    return (chi0[:, None, None, None] * g3
            + np.einsum('pa,pbc->pabc', chi1, g2) + np.einsum('pb,pac->pabc', chi1, g2)
            + np.einsum('pc,pab->pabc', chi1, g2)
            + np.einsum('pab,pc->pabc', chi2, g1) + np.einsum('pac,pb->pabc', chi2, g1)
            + np.einsum('pbc,pa->pabc', chi2, g1)
            + chi3 * g0[:, None, None, None])


def potential_values(spec: WaveSpec, disp: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Phi and its time derivative at the given offsets"""
    eta, k = np.asarray(spec.eta, dtype=float), float(spec.k)
    z = disp / spec.radius
    F0, F1, _, _ = cutoff_derivatives(np.sum(z ** 2, axis=-1), spec.inner_fraction)
    theta = k * disp @ eta
    g = np.cos(theta) / k ** 3
    g_t = -eta[-1] * np.sin(theta) / k ** 2
    chi_t = (2.0 / spec.radius) * F1 * z[:, -1]
    return F0 * g, chi_t * g + F0 * g_t


def localized_wave(op: OperatorSpec, spec: WaveSpec, points: np.ndarray,
                   time_bounds: Optional[Tuple[float, float]] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(m, U) of the localized wave at space-time points of shape (P, n+1)"""
    if spec.radius >= 0.5:
        raise GeometryError("Wave ball must be smaller than half the torus")
    if time_bounds is not None:
        t0, t1 = time_bounds
        if spec.center[-1] - spec.radius < t0 - TOL_ALGEBRAIC or spec.center[-1] + spec.radius > t1 + TOL_ALGEBRAIC:
            raise GeometryError("Wave ball leaves the time domain")
    n = op.n
    disp = _displacements(spec, points)
    M = spec.amplitude * op.apply(potential_third_derivatives(spec, disp))
    return M[:, :n, n], M[:, :n, :n]


def pure_wave(op: OperatorSpec, spec: WaveSpec, points: np.ndarray) -> np.ndarray:
    """cutoff * (M_c - M_d) * sin(k eta.y), shape (P, D, D)"""
    disp = _displacements(spec, points)
    chi = cutoff_derivatives(np.sum((disp / spec.radius) ** 2, axis=-1), spec.inner_fraction)[0]
    phase = np.sin(spec.k * disp @ np.asarray(spec.eta))
    return spec.amplitude * (chi * phase)[:, None, None] * op.direction_matrix()


def wave_deviation(op: OperatorSpec, spec: WaveSpec, points: np.ndarray) -> float:
    """Sup distance between the localized wave and the pure wave"""
    disp = _displacements(spec, points)
    M = spec.amplitude * op.apply(potential_third_derivatives(spec, disp))
    return float(np.max(np.sqrt(np.sum((M - pure_wave(op, spec, points)) ** 2, axis=(1, 2)))))


def _inner_slice_points(grid: GridSpec, spec: WaveSpec, t: float) -> np.ndarray:
    inner = spec.inner_fraction * spec.radius
    dt = t - spec.center[-1]
    if abs(dt) >= inner:
        return np.zeros((0, grid.n + 1))
    reach = math.sqrt(inner ** 2 - dt ** 2)
    x = np.stack([axis.ravel() for axis in grid.coordinates()], axis=1)
    offset = (x - spec.center[:-1] + 0.5) % 1.0 - 0.5
    keep = np.sum(offset ** 2, axis=1) < reach ** 2
    return np.column_stack([x[keep], np.full(np.count_nonzero(keep), t)])


def oscillation_mass(op: OperatorSpec, spec: WaveSpec, grid: GridSpec, t: Optional[float] = None) -> float:
    """Grid quadrature of |m|^2 over the inner ball slice at time t (default: the centre time)"""
    if np.linalg.norm(np.asarray(spec.eta)[:-1]) == 0.0:
        raise GeometryError("Wave covector is parallel to the time axis")
    t = float(spec.center[-1]) if t is None else t
    points = _inner_slice_points(grid, spec, t)
    if points.shape[0] == 0:
        return 0.0
    m, _ = localized_wave(op, spec, points)
    return float(np.sum(m ** 2) * grid.h ** grid.n)


def oscillation_mass_limit(spec: WaveSpec, n: int, t: Optional[float] = None) -> float:
    """1/2 |m_bar|^2 |inner ball slice|"""
    t = float(spec.center[-1]) if t is None else t
    inner = spec.inner_fraction * spec.radius
    dt = t - spec.center[-1]
    if abs(dt) >= inner:
        return 0.0
    return 0.5 * float(spec.m_bar @ spec.m_bar) * ball_volume(math.sqrt(inner ** 2 - dt ** 2), n)


# Cover

@dataclass(frozen=True)
class Ball:
    """Space-time ball centred on a grid point, radius a whole number of cells"""
    spatial_index: Tuple[int, ...]
    time_index: int
    radius_cells: int

    def radius(self, grid: GridSpec) -> float:
        return self.radius_cells * grid.h

    def center(self, grid: GridSpec, times: np.ndarray) -> np.ndarray:
        return np.append(np.asarray(self.spatial_index, dtype=float) * grid.h, times[self.time_index])


@dataclass(frozen=True)
class CoverRegion:
    """'spacetime' covers Q x (t0, t1); 'slice' centres balls at one time inside a sub-cube"""
    mode: str = 'spacetime'
    time_index: Optional[int] = None
    max_radius: Optional[float] = None
    cube_side: float = 1.0


def _deficit_density(state: SubsolutionState) -> np.ndarray:
    return state.deficit_density()


def _cube_mask(grid: GridSpec, side: float) -> np.ndarray:
    if side >= 1.0:
        return np.ones(grid.shape, dtype=bool)
    lo, hi = 0.5 - 0.5 * side, 0.5 + 0.5 * side
    mask = np.ones(grid.shape, dtype=bool)
    for axis in grid.coordinates():
        mask &= (axis >= lo) & (axis <= hi)
    return mask


def _periodic_offsets(grid: GridSpec, spatial_index: Sequence[int]) -> List[np.ndarray]:
    """Signed per-axis offsets (in cells) from a grid point, wrapped to [-N/2, N/2)"""
    N = grid.N
    axes = []
    for i, c in enumerate(spatial_index):
        offset = (np.arange(N) - c + N // 2) % N - N // 2
        shape = [1] * grid.n
        shape[i] = N
        axes.append(offset.reshape(shape))
    return axes


def _distance_sq(grid: GridSpec, times: np.ndarray, ball: Ball) -> np.ndarray:
    """Squared space-time distance from every (time, grid point) to a ball centre"""
    h = grid.h
    space = sum((off * h) ** 2 for off in _periodic_offsets(grid, ball.spatial_index))
    dt = (times - times[ball.time_index]) ** 2
    return dt.reshape((-1,) + (1,) * grid.n) + space[None]


def cover_measure(grid: GridSpec, region: CoverRegion, radius: float) -> float:
    dim = grid.n if region.mode == 'slice' else grid.n + 1
    return ball_volume(radius, dim)


def cover_sums(state: SubsolutionState, balls: List[Ball], region: CoverRegion) -> Tuple[float, float]:
    """(2 sum_j D(x_j)^2 |B_j|, integral of D^2) over the covered region"""
    grid = state.grid
    density = _deficit_density(state) ** 2
    if region.mode == 'slice':
        mask = _cube_mask(grid, region.cube_side)
        target = float(np.sum(density[region.time_index][mask]) * grid.h ** grid.n)
    else:
        target = space_time_integral(density, state.times)
    lhs = 0.0
    for ball in balls:
        value = density[(ball.time_index,) + tuple(ball.spatial_index)]
        lhs += 2.0 * value * cover_measure(grid, region, ball.radius(grid))
    return lhs, target


def _radius_cells(grid: GridSpec, s: float, region: CoverRegion) -> int:
    cells = int(math.floor(s / grid.h - 1e-9))
    if region.max_radius is not None:
        cells = min(cells, int(math.floor(region.max_radius / grid.h + 1e-9)))
    return min(cells, grid.N // 2 - 1)


def _lattice_positions(start: int, stop: int, spacing: int, offset: int, periodic: bool, N: int) -> List[int]:
    if periodic:
        count = N // spacing
        return [(offset + j * spacing) % N for j in range(count)]
    positions = []
    position = start + offset
    while position <= stop:
        positions.append(position)
        position += spacing
    return positions


def ball_cover(state: SubsolutionState, s: float, seed: int,
               region: CoverRegion = CoverRegion()) -> List[Ball]:
    """Disjoint balls of radius < s satisfying 2 sum D_j^2 |B_j| >= integral of D^2

    A seeded lattice of the largest radius is laid first, then smaller balls
    fill the gaps greedily in order of D^2 until the cover condition holds.
    """
    grid = state.grid
    times = state.times
    rng = step_rng(seed, 7)
    r_max = _radius_cells(grid, s, region)
    if r_max < MIN_BALL_CELLS:
        raise CoverError(f"Cover radius {s} leaves fewer than {MIN_BALL_CELLS} cells per ball")

    lhs, target = cover_sums(state, [], region)
    if target <= TOL_ALGEBRAIC ** 2:
        return []

    density = _deficit_density(state) ** 2
    mask = _cube_mask(grid, region.cube_side)
    h = grid.h
    t_lo, t_hi = times[0], times[-1]
    periodic = region.cube_side >= 1.0
    cube_lo = int(math.ceil((0.5 - 0.5 * region.cube_side) * grid.N - 1e-9)) if not periodic else 0
    cube_hi = int(math.floor((0.5 + 0.5 * region.cube_side) * grid.N + 1e-9)) if not periodic else grid.N - 1

    def admissible_times(radius_cells: int) -> np.ndarray:
        if region.mode == 'slice':
            return np.array([region.time_index])
        r = radius_cells * h
        ok = (times - r >= t_lo - 1e-12) & (times + r <= t_hi + 1e-12)
        return np.flatnonzero(ok)

    def spatial_ok(radius_cells: int) -> np.ndarray:
        if periodic:
            return mask
        ok = mask.copy()
        for axis_index in np.indices(grid.shape):
            ok &= (axis_index - radius_cells >= cube_lo) & (axis_index + radius_cells <= cube_hi)
        return ok

    balls: List[Ball] = []

    # Lattice of the largest radius
    spacing = 2 * r_max
    tindex = admissible_times(r_max)
    if tindex.size:
        axes = []
        for _ in range(grid.n):
            if periodic:
                offset = int(rng.integers(0, spacing))
                axes.append(_lattice_positions(0, grid.N - 1, spacing, offset, True, grid.N))
            else:
                room = (cube_hi - r_max) - (cube_lo + r_max)
                slack = room % spacing if room >= 0 else 0
                offset = int(rng.integers(0, slack + 1))
                axes.append(_lattice_positions(cube_lo + r_max, cube_hi - r_max, spacing, offset, False, grid.N))
        if region.mode == 'slice':
            time_centres = [int(region.time_index)]
        else:
            r = r_max * h
            first = times[tindex[0]]
            span = times[tindex[-1]] - first
            layers = int(math.floor(span / (2 * r) + 1e-9)) + 1
            slack = span - (layers - 1) * 2 * r
            shift = rng.uniform(0.0, slack) if slack > 0 else 0.0
            time_centres = []
            for j in range(layers):
                wanted = first + shift + j * 2 * r
                candidates = tindex[times[tindex] >= wanted - 1e-12]
                if candidates.size == 0:
                    break
                ti = int(candidates[0])
                if time_centres and times[ti] - times[time_centres[-1]] < 2 * r - 1e-12:
                    continue
                time_centres.append(ti)
        for ti in time_centres:
            for spatial in np.array(np.meshgrid(*axes, indexing='ij')).reshape(grid.n, -1).T:
                balls.append(Ball(tuple(int(v) for v in spatial), ti, r_max))

    lhs, target = cover_sums(state, balls, region)
    jitter = rng.uniform(0.0, 1.0, size=density.shape) * 1e-12 * max(float(np.max(density)), 1e-300)

    radius_cells = r_max
    while lhs < target and radius_cells >= MIN_BALL_CELLS:
        tindex = admissible_times(radius_cells)
        free = np.zeros(density.shape, dtype=bool)
        space_ok = spatial_ok(radius_cells)
        free[tindex] = space_ok[None]
        r = radius_cells * h
        for ball in balls:
            reach = ball.radius(grid) + r
            free &= _distance_sq(grid, times, ball) >= reach ** 2 - 1e-12
        priority = np.where(free, density + jitter, -np.inf)
        while lhs < target:
            flat = int(np.argmax(priority))
            if not np.isfinite(priority.flat[flat]):
                break
            index = np.unravel_index(flat, density.shape)
            ball = Ball(tuple(int(v) for v in index[1:]), int(index[0]), radius_cells)
            balls.append(ball)
            lhs += 2.0 * density[index] * cover_measure(grid, region, r)
            priority[_distance_sq(grid, times, ball) < (2 * r) ** 2 - 1e-12] = -np.inf
        radius_cells -= 1

    if lhs < target:
        raise CoverError(f"Cover condition unattainable at s={s}: {lhs:.3e} < {target:.3e}")
    logger.debug(f"Cover with {len(balls)} balls, ratio {lhs / target:.3f}")
    return balls


# Improvement step

@dataclass(frozen=True)
class ImprovementSettings:
    cover_radius: float = 0.13
    amplitude: float = 0.7
    max_backoff: int = 6
    segment_samples: int = SEGMENT_SAMPLES


@dataclass
class GainReport:
    l2_gain: float
    deficit_before: float
    deficit_after: float
    k_used: int
    hint_margin_min: float
    weak_drift: float
    balls: int = 0
    balls_dropped: int = 0
    predicted_gain: float = 0.0
    f_impl: float = math.inf
    backoff_rounds: int = 0
    mode: str = 'spacetime'

    @property
    def beta(self) -> float:
        if self.deficit_before <= 0:
            return 0.0
        return self.l2_gain / self.deficit_before ** 2

    def to_dict(self) -> Dict:
        data = dataclasses.asdict(self)
        data['beta'] = self.beta
        return data


@dataclass
class _Support:
    time_index: np.ndarray    # (P,)
    spatial: np.ndarray       # (P, n) grid indices
    disp: np.ndarray          # (P, D) offsets from the centre


@dataclass
class _WavePlan:
    ball: Ball
    wave: WaveSpec
    op: OperatorSpec
    support: _Support
    segment: AdmissibleSegment
    k_cap: int
    sign: float = 1.0
    weight: float = 1.0
    reach: float = 1.0       # wave amplitude that spans the whole admissible segment


def _ball_support(grid: GridSpec, times: np.ndarray, ball: Ball) -> _Support:
    h = grid.h
    rc = ball.radius_cells
    r = rc * h
    tc = times[ball.time_index]
    span = np.arange(-rc, rc + 1)
    offsets = np.array(np.meshgrid(*([span] * grid.n), indexing='ij')).reshape(grid.n, -1).T
    space_sq = np.sum((offsets * h) ** 2, axis=1)
    t_idx, spatial, disp = [], [], []
    for ti in np.flatnonzero(np.abs(times - tc) < r - 1e-12):
        dt = times[ti] - tc
        keep = space_sq + dt ** 2 < r ** 2
        count = int(np.count_nonzero(keep))
        t_idx.append(np.full(count, ti))
        spatial.append((np.asarray(ball.spatial_index) + offsets[keep]) % grid.N)
        disp.append(np.column_stack([offsets[keep] * h, np.full(count, dt)]))
    return _Support(np.concatenate(t_idx), np.concatenate(spatial), np.concatenate(disp))


def _state_at(state: SubsolutionState, support: _Support):
    idx = (support.time_index, slice(None)) + tuple(support.spatial.T)
    m = state.m[idx]
    U = state.U_full[(support.time_index, slice(None), slice(None)) + tuple(support.spatial.T)]
    rho = state.rho0.values[tuple(support.spatial.T)]
    chi = state.chi[support.time_index]
    return m, U, rho, chi


def _fit_scale(state: SubsolutionState, plan: _WavePlan, t_max: float) -> float:
    """Largest t <= t_max keeping state +- t * cutoff * direction inside at every support point"""
    m, U, rho, chi = _state_at(state, plan.support)
    n = state.grid.n
    cut = cutoff_derivatives(np.sum((plan.support.disp / plan.wave.radius) ** 2, axis=1),
                             plan.wave.inner_fraction)[0]
    dm = plan.op.direction.m
    dU = plan.op.direction.U
    level = chi / n - HINT_MARGIN_FLOOR

    def inside(t: float) -> bool:
        for sign in (1.0, -1.0):
            shift = sign * t * cut
            if np.any(e_field(rho, m + shift[:, None] * dm, U + shift[:, None, None] * dU) >= level):
                return False
        return True

    if inside(t_max):
        return t_max
    lo, hi = 0.0, t_max
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if inside(mid):
            lo = mid
        else:
            hi = mid
    return lo


def _frequency_cap(grid: GridSpec, eta: np.ndarray) -> int:
    spatial = np.max(np.abs(eta[:-1]))
    caps = [2.0 * math.pi * FREQUENCY_CAP_FRACTION * grid.N / spatial]
    if abs(eta[-1]) > 0:
        caps.append(2.0 * math.pi * FREQUENCY_CAP_FRACTION / (grid.dt * abs(eta[-1])))
    return max(1, int(math.floor(min(caps))))


def _plan_waves(state: SubsolutionState, balls: List[Ball], settings: ImprovementSettings,
                rng: np.random.Generator) -> List[_WavePlan]:
    grid = state.grid
    n = grid.n
    plans = []
    for ball in balls:
        index = tuple(ball.spatial_index)
        ti = ball.time_index
        rho = float(state.rho0.values[index])
        chi = float(state.chi[ti])
        params = ConstraintParams(rho, chi, float(state.pressure.values[index]))
        z = StateTriple(state.m[(ti, slice(None)) + index],
                        state.U_full[(ti, slice(None), slice(None)) + index],
                        params.q_target(n))
        if in_hull(params, z) is not HullStatus.INSIDE_HINT:
            logger.debug(f"Skipping ball at {index}, t-index {ti}: centre not in the hyperinterior")
            continue
        try:
            segment = admissible_segment(params, z, rng, settings.segment_samples)
        except GeometryError as e:
            logger.debug(f"Skipping ball at {index}: {e}")
            continue
        c, d = segment.generators
        op = potential_operator(c, d, rho)
        t_seg = np.linalg.norm(segment.direction.m) / np.linalg.norm(c - d)
        wave = wave_for(op, c, d, rho, 1, ball.center(grid, state.times), ball.radius(grid))
        plan = _WavePlan(ball, wave, op, _ball_support(grid, state.times, ball), segment,
                         _frequency_cap(grid, op.eta), reach=t_seg)
        scale = _fit_scale(state, plan, t_seg)
        if scale <= 0.0:
            continue
        plan.wave = dataclasses.replace(wave, amplitude=settings.amplitude * scale)
        plans.append(plan)
    return plans


def _quadrature_weights(state: SubsolutionState, support: _Support, mode: str) -> np.ndarray:
    grid = state.grid
    times = state.times
    if mode == 'slice':
        return np.full(support.time_index.size, grid.h ** grid.n)
    w = np.full(times.size, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return grid.h ** grid.n * w[support.time_index]


def _choose_signs(state: SubsolutionState, plans: List[_WavePlan], mode: str, slice_index: Optional[int]):
    """Orient each wave so its cross term with the current momentum is nonnegative"""
    for plan in plans:
        support = plan.support
        m, _, _, _ = _state_at(state, support)
        points = plan.wave.center + support.disp
        m_wave, _ = localized_wave(plan.op, plan.wave, points)
        weights = _quadrature_weights(state, support, mode)
        if mode == 'slice':
            weights = np.where(support.time_index == slice_index, weights, 0.0)
        cross = float(np.sum(weights * np.sum(m * m_wave, axis=1)))
        plan.sign = 1.0 if cross >= 0.0 else -1.0


def _realize(state: SubsolutionState, plans: List[_WavePlan]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Perturbation (dm, dU) on the affected time indices, from the summed matrix potential"""
    grid = state.grid
    n = grid.n
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    psi = np.zeros((state.times.size, len(pairs)) + grid.shape)
    dpsi = np.zeros_like(psi)
    for plan in plans:
        if plan.weight == 0.0:
            continue
        support = plan.support
        phi, phi_t = potential_values(plan.wave, support.disp)
        coef = plan.sign * plan.weight * plan.wave.amplitude
        for p, (i, j) in enumerate(pairs):
            index = (support.time_index, p) + tuple(support.spatial.T)
            np.add.at(psi, index, coef * plan.op.omega[i, j] * phi)
            np.add.at(dpsi, index, coef * plan.op.omega[i, j] * phi_t)

    affected = np.flatnonzero(np.any(psi != 0, axis=tuple(range(1, psi.ndim)))
                              | np.any(dpsi != 0, axis=tuple(range(1, dpsi.ndim))))
    if affected.size == 0:
        return affected, np.zeros((0, n) + grid.shape), np.zeros((0, len(sym_pairs(n))) + grid.shape)

    S = _derivative_symbols(n, grid.N)
    minus_laplacian = -np.sum(S ** 2, axis=0)
    psi_hat = _fft(psi[affected], grid)
    dpsi_hat = _fft(dpsi[affected], grid)
    v = np.zeros((affected.size, n) + grid.shape, dtype=complex)
    dv = np.zeros_like(v)
    for p, (i, j) in enumerate(pairs):
        v[:, i] += S[j] * psi_hat[:, p]
        v[:, j] -= S[i] * psi_hat[:, p]
        dv[:, i] += S[j] * dpsi_hat[:, p]
        dv[:, j] -= S[i] * dpsi_hat[:, p]
    dm = _ifft(minus_laplacian * v, grid)
    dU = np.stack([_ifft(S[i] * dv[:, j] + S[j] * dv[:, i], grid) for i, j in sym_pairs(n)], axis=1)
    return affected, dm, dU


def _perturbed(state: SubsolutionState, plans: List[_WavePlan]) -> Tuple[SubsolutionState, np.ndarray, np.ndarray]:
    affected, dm, dU = _realize(state, plans)
    m = state.m.copy()
    U = state.U.copy()
    if affected.size:
        m[affected] += dm
        U[affected] += dU
    return state.with_fields(m, U), affected, dm


def _violations(state: SubsolutionState) -> np.ndarray:
    """(time index, spatial index...) of points with margin at or below the floor"""
    return np.argwhere(state.hint_gap() <= HINT_MARGIN_FLOOR)


def _balls_near(state: SubsolutionState, plans: List[_WavePlan], points: np.ndarray) -> List[int]:
    grid = state.grid
    times = state.times
    active = [i for i, plan in enumerate(plans) if plan.weight > 0]
    if not active or points.size == 0:
        return []
    nearest = np.full(points.shape[0], np.inf)
    nearest_ball = np.zeros(points.shape[0], dtype=int)
    flagged = set()
    for i in active:
        plan = plans[i]
        d2 = _distance_sq(grid, times, plan.ball)[tuple(points.T)]
        reach = plan.ball.radius(grid) + 2 * grid.h
        if np.any(d2 <= reach ** 2):
            flagged.add(i)
        closer = d2 < nearest
        nearest[closer] = d2[closer]
        nearest_ball[closer] = i
    flagged.update(int(i) for i in np.unique(nearest_ball))
    return sorted(flagged)


def _mode_deficit(state: SubsolutionState, region: CoverRegion) -> float:
    if region.mode == 'slice':
        return state.slice_deficit(region.time_index)
    return state.deficit


def _predicted_gain(state: SubsolutionState, plans: List[_WavePlan], region: CoverRegion, f_impl: float) -> float:
    """Lower bound sum (a F)^2 / (2 rho chi) (rho chi - |m|^2)^2 |B_inner| over the live balls

    Evaluated at the ball centres of the state before the step. F is the
    measured segment ratio and a the fraction of its segment a wave uses.
    """
    grid = state.grid
    dim = grid.n if region.mode == 'slice' else grid.n + 1
    total = 0.0
    for plan in plans:
        if plan.weight == 0.0:
            continue
        index = (plan.ball.time_index,) + tuple(plan.ball.spatial_index)
        rho = float(state.rho0.values[index[1:]])
        chi = float(state.chi[index[0]])
        m = state.m[(index[0], slice(None)) + index[1:]]
        gap = rho * chi - float(m @ m)
        used = plan.weight * plan.wave.amplitude / plan.reach
        inner = ball_volume(plan.wave.inner_fraction * plan.wave.radius, dim)
        total += (used * f_impl) ** 2 / (2.0 * rho * chi) * gap ** 2 * inner
    return total


def weak_drift(state: SubsolutionState, affected: np.ndarray, dm: np.ndarray, drift_tests=None) -> float:
    """Largest change of the pairing against a fixed set of tests caused by a perturbation"""
    if affected.size == 0:
        return 0.0
    grid = state.grid
    times = state.times
    if drift_tests is None:
        drift_tests = standard_test_basis(grid, times[0], times[-1], STANDARD_TEST_COUNT, STANDARD_TEST_SEED + 17)
    full = np.zeros(state.m.shape)
    full[affected] = dm
    drift = 0.0
    for test in drift_tests:
        phi = test.values(grid, times)
        drift = max(drift, abs(space_time_integral(np.sum(full * phi, axis=1), times)))
    return drift


def improvement_step(state: SubsolutionState, seed: int, k_min: int,
                     settings: ImprovementSettings = ImprovementSettings(),
                     region: CoverRegion = CoverRegion(), drift_tests=None) -> Tuple[SubsolutionState, GainReport]:
    """Add localized waves on a ball cover and accept the first verified frequency"""
    if k_min < 1:
        raise ImprovementError(f"k_min must be positive, got {k_min}")
    rng = step_rng(seed, 1)
    before = _mode_deficit(state, region)
    margin_now = float(np.min(state.hint_gap()))
    if before <= TOL_ALGEBRAIC:
        return state, GainReport(0.0, before, before, 0, margin_now, 0.0, mode=region.mode)

    balls = ball_cover(state, settings.cover_radius, seed, region)
    plans = _plan_waves(state, balls, settings, rng)
    if not plans:
        raise ImprovementError("No ball of the cover admits a wave")

    slice_index = region.time_index if region.mode == 'slice' else None
    max_cap = max(plan.k_cap for plan in plans)
    k = k_min
    accepted = None
    candidate = None
    while True:
        for plan in plans:
            plan.wave = dataclasses.replace(plan.wave, k=min(k, plan.k_cap))
        _choose_signs(state, plans, region.mode, slice_index)
        candidate, affected, dm = _perturbed(state, plans)
        bad = _violations(candidate)
        gain = _mode_deficit(state, region) - _mode_deficit(candidate, region)
        logger.debug(f"k={k}: {bad.shape[0]} violations, gain {gain:.3e}")
        if bad.shape[0] == 0 and gain > 0.0:
            accepted = (candidate, affected, dm)
            break
        if k >= max_cap:
            break
        k *= 2

    rounds = 0
    dropped = 0
    while accepted is None:
        if bad.shape[0] == 0:
            raise ImprovementError(f"Perturbation stays inside but gains nothing ({gain:.3e})")
        near = _balls_near(candidate, plans, bad)
        if rounds < settings.max_backoff:
            rounds += 1
            for i in near:
                plans[i].weight *= 0.5
            logger.info(f"Backoff round {rounds}: halving {len(near)} wave amplitudes")
        else:
            for i in near:
                plans[i].weight = 0.0
            dropped += len(near)
            logger.warning(f"Dropping {len(near)} balls after {rounds} backoff rounds")
            if all(plan.weight == 0.0 for plan in plans):
                raise ImprovementError("No admissible frequency below the grid cap: every ball was dropped")
        candidate, affected, dm = _perturbed(state, plans)
        bad = _violations(candidate)
        gain = _mode_deficit(state, region) - _mode_deficit(candidate, region)
        if bad.shape[0] == 0 and gain > 0.0:
            accepted = (candidate, affected, dm)

    new_state, affected, dm = accepted
    after = _mode_deficit(new_state, region)
    live = [plan for plan in plans if plan.weight > 0]
    f_impl = min(plan.segment.ratio for plan in live)
    report = GainReport(
        l2_gain=before - after,
        deficit_before=before,
        deficit_after=after,
        k_used=max(plan.wave.k for plan in live),
        hint_margin_min=float(np.min(new_state.hint_gap())),
        weak_drift=weak_drift(new_state, affected, dm, drift_tests),
        balls=len(live),
        balls_dropped=dropped,
        predicted_gain=_predicted_gain(state, plans, region, f_impl),
        f_impl=f_impl,
        backoff_rounds=rounds,
        mode=region.mode,
    )
    logger.info(f"Improvement: deficit {before:.6e} -> {after:.6e} with {report.balls} balls, k={report.k_used}")
    return new_state, report


def iterate(state: SubsolutionState, steps: int, seed: int, k_min: int,
            settings: ImprovementSettings = ImprovementSettings(), check: bool = True,
            on_step: Optional[Callable[[int, SubsolutionState, GainReport], None]] = None,
            first_step: int = 1) -> Tuple[SubsolutionState, List[GainReport]]:
    """Apply improvement steps in sequence, checking the state invariants after each"""
    if steps < 0:
        raise ImprovementError(f"steps must be nonnegative, got {steps}")
    reports: List[GainReport] = []
    for step in range(first_step, first_step + steps):
        state, report = improvement_step(state, int(step_rng(seed, step).integers(2 ** 63)), k_min, settings)
        if check:
            check_state(state, f"iterate step {step}")
        reports.append(report)
        if on_step is not None:
            on_step(step, state, report)
    return state, reports


def fit_beta(deficits: Sequence[float]) -> float:
    """Largest beta with D_{k+1} <= D_k - beta D_k^2 along the sequence"""
    ratios = [(a - b) / a ** 2 for a, b in zip(deficits[:-1], deficits[1:]) if a > 0]
    return min(ratios) if ratios else 0.0


def modulus_ratio(state: SubsolutionState) -> np.ndarray:
    """|m|^2 / (rho0 chi) at every sample"""
    n = state.grid.n
    expand = (slice(None),) + (None,) * n
    return np.sum(state.m ** 2, axis=1) / (state.rho0.values[None] * state.chi[expand])
