"""
Pointwise geometry of the relaxed Euler inclusion

States are triples (m, U, q) with U symmetric and trace-free. The constraint
set K_{rho,chi} is {|m|^2 = rho*chi, U = m(x)m/rho - chi/n I, q = p(rho) + chi/n};
its convex hull is the chi/n sublevel set of e(rho, m, U) = lambda_max(m(x)m/rho - U).
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import null_space

from .constants import (
    BISECTION_STEPS, SEGMENT_SAMPLES, SEGMENT_SHRINK,
    TOL_ALGEBRAIC, TOL_DECOMPOSITION, TOL_GEOMETRIC,
)
from .errors import DecompositionError, GeometryError

logger = logging.getLogger('wildeuler.relaxation_geometry')


@dataclass(frozen=True, eq=False)
class StateTriple:
    m: np.ndarray
    U: np.ndarray
    q: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float).reshape(-1)
        U = np.asarray(self.U, dtype=float)
        if U.shape != (m.size, m.size):
            raise GeometryError(f"U of shape {U.shape} does not match m of size {m.size}")
        U = 0.5 * (U + U.T)
        scale = max(1.0, float(np.max(np.abs(U))) if U.size else 1.0)
        if abs(np.trace(U)) > TOL_ALGEBRAIC * scale:
            raise GeometryError(f"U is not trace-free (trace {np.trace(U):.3e})")
        object.__setattr__(self, 'm', m)
        object.__setattr__(self, 'U', U)
        object.__setattr__(self, 'q', float(self.q))

    @property
    def n(self) -> int:
        return self.m.size

    def __add__(self, other: 'StateTriple') -> 'StateTriple':
        return StateTriple(self.m + other.m, self.U + other.U, self.q + other.q)

    def __sub__(self, other: 'StateTriple') -> 'StateTriple':
        return StateTriple(self.m - other.m, self.U - other.U, self.q - other.q)

    def scaled(self, factor: float) -> 'StateTriple':
        return StateTriple(factor * self.m, factor * self.U, factor * self.q)

    def distance(self, other: 'StateTriple') -> float:
        return float(np.sqrt(np.sum((self.m - other.m) ** 2) + np.sum((self.U - other.U) ** 2)
                             + (self.q - other.q) ** 2))


@dataclass(frozen=True)
class ConstraintParams:
    rho: float
    chi: float
    p_rho: float = 0.0

    def __post_init__(self):
        if not self.rho > 0 or not self.chi > 0:
            raise GeometryError(f"Constraint parameters must be positive (rho={self.rho}, chi={self.chi})")

    def q_target(self, n: int) -> float:
        return self.p_rho + self.chi / n


class HullStatus(Enum):
    INSIDE_HINT = 'inside_hint'
    ON_BOUNDARY = 'on_boundary'
    OUTSIDE = 'outside'
    WRONG_PRESSURE = 'wrong_pressure'


@dataclass(frozen=True, eq=False)
class SpaceTimeMatrix:
    M: np.ndarray

    @classmethod
    def from_state(cls, z: StateTriple) -> 'SpaceTimeMatrix':
        n = z.n
        M = np.zeros((n + 1, n + 1))
        M[:n, :n] = z.U + z.q * np.eye(n)
        M[:n, n] = z.m
        M[n, :n] = z.m
        return cls(M)

    def det(self) -> float:
        return float(np.linalg.det(self.M))


@dataclass(frozen=True, eq=False)
class AdmissibleSegment:
    center: StateTriple
    direction: StateTriple
    generators: Tuple[np.ndarray, np.ndarray]
    ratio: float = 0.0

    def endpoints(self) -> Tuple[StateTriple, StateTriple]:
        return self.center + self.direction, self.center - self.direction


def sym_eigvals(S: np.ndarray) -> np.ndarray:
    """Closed-form eigenvalues of stacked symmetric 2x2 or 3x3 matrices, descending"""
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    if n == 2:
        a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 1, 1]
        mean = 0.5 * (a + c)
        radius = np.hypot(0.5 * (a - c), b)
        return np.stack([mean + radius, mean - radius], axis=-1)
    if n == 3:
        p1 = S[..., 0, 1] ** 2 + S[..., 0, 2] ** 2 + S[..., 1, 2] ** 2
        q = np.trace(S, axis1=-2, axis2=-1) / 3.0
        p2 = ((S[..., 0, 0] - q) ** 2 + (S[..., 1, 1] - q) ** 2 + (S[..., 2, 2] - q) ** 2
              + 2.0 * p1)
        p = np.sqrt(p2 / 6.0)
        safe_p = np.where(p > 0, p, 1.0)
        B = (S - q[..., None, None] * np.eye(3)) / safe_p[..., None, None]
        r = np.clip(np.linalg.det(B) / 2.0, -1.0, 1.0)
        phi = np.arccos(r) / 3.0
        top = q + 2.0 * p * np.cos(phi)
        bottom = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
        middle = 3.0 * q - top - bottom
        return np.stack([top, middle, bottom], axis=-1)
    raise GeometryError(f"Closed-form eigenvalues need n = 2 or 3, got {n}")


def e_field(rho, m: np.ndarray, U: np.ndarray) -> np.ndarray:
    """lambda_max(m(x)m/rho - U) for stacks: rho (...), m (..., n), U (..., n, n)"""
    rho = np.asarray(rho, dtype=float)
    S = m[..., :, None] * m[..., None, :] / rho[..., None, None] - U
    return sym_eigvals(S)[..., 0]


def e_value(rho: float, m, U) -> float:
    if not rho > 0:
        raise GeometryError(f"Density must be positive, got {rho}")
    return float(e_field(np.asarray(rho), np.asarray(m, dtype=float), np.asarray(U, dtype=float)))


def in_hull(params: ConstraintParams, z: StateTriple, tol: float = TOL_GEOMETRIC) -> HullStatus:
    n = z.n
    target = params.q_target(n)
    if abs(z.q - target) > tol * max(1.0, abs(target)):
        return HullStatus.WRONG_PRESSURE
    gap = e_value(params.rho, z.m, z.U) - params.chi / n
    if gap < -tol:
        return HullStatus.INSIDE_HINT
    if gap > tol:
        return HullStatus.OUTSIDE
    return HullStatus.ON_BOUNDARY


def in_wave_cone(z: StateTriple, tol: float = TOL_GEOMETRIC) -> bool:
    stm = SpaceTimeMatrix.from_state(z)
    scale = float(np.max(np.abs(stm.M)))
    return abs(stm.det()) <= tol * scale ** (z.n + 1)


def special_direction(c, d, rho: float) -> StateTriple:
    """(c - d, (c(x)c - d(x)d)/rho, 0) for |c| = |d|, c != d"""
    c = np.asarray(c, dtype=float)
    d = np.asarray(d, dtype=float)
    if not rho > 0:
        raise GeometryError(f"Density must be positive, got {rho}")
    norm = max(1.0, float(c @ c))
    if abs(c @ c - d @ d) > TOL_ALGEBRAIC * norm:
        raise GeometryError(f"Generators differ in length: |c|^2={c @ c}, |d|^2={d @ d}")
    if np.allclose(c, d, rtol=0.0, atol=TOL_ALGEBRAIC * np.sqrt(norm)):
        raise GeometryError("Generators coincide")
    return StateTriple(c - d, (np.outer(c, c) - np.outer(d, d)) / rho, 0.0)


def k_point(params: ConstraintParams, m) -> StateTriple:
    """The point of K_{rho,chi} with momentum m (|m|^2 = rho*chi assumed)"""
    m = np.asarray(m, dtype=float)
    n = m.size
    return StateTriple(m, np.outer(m, m) / params.rho - (m @ m) / (n * params.rho) * np.eye(n),
                       params.q_target(n))


def distance_to_k(params: ConstraintParams, z: StateTriple) -> float:
    """Distance to the K-point sharing the direction of m"""
    norm = np.linalg.norm(z.m)
    radius = np.sqrt(params.rho * params.chi)
    if norm == 0.0:
        direction = np.zeros(z.n)
        direction[0] = 1.0
    else:
        direction = z.m / norm
    return z.distance(k_point(params, radius * direction))


def defect_matrix(params: ConstraintParams, z: StateTriple) -> np.ndarray:
    """chi/n I - (m(x)m/rho - U); positive semidefinite on the hull, zero exactly on K"""
    n = z.n
    return params.chi / n * np.eye(n) - (np.outer(z.m, z.m) / params.rho - z.U)


def _unit_vectors(rng: np.random.Generator, count: int, n: int) -> np.ndarray:
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _orthogonal_units(rng: np.random.Generator, axis: np.ndarray, count: int) -> np.ndarray:
    """Random unit vectors orthogonal to `axis`"""
    basis = null_space(axis[None, :])
    coeffs = _unit_vectors(rng, count, basis.shape[1])
    return coeffs @ basis.T


def _candidate_generators(params: ConstraintParams, z: StateTriple, rng: np.random.Generator,
                          samples: int) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform pairs on the sphere |c|^2 = rho*chi plus pairs aligned with the defect eigenvectors"""
    n = z.n
    radius = np.sqrt(params.rho * params.chi)
    cs = [radius * _unit_vectors(rng, samples, n)]
    ds = [radius * _unit_vectors(rng, samples, n)]

    _, vectors = np.linalg.eigh(defect_matrix(params, z))
    per_axis = max(4, samples // 32)
    for u in vectors.T:
        a = float(u @ z.m)
        if radius ** 2 - a ** 2 <= 0.0:
            continue
        b = np.sqrt(radius ** 2 - a ** 2)
        w = _orthogonal_units(rng, u, per_axis)
        cs.append(a * u + b * w)
        ds.append(a * u - b * w)

    slack = radius ** 2 - z.m @ z.m
    if slack > 0.0:
        axis = z.m if np.linalg.norm(z.m) > 0 else np.eye(n)[0]
        v = np.sqrt(slack) * _orthogonal_units(rng, axis, per_axis)
        cs.append(z.m + v)
        ds.append(z.m - v)

    c = np.concatenate(cs)
    d = np.concatenate(ds)
    tiny = 1e-6 * radius
    keep = (np.linalg.norm(c - d, axis=1) > tiny) & (np.linalg.norm(c + d, axis=1) > tiny)
    return c[keep], d[keep]


def _exit_parameter(params: ConstraintParams, z: StateTriple, dm: np.ndarray,
                    dU: np.ndarray, sign: float) -> np.ndarray:
    """Largest t with e(z + sign*t*direction) < chi/n, by bisection, per candidate"""
    level = params.chi / z.n
    radius = np.sqrt(params.rho * params.chi)
    lo = np.zeros(dm.shape[0])
    # Beyond this |m| alone exceeds the sphere, so e >= chi/n
    hi = (radius + np.linalg.norm(z.m)) / np.linalg.norm(dm, axis=1)
    rho = np.full(dm.shape[0], params.rho)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        m = z.m + sign * mid[:, None] * dm
        U = z.U + sign * mid[:, None, None] * dU
        inside = e_field(rho, m, U) < level
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return lo


def admissible_segment(params: ConstraintParams, z: StateTriple, rng: np.random.Generator,
                       samples: int = SEGMENT_SAMPLES, shrink: float = SEGMENT_SHRINK) -> AdmissibleSegment:
    """Longest admissible segment centred at z found among the candidate generator pairs"""
    if in_hull(params, z) is not HullStatus.INSIDE_HINT:
        raise GeometryError("Admissible segments need a centre in the hyperinterior")

    c, d = _candidate_generators(params, z, rng, samples)
    dm = c - d
    dU = (c[:, :, None] * c[:, None, :] - d[:, :, None] * d[:, None, :]) / params.rho
    t_star = np.minimum(_exit_parameter(params, z, dm, dU, 1.0),
                        _exit_parameter(params, z, dm, dU, -1.0))
    half_length = t_star * np.linalg.norm(dm, axis=1)
    best = int(np.argmax(half_length))

    t = shrink * t_star[best]
    direction = StateTriple(t * dm[best], t * dU[best], 0.0)
    segment_m = np.linalg.norm(direction.m)
    deficit = params.rho * params.chi - z.m @ z.m
    ratio = segment_m * np.sqrt(params.rho * params.chi) / deficit if deficit > 0 else np.inf

    segment = AdmissibleSegment(z, direction, (c[best].copy(), d[best].copy()), float(ratio))
    for end in segment.endpoints():
        if e_value(params.rho, end.m, end.U) >= params.chi / z.n:
            raise GeometryError("Segment endpoint left the hyperinterior")
    return segment


def hull_decompose(params: ConstraintParams, z: StateTriple, rng: Optional[np.random.Generator] = None,
                   max_depth: int = 8, tol: float = TOL_DECOMPOSITION) -> List[Tuple[float, StateTriple]]:
    """Write z as a finite laminate of K-points

    The defect matrix D loses at least one rank per symmetric split, and a
    rank-one defect is the barycentre of two K-points on a line, so the
    recursion ends after at most n levels.
    """
    status = in_hull(params, z)
    if status in (HullStatus.OUTSIDE, HullStatus.WRONG_PRESSURE):
        raise GeometryError(f"Cannot decompose a point with status {status.value}")

    n = z.n
    radius_sq = params.rho * params.chi
    rank_tol = TOL_GEOMETRIC * params.chi
    leaves: List[Tuple[float, StateTriple]] = []

    def split(point: StateTriple, weight: float, depth: int):
        if depth > max_depth:
            raise DecompositionError(f"Hull decomposition exceeded depth {max_depth}")
        D = defect_matrix(params, point)
        values, vectors = np.linalg.eigh(0.5 * (D + D.T))
        positive = values > rank_tol
        if np.trace(D) <= rank_tol or not np.any(positive):
            leaves.append((weight, point))
            return

        if np.count_nonzero(positive) == 1:
            u = vectors[:, np.argmax(values)]
            a = float(u @ point.m)
            root = np.sqrt(max(a * a - point.m @ point.m + radius_sq, 0.0))
            s_plus, s_minus = -a + root, -a - root
            c = point.m + s_plus * u
            d = point.m + s_minus * u
            mu = -s_minus / (s_plus - s_minus)
            step = special_direction(c, d, params.rho)
            leaves.append((weight * mu, point + step.scaled(1.0 - mu)))
            leaves.append((weight * (1.0 - mu), point - step.scaled(mu)))
            return

        basis = vectors[:, positive]
        kernel = null_space((basis.T @ point.m)[None, :])
        if rng is not None and kernel.shape[1] > 1:
            coeff = kernel @ _unit_vectors(rng, 1, kernel.shape[1])[0]
        else:
            coeff = kernel[:, 0]
        v = basis @ coeff
        v *= np.sqrt(radius_sq - point.m @ point.m) / np.linalg.norm(v)
        projected = basis.T @ v
        reach = 1.0 / np.sum(projected ** 2 / values[positive])
        t = 0.5 * np.sqrt(reach * params.rho)
        step = special_direction(point.m + v, point.m - v, params.rho).scaled(t)
        split(point + step, 0.5 * weight, depth + 1)
        split(point - step, 0.5 * weight, depth + 1)

    split(z, 1.0, 0)

    total = sum(w for w, _ in leaves)
    recombined_m = sum(w * p.m for w, p in leaves)
    recombined_U = sum(w * p.U for w, p in leaves)
    error = np.sqrt(np.sum((recombined_m - z.m) ** 2) + np.sum((recombined_U - z.U) ** 2))
    if abs(total - 1.0) > 1e-8 or error > tol:
        raise DecompositionError(f"Recombination error {error:.3e} exceeds {tol:.1e}")
    worst = max(distance_to_k(params, p) for _, p in leaves)
    if worst > tol:
        raise DecompositionError(f"Leaf at distance {worst:.3e} from K")
    logger.debug(f"Decomposed into {len(leaves)} leaves, recombination error {error:.2e}")
    return leaves
