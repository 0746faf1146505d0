"""
Test-Driven Development tests for Task 003: Relaxation Geometry and Hull Decomposition
"""

import numpy as np
import pytest

from wildeuler.errors import GeometryError
from wildeuler.relaxation_geometry import (
    ConstraintParams, HullStatus, StateTriple, admissible_segment, distance_to_k,
    e_field, e_value, hull_decompose, in_hull, in_wave_cone, k_point, special_direction,
)


def random_trace_free(rng, count, n, scale=1.0):
    A = rng.uniform(-scale, scale, size=(count, n, n))
    S = 0.5 * (A + np.swapaxes(A, 1, 2))
    return S - np.trace(S, axis1=1, axis2=2)[:, None, None] / n * np.eye(n)


def hull_samples(rng, count, n, rho=1.0, chi=1.0):
    """Rejection samples with e(rho, m, U) < chi/n"""
    out_m, out_U = [], []
    while sum(len(m) for m in out_m) < count:
        m = rng.uniform(-1.0, 1.0, size=(4 * count, n)) * np.sqrt(rho * chi)
        U = random_trace_free(rng, 4 * count, n, scale=chi)
        keep = e_field(np.full(4 * count, rho), m, U) < chi / n
        out_m.append(m[keep])
        out_U.append(U[keep])
    return np.concatenate(out_m)[:count], np.concatenate(out_U)[:count]


class TestGeneralizedEnergy:
    """Test e(rho, m, U) and its structural bounds"""

    def test_examples(self):
        """Test the closed-form examples"""
        assert e_value(1.0, [0.0, 0.0], np.zeros((2, 2))) == 0.0
        assert e_value(1.0, [1.0, 0.0], np.diag([0.5, -0.5])) == pytest.approx(0.5)
        assert e_value(1.0, [1.0, 0.0], np.zeros((2, 2))) == pytest.approx(1.0)

    def test_nonpositive_density(self):
        """Test that rho <= 0 is a precondition violation"""
        with pytest.raises(GeometryError):
            e_value(0.0, [1.0, 0.0], np.zeros((2, 2)))

    @pytest.mark.parametrize('n', [2, 3])
    def test_eigenvalues_match_numpy(self, n):
        """Test the closed-form eigenvalues against eigvalsh"""
        rng = np.random.default_rng(10 + n)
        m = rng.standard_normal((500, n))
        U = random_trace_free(rng, 500, n)
        rho = rng.uniform(0.5, 2.0, 500)
        S = m[:, :, None] * m[:, None, :] / rho[:, None, None] - U
        expected = np.linalg.eigvalsh(S)[:, -1]
        assert np.max(np.abs(e_field(rho, m, U) - expected)) < 1e-10

    @pytest.mark.parametrize('n', [2, 3])
    def test_convexity(self, n):
        """Test e(t z1 + (1-t) z2) <= t e(z1) + (1-t) e(z2) on 10^4 samples"""
        rng = np.random.default_rng(20 + n)
        count = 10_000
        rho = rng.uniform(0.2, 3.0, count)
        m1, m2 = rng.standard_normal((count, n)), rng.standard_normal((count, n))
        U1, U2 = random_trace_free(rng, count, n, 2.0), random_trace_free(rng, count, n, 2.0)
        t = rng.uniform(0.0, 1.0, count)
        mix = e_field(rho, t[:, None] * m1 + (1 - t[:, None]) * m2,
                      t[:, None, None] * U1 + (1 - t[:, None, None]) * U2)
        chord = t * e_field(rho, m1, U1) + (1 - t) * e_field(rho, m2, U2)
        assert np.all(mix <= chord + 1e-12 * np.maximum(1.0, np.abs(chord)))

    @pytest.mark.parametrize('n', [2, 3])
    def test_lower_bound(self, n):
        """Test |m|^2/(n rho) <= e on 10^4 samples"""
        rng = np.random.default_rng(30 + n)
        count = 10_000
        rho = rng.uniform(0.2, 3.0, count)
        m = rng.standard_normal((count, n))
        U = random_trace_free(rng, count, n, 2.0)
        bound = np.sum(m ** 2, axis=1) / (n * rho)
        assert np.all(bound <= e_field(rho, m, U) + 1e-12 * np.maximum(1.0, bound))

    @pytest.mark.parametrize('n', [2, 3])
    def test_operator_norm_bound(self, n):
        """Test |U|_inf <= (n-1) e on 10^4 hull samples"""
        rng = np.random.default_rng(40 + n)
        m, U = hull_samples(rng, 10_000, n)
        e = e_field(np.ones(len(m)), m, U)
        op_norm = np.max(np.abs(np.linalg.eigvalsh(U)), axis=1)
        assert np.all(op_norm <= (n - 1) * e + 1e-12)


class TestHullMembership:
    """Test hull status and wave cone membership"""

    def test_status_examples(self):
        """Test interior, boundary and wrong pressure"""
        params = ConstraintParams(rho=1.0, chi=1.0, p_rho=0.3)
        q = params.q_target(2)
        assert in_hull(params, StateTriple(np.zeros(2), np.zeros((2, 2)), q)) is HullStatus.INSIDE_HINT
        assert in_hull(params, k_point(params, [1.0, 0.0])) is HullStatus.ON_BOUNDARY
        assert in_hull(params, StateTriple(np.zeros(2), np.zeros((2, 2)), 0.3)) is HullStatus.WRONG_PRESSURE
        assert in_hull(params, StateTriple([2.0, 0.0], np.zeros((2, 2)), q)) is HullStatus.OUTSIDE

    def test_k_point_has_zero_distance(self):
        """Test that K-points sit on K"""
        params = ConstraintParams(rho=2.0, chi=0.5)
        z = k_point(params, [0.6, 0.8])
        assert distance_to_k(params, z) < 1e-14

    def test_trace_is_checked(self):
        """Test that StateTriple rejects U with trace"""
        with pytest.raises(GeometryError):
            StateTriple(np.zeros(2), np.eye(2))

    def test_cone_examples(self):
        """Test the zero state, a degenerate matrix and a generic state"""
        assert in_wave_cone(StateTriple(np.zeros(2), np.zeros((2, 2))))
        assert in_wave_cone(StateTriple(np.zeros(2), np.diag([1.0, -1.0]), 1.0))
        assert not in_wave_cone(StateTriple([0.3, -0.2], np.array([[0.4, 0.1], [0.1, -0.4]]), 1.3))

    def test_special_direction_example(self):
        """Test c = (1, 0), d = (0, 1), rho = 1"""
        z = special_direction([1.0, 0.0], [0.0, 1.0], 1.0)
        assert np.array_equal(z.m, [1.0, -1.0])
        assert np.array_equal(z.U, np.diag([1.0, -1.0]))
        assert z.q == 0.0
        assert in_wave_cone(z)

    @pytest.mark.parametrize('n', [2, 3])
    def test_special_directions_lie_in_cone(self, n):
        """Test cone membership of 10^4 special directions"""
        rng = np.random.default_rng(50 + n)
        for _ in range(10_000):
            radius = rng.uniform(0.1, 3.0)
            c = rng.standard_normal(n)
            d = rng.standard_normal(n)
            c *= radius / np.linalg.norm(c)
            d *= radius / np.linalg.norm(d)
            assert in_wave_cone(special_direction(c, d, rng.uniform(0.2, 3.0)))

    def test_special_direction_preconditions(self):
        """Test unequal lengths and coinciding generators"""
        with pytest.raises(GeometryError):
            special_direction([1.0, 0.0], [0.0, 2.0], 1.0)
        with pytest.raises(GeometryError):
            special_direction([1.0, 0.0], [1.0, 0.0], 1.0)


class TestAdmissibleSegments:
    """Test segment construction inside the hyperinterior"""

    def test_segment_at_origin(self):
        """Test generators on the unit circle and endpoints inside"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        z = StateTriple(np.zeros(2), np.zeros((2, 2)), params.q_target(2))
        segment = admissible_segment(params, z, np.random.default_rng(0))
        c, d = segment.generators
        assert np.linalg.norm(c) == pytest.approx(1.0)
        assert np.linalg.norm(d) == pytest.approx(1.0)
        assert not np.allclose(c, d) and not np.allclose(c, -d)
        plus, minus = segment.endpoints()
        assert in_hull(params, plus) is HullStatus.INSIDE_HINT
        assert in_hull(params, minus) is HullStatus.INSIDE_HINT
        mid = StateTriple(0.5 * (plus.m + minus.m), 0.5 * (plus.U + minus.U), plus.q)
        assert mid.distance(z) < 1e-14

    def test_random_interior_points(self):
        """Test segment conditions and a positive length ratio on random centres"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        rng = np.random.default_rng(60)
        m, U = hull_samples(rng, 300, 2)
        for mi, Ui in zip(m, U):
            z = StateTriple(mi, Ui, params.q_target(2))
            segment = admissible_segment(params, z, rng, samples=64)
            c, d = segment.generators
            assert abs(c @ c - 1.0) < 1e-10 and abs(d @ d - 1.0) < 1e-10
            assert in_wave_cone(segment.direction)
            assert segment.ratio > 0.0
            for end in segment.endpoints():
                assert e_value(params.rho, end.m, end.U) < 0.5

    def test_boundary_centre_is_rejected(self):
        """Test that a K-point has no admissible segment"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        with pytest.raises(GeometryError):
            admissible_segment(params, k_point(params, [1.0, 0.0]), np.random.default_rng(1))


class TestHullDecomposition:
    """Test laminate decompositions into K-points"""

    def test_k_point_is_a_single_leaf(self):
        """Test that a point of K decomposes into itself"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        z = k_point(params, [0.6, 0.8])
        leaves = hull_decompose(params, z)
        assert len(leaves) == 1
        assert leaves[0][0] == 1.0

    def test_midpoint_recovers_endpoints(self):
        """Test that the midpoint of two K-points returns those points"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        c = np.array([np.cos(0.3), np.sin(0.3)])
        d = np.array([np.cos(2.1), np.sin(2.1)])
        a, b = k_point(params, c), k_point(params, d)
        z = StateTriple(0.5 * (a.m + b.m), 0.5 * (a.U + b.U), a.q)
        leaves = hull_decompose(params, z)
        assert len(leaves) == 2
        assert [w for w, _ in leaves] == pytest.approx([0.5, 0.5])
        momenta = sorted([tuple(p.m) for _, p in leaves])
        expected = sorted([tuple(c), tuple(d)])
        assert np.allclose(momenta, expected, atol=1e-10)

    def test_random_interior_points(self):
        """Test recombination and leaf count on 10^2 interior points"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        rng = np.random.default_rng(70)
        m, U = hull_samples(rng, 100, 2)
        for mi, Ui in zip(m, U):
            z = StateTriple(mi, Ui, params.q_target(2))
            leaves = hull_decompose(params, z, rng, max_depth=5)
            assert len(leaves) <= 2 ** 5
            recombined = sum(w * p.m for w, p in leaves)
            assert np.linalg.norm(recombined - z.m) <= 1e-6
            assert all(distance_to_k(params, p) <= 1e-6 for _, p in leaves)

    def test_outside_point_is_rejected(self):
        """Test that a point outside the hull cannot be decomposed"""
        params = ConstraintParams(rho=1.0, chi=1.0)
        with pytest.raises(GeometryError):
            hull_decompose(params, StateTriple([2.0, 0.0], np.zeros((2, 2)), params.q_target(2)))
