"""
Test-Driven Development tests for Task 004: Stationary and Flat Subsolutions
"""

import numpy as np
import pytest

from wildeuler.admissibility import PolytropicLaw
from wildeuler.errors import SubsolutionError
from wildeuler.oscillation import fit_beta
from wildeuler.subsolution import (
    approximate_flat_subsolution, build_stationary_subsolution, choose_chi,
    density_field, initial_state, state_residuals, sub_cube_side, time_symmetric_data,
)
from wildeuler.torus_fields import GridSpec

SADDLE_MODES = [{'k': [1, 1], 'sin': 0.25}, {'k': [1, -1], 'sin': 0.25}]


@pytest.fixture
def law():
    return PolytropicLaw(k=1.0, gamma=2.0)


@pytest.fixture
def small_grid():
    return GridSpec(n=2, N=32, dt=1.0 / 32, T=0.5)


class TestDensity:
    """Test density construction"""

    def test_saddle_modes(self):
        """Test that the two sine modes give 2 + sin(2 pi x1) cos(2 pi x2) / 2"""
        grid = GridSpec(n=2, N=32)
        x1, x2 = grid.coordinates()
        rho = density_field(grid, 2.0, SADDLE_MODES)
        expected = 2.0 + 0.5 * np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
        assert np.max(np.abs(rho.values - expected)) < 1e-14

    def test_nonpositive_density(self):
        """Test that a density touching zero is rejected"""
        with pytest.raises(SubsolutionError):
            density_field(GridSpec(n=2, N=16), 0.5, [{'k': [1, 0], 'cos': 0.5}])


class TestStationarySubsolution:
    """Test the stationary relation div U + grad p(rho0) = 0"""

    def test_acceptance_residual(self, law):
        """Test the residual at N = 64 for the saddle density"""
        grid = GridSpec(n=2, N=64, dt=1.0 / 64, T=0.5)
        stat = build_stationary_subsolution(density_field(grid, 2.0, SADDLE_MODES), law)
        assert stat.residual <= 1e-8
        assert stat.sign in (1, -1)
        assert stat.lambda_tilde > 0.0
        assert np.max(np.abs(stat.U_tilde.trace())) <= 1e-12

    def test_constant_density(self, law):
        """Test that a constant density needs no stress"""
        grid = GridSpec(n=2, N=16)
        stat = build_stationary_subsolution(density_field(grid, 1.5), law, chi_margin=1.5, chi_floor=1.0)
        assert np.max(np.abs(stat.U_tilde.values)) < 1e-12
        assert stat.lambda_tilde == 0.0
        assert stat.chi_profile.chi0 == pytest.approx(1.5)

    def test_single_cosine_is_diagonal(self, law):
        """Test that a density in x1 only gives U11 = -(p - mean p), U22 = -U11, U12 = 0"""
        grid = GridSpec(n=2, N=32)
        x1, _ = grid.coordinates()
        rho = density_field(grid, 2.0, [{'k': [1, 0], 'cos': 0.5}])
        stat = build_stationary_subsolution(rho, law)
        p = (2.0 + 0.5 * np.cos(2 * np.pi * x1)) ** 2
        U11, U12, U22 = stat.U_tilde.values
        assert np.max(np.abs(U12)) < 1e-12
        assert np.max(np.abs(U22 + U11)) < 1e-12
        assert np.max(np.abs(U11 + p - np.mean(p))) < 1e-10
        assert stat.sign == -1

    def test_q_tilde_offsets_pressure(self, law):
        """Test q_tilde(t) = p(rho0) + chi/n"""
        grid = GridSpec(n=2, N=16)
        stat = build_stationary_subsolution(density_field(grid, 2.0, [{'k': [0, 1], 'sin': 0.3}]), law)
        q = stat.q_tilde(np.array([0.0, 0.25]))
        assert q.shape == (2,) + grid.shape
        assert np.allclose(q[0] - stat.pressure.values, stat.chi_profile.chi0 / 2)


class TestChoiceOfChi:
    """Test the constant chi above the hyperinterior threshold"""

    def test_threshold_branch(self):
        """Test chi = margin * n * lambda when that exceeds the floor"""
        assert choose_chi(1.0, 1.5, 1.0, n=2).chi0 == pytest.approx(3.0)

    def test_floor_branch(self):
        """Test chi = margin * floor for small lambda"""
        profile = choose_chi(0.1, 1.5, 1.0, n=2, floor=1.0)
        assert profile.chi0 == pytest.approx(1.5)
        assert profile.branch == 'constant'
        assert np.allclose(profile(np.linspace(0.0, 1.0, 5)), 1.5)

    def test_margin_must_exceed_one(self):
        """Test that margin <= 1 is rejected"""
        with pytest.raises(SubsolutionError):
            choose_chi(1.0, 1.0, 1.0)


class TestSubsolutionState:
    """Test time families built from the stationary subsolution"""

    def test_initial_state_passes_checks(self, law, small_grid):
        """Test the residual table of m = 0, U = U_tilde"""
        stat = build_stationary_subsolution(density_field(small_grid, 2.0, SADDLE_MODES), law)
        state = initial_state(stat, small_grid.time_samples(0, small_grid.steps))
        residuals = state_residuals(state)
        assert residuals.divergence == 0.0
        assert residuals.weak_momentum <= 1e-8
        assert residuals.weak_mass <= 1e-8
        assert residuals.hint_margin > 0.0
        assert residuals.passed
        rho_mean = float(np.mean(stat.rho0.values))
        assert state.deficit == pytest.approx(rho_mean * stat.chi_profile.chi0 * small_grid.T)

    def test_time_symmetric_reflection(self, law, small_grid):
        """Test that [0, T] is kept and (T, 2T] is the branch [-T, 0) shifted by 2T"""
        stat = build_stationary_subsolution(density_field(small_grid, 2.0, SADDLE_MODES), law)
        M = small_grid.steps
        flat = initial_state(stat, small_grid.time_samples(-M, M))
        _, x2 = small_grid.coordinates()
        profile = np.cos(np.pi * flat.times / small_grid.T)
        m = np.zeros_like(flat.m)
        m[:, 0] = 0.01 * profile[:, None, None] * np.sin(2 * np.pi * x2)
        flat = flat.with_fields(m, flat.U)

        data = time_symmetric_data(flat, small_grid.T)
        assert data.times[0] == 0.0 and data.times[-1] == pytest.approx(2 * small_grid.T)
        for j in (0, 3, M):
            assert np.array_equal(data.m[j], flat.m[M + j])
        for j in (M + 1, 2 * M):
            assert np.array_equal(data.m[j], flat.m[j - M])

    def test_seam_mismatch(self, law, small_grid):
        """Test that branches disagreeing at t = +-T are rejected"""
        stat = build_stationary_subsolution(density_field(small_grid, 2.0, SADDLE_MODES), law)
        M = small_grid.steps
        flat = initial_state(stat, small_grid.time_samples(-M, M))
        m = flat.m.copy()
        m[-1, 0] += 1e-6
        with pytest.raises(SubsolutionError):
            time_symmetric_data(flat.with_fields(m, flat.U), small_grid.T)

    def test_sub_cube_side(self):
        """Test |Q minus Q_k| = 2^-k"""
        for k in (1, 2, 5):
            assert 1.0 - sub_cube_side(k, 3) ** 3 == pytest.approx(2.0 ** (-k))


class TestFlatSubsolution:
    """Test the localized improvement around t = 0"""

    def test_zero_iterations(self, law, small_grid):
        """Test that no iterations return the stationary state"""
        stat = build_stationary_subsolution(density_field(small_grid, 2.0, SADDLE_MODES), law)
        flat = approximate_flat_subsolution(stat, 0, seed=5)
        assert len(flat.alphas) == 1
        assert np.max(np.abs(flat.state.m)) == 0.0
        expected = float(np.mean(stat.rho0.values)) * stat.chi_profile.chi0
        assert flat.deficit_at_zero == pytest.approx(expected)

    def test_one_iteration_lowers_the_deficit(self, law, small_grid):
        """Test alpha_1 < alpha_0 with every invariant checked"""
        stat = build_stationary_subsolution(density_field(small_grid, 2.0, SADDLE_MODES), law)
        flat = approximate_flat_subsolution(stat, 1, seed=5, check=True)
        assert len(flat.alphas) == 2
        assert flat.alphas[1] < flat.alphas[0]
        assert flat.beta_impl > 0.0
        assert flat.beta_impl == fit_beta(flat.alphas)
        M = small_grid.steps
        assert np.max(np.abs(flat.state.m[0] - flat.state.m[-1])) <= 1e-10
        assert flat.to_dict()['truncated_at'] is None
        assert flat.state.times.size == 2 * M + 1

    def test_negative_iterations(self, law, small_grid):
        """Test that iters < 0 is rejected"""
        stat = build_stationary_subsolution(density_field(small_grid, 2.0, SADDLE_MODES), law)
        with pytest.raises(SubsolutionError):
            approximate_flat_subsolution(stat, -1, seed=5)
