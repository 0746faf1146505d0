"""
Test-Driven Development tests for Task 001: Periodic Grid Fields, Spectral Operators and Field Dumps
"""

import numpy as np
import pytest

from wildeuler.errors import FieldDumpError, GridError
from wildeuler.field_dumps import read_dump, write_dump
from wildeuler.torus_fields import (
    GridSpec, ScalarGridField, SymMatrixGridField, TimeBump, TimeRamp, VectorGridField,
    forward_transform, full_to_sym, inverse_transform, mass_pairing, norms,
    space_time_integral, spectral_divergence, spectral_gradient, spectral_l2,
    spectral_laplacian, standard_test_basis, sym_to_full, weak_pairing,
)


@pytest.fixture
def grid():
    return GridSpec(n=2, N=32, dt=1.0 / 32, T=0.5)


class TestGridSpec:
    """Test grid validation and sampling"""

    def test_rejects_bad_dimension(self):
        """Test that only n = 2 and n = 3 are accepted"""
        with pytest.raises(GridError):
            GridSpec(n=4, N=16)

    def test_rejects_non_power_of_two(self):
        """Test that N must be a power of two"""
        with pytest.raises(GridError):
            GridSpec(n=2, N=24)

    def test_rejects_step_not_dividing_horizon(self):
        """Test that dt must divide T"""
        with pytest.raises(GridError):
            GridSpec(n=2, N=16, dt=0.3, T=1.0)

    def test_time_samples_are_exact_multiples(self, grid):
        """Test that time samples are integer multiples of dt"""
        times = grid.time_samples(-grid.steps, grid.steps)
        assert times.size == 2 * grid.steps + 1
        assert times[0] == -grid.T
        assert times[grid.steps] == 0.0
        assert np.array_equal(times[grid.steps:], -times[grid.steps::-1])


class TestSpectralOperators:
    """Test spectral derivatives and transforms"""

    def test_gradient_of_sine(self, grid):
        """Test grad sin(2 pi x1) = (2 pi cos(2 pi x1), 0)"""
        x1, _ = grid.coordinates()
        f = ScalarGridField(grid, np.sin(2 * np.pi * x1))
        g = spectral_gradient(f).values
        assert np.max(np.abs(g[0] - 2 * np.pi * np.cos(2 * np.pi * x1))) < 1e-10
        assert np.max(np.abs(g[1])) < 1e-10

    def test_laplacian_matches_divergence_of_gradient(self, grid):
        """Test div grad f = Laplacian f for a band-limited field"""
        x1, x2 = grid.coordinates()
        values = np.cos(2 * np.pi * (2 * x1 - x2)) + 0.3 * np.sin(2 * np.pi * 3 * x2)
        f = ScalarGridField(grid, values)
        lap = spectral_laplacian(f).values
        div_grad = spectral_divergence(spectral_gradient(f)).values
        expected = -4 * np.pi ** 2 * (5 * np.cos(2 * np.pi * (2 * x1 - x2))
                                      + 0.3 * 9 * np.sin(2 * np.pi * 3 * x2))
        assert np.max(np.abs(lap - div_grad)) < 1e-9
        assert np.max(np.abs(lap - expected)) < 1e-8

    def test_forward_transform_coefficients(self, grid):
        """Test that cos(2 pi x1) has coefficients 1/2 at k = (+-1, 0)"""
        x1, _ = grid.coordinates()
        c = forward_transform(ScalarGridField(grid, np.cos(2 * np.pi * x1)))
        assert abs(c.coefficient((1, 0)) - 0.5) < 1e-14
        assert abs(c.coefficient((-1, 0)) - 0.5) < 1e-14
        assert c.zero_mean
        assert c.is_hermitian()
        assert abs(spectral_l2(c) - np.sqrt(0.5)) < 1e-14

    def test_inverse_transform_recovers_values(self, grid):
        """Test inverse transform after forward transform"""
        rng = np.random.default_rng(1)
        f = ScalarGridField(grid, rng.standard_normal(grid.shape))
        assert np.max(np.abs(inverse_transform(forward_transform(f)).values - f.values)) < 1e-12

    def test_coefficient_outside_band_raises(self, grid):
        """Test that wavevectors outside -N/2 <= k < N/2 are rejected"""
        c = forward_transform(ScalarGridField(grid, np.ones(grid.shape)))
        with pytest.raises(GridError):
            c.coefficient((grid.N // 2, 0))

    def test_matrix_divergence_is_row_wise(self, grid):
        """Test div of diag(f, -f) is (d1 f, -d2 f)"""
        x1, x2 = grid.coordinates()
        f = np.sin(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
        U = SymMatrixGridField(grid, np.stack([f, np.zeros_like(f), -f]))
        div = spectral_divergence(U).values
        d1 = 2 * np.pi * np.cos(2 * np.pi * x1) * np.cos(2 * np.pi * x2)
        d2 = -2 * np.pi * np.sin(2 * np.pi * x1) * np.sin(2 * np.pi * x2)
        assert np.max(np.abs(div[0] - d1)) < 1e-10
        assert np.max(np.abs(div[1] + d2)) < 1e-10

    def test_trace_free_check(self, grid):
        """Test that a field with trace is rejected when declared trace-free"""
        ones = np.ones(grid.shape)
        with pytest.raises(GridError):
            SymMatrixGridField(grid, np.stack([ones, 0 * ones, ones]))
        field = SymMatrixGridField(grid, np.stack([ones, 0 * ones, ones]), trace_free=False)
        assert np.allclose(field.trace(), 2.0)

    def test_symmetric_storage(self):
        """Test upper-triangle storage against full matrices"""
        rng = np.random.default_rng(2)
        values = rng.standard_normal((6, 4, 4, 4))
        full = sym_to_full(values, 3)
        assert np.array_equal(full, np.swapaxes(full, 0, 1))
        assert full[0, 2, 1, 1, 1] == values[2, 1, 1, 1]
        assert np.array_equal(full_to_sym(full, 3), values)

    def test_norms(self, grid):
        """Test sup and L2 norms of constant fields"""
        f = VectorGridField(grid, np.stack([3 * np.ones(grid.shape), 4 * np.ones(grid.shape)]))
        result = norms(f)
        assert result['sup'] == pytest.approx(5.0)
        assert result['L2'] == pytest.approx(5.0)

    def test_non_finite_values_rejected(self, grid):
        """Test that NaN values are rejected"""
        values = np.zeros(grid.shape)
        values[0, 0] = np.nan
        with pytest.raises(GridError):
            ScalarGridField(grid, values)


class TestWeakPairings:
    """Test test functions and weak pairings"""

    def test_time_bump_derivative(self):
        """Test the closed-form bump derivative against central differences"""
        bump = TimeBump(0.25, 0.2)
        t = np.linspace(0.1, 0.4, 13)
        h = 1e-6
        fd = (bump.value(t + h) - bump.value(t - h)) / (2 * h)
        assert np.max(np.abs(fd - bump.derivative(t))) < 1e-6
        assert bump.value(np.array([0.25]))[0] == pytest.approx(1.0)
        assert bump.value(np.array([0.5]))[0] == 0.0

    def test_grid_aligned_bump_integrates_exactly(self):
        """Test that the trapezoid rule sees a zero integral of the derivative"""
        dt = 1.0 / 32
        times = dt * np.arange(0, 33)
        bump = TimeBump(16 * dt, 5 * dt)
        assert abs(space_time_integral(bump.derivative(times)[:, None], times)) < 1e-14
        exact = 5 * dt * 2 * 5.0 / 16.0
        assert space_time_integral(bump.value(times)[:, None], times) == pytest.approx(exact, rel=1e-12)

    def test_time_ramp(self):
        """Test the anchored ramp: 1 at its start, flat at both ends, near-exact trapezoid integral"""
        dt = 1.0 / 32
        times = dt * np.arange(0, 17)
        ramp = TimeRamp(0.0, 6 * dt)
        values = ramp.value(times)
        assert values[0] == 1.0
        assert np.all(values[6:] == 0.0)
        assert np.all(np.diff(values[:7]) < 0.0)
        t = np.linspace(0.01, 0.18, 11)
        h = 1e-6
        fd = (ramp.value(t + h) - ramp.value(t - h)) / (2 * h)
        assert np.max(np.abs(fd - ramp.derivative(t))) < 1e-5
        assert ramp.derivative(np.array([0.0, 6 * dt])).tolist() == [0.0, 0.0]
        assert space_time_integral(ramp.derivative(times)[:, None], times) == pytest.approx(-1.0, abs=1e-2)

    def test_anchored_basis_starts_at_one(self, grid):
        """Test that anchored test functions take their spatial values at t0"""
        times = grid.time_samples(0, grid.steps)
        for test in standard_test_basis(grid, 0.0, 0.5, 3, 6, anchored=True):
            assert isinstance(test.profile, TimeRamp)
            assert np.allclose(test.values(grid, times)[0], test.spatial.evaluate(grid))

    def test_space_time_integral_of_constant(self):
        """Test the trapezoid in time over a grid mean"""
        times = np.linspace(0.0, 2.0, 9)
        values = np.full((9, 8, 8), 3.0)
        assert space_time_integral(values, times) == pytest.approx(6.0)

    def test_constant_pressure_pairs_to_zero(self, grid):
        """Test that m = 0 with stress q I, q constant, pairs to zero"""
        times = grid.time_samples(0, grid.steps)
        m = VectorGridField(grid, np.zeros((times.size, 2) + grid.shape))
        stress = np.zeros((times.size, 2, 2) + grid.shape)
        stress[:, 0, 0] = stress[:, 1, 1] = 2.5
        for test in standard_test_basis(grid, times[0], times[-1], 8, 3):
            assert abs(weak_pairing(m, times, test, stress)) < 1e-12

    def test_stationary_mass_pairs_to_zero(self, grid):
        """Test that a time-independent density with m = 0 pairs to zero"""
        times = grid.time_samples(0, grid.steps)
        x1, _ = grid.coordinates()
        rho = ScalarGridField(grid, 2.0 + 0.5 * np.sin(2 * np.pi * x1))
        m = VectorGridField(grid, np.zeros((times.size, 2) + grid.shape))
        for test in standard_test_basis(grid, times[0], times[-1], 8, 4, components=1):
            assert abs(mass_pairing(rho, m, times, test)) < 1e-12

    def test_basis_is_seeded(self, grid):
        """Test that the same seed gives the same test functions"""
        a = standard_test_basis(grid, 0.0, 0.5, 4, 11)
        b = standard_test_basis(grid, 0.0, 0.5, 4, 11)
        for s, t in zip(a, b):
            assert np.array_equal(s.spatial.wavevectors, t.spatial.wavevectors)
            assert s.profile == t.profile

    def test_vector_pairing_rejects_scalar_test(self, grid):
        """Test that the momentum pairing needs a vector test"""
        times = grid.time_samples(0, grid.steps)
        m = VectorGridField(grid, np.zeros((times.size, 2) + grid.shape))
        scalar = standard_test_basis(grid, times[0], times[-1], 1, 5, components=1)[0]
        with pytest.raises(GridError):
            weak_pairing(m, times, scalar)


class TestFieldDumps:
    """Test the WFLD binary format"""

    def test_write_then_read(self, tmp_path):
        """Test that a dump reads back bit-exactly"""
        rng = np.random.default_rng(6)
        times = np.array([0.0, 0.125, 0.25])
        values = rng.standard_normal((3, 2, 8, 8))
        path = tmp_path / 'state_m.wfld'
        write_dump(path, times, values, 2)
        dump = read_dump(path)
        assert dump.n == 2 and dump.N == 8 and dump.components == 2
        assert np.array_equal(dump.times, times)
        assert np.array_equal(dump.values, values)

    def test_header_layout(self, tmp_path):
        """Test the magic and the total size"""
        path = tmp_path / 'x_m.wfld'
        write_dump(path, np.zeros(2), np.zeros((2, 1, 8, 8)), 2)
        raw = path.read_bytes()
        assert raw[:4] == b'WFLD'
        assert len(raw) == 24 + 8 * (2 + 2 * 64)

    def test_bad_magic(self, tmp_path):
        """Test that a wrong magic is rejected"""
        path = tmp_path / 'x_m.wfld'
        write_dump(path, np.zeros(1), np.zeros((1, 1, 8, 8)), 2)
        raw = bytearray(path.read_bytes())
        raw[:4] = b'XFLD'
        path.write_bytes(bytes(raw))
        with pytest.raises(FieldDumpError):
            read_dump(path)

    def test_bad_version(self, tmp_path):
        """Test that an unknown version is rejected"""
        path = tmp_path / 'x_m.wfld'
        write_dump(path, np.zeros(1), np.zeros((1, 1, 8, 8)), 2)
        raw = bytearray(path.read_bytes())
        raw[4] = 9
        path.write_bytes(bytes(raw))
        with pytest.raises(FieldDumpError):
            read_dump(path)

    def test_truncated_payload(self, tmp_path):
        """Test that a short payload is rejected"""
        path = tmp_path / 'x_m.wfld'
        write_dump(path, np.zeros(1), np.zeros((1, 1, 8, 8)), 2)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FieldDumpError):
            read_dump(path)
