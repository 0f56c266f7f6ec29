import numpy as np
import pytest

from pmlab import cache as pmcache
from pmlab.grid import GradedGrid, GridDensity
from pmlab.maps import ConstantSchedule, apply_map
from pmlab.observables import Identity
from pmlab.transfer import (
    OperatorFactory,
    apply_transfer_pointwise,
    build_ulam,
    check_cone,
    decay_curve,
    duality_gap,
    dyadic_subset,
    fit_loglog_slope,
    lower_bound_scan,
)


@pytest.fixture(scope="module")
def grid():
    return GradedGrid(512, 2.0)


@pytest.fixture(scope="module")
def op(grid):
    return build_ulam(0.2, grid)


def _graded_quadrature(func, n_segments=64, order=20):
    """int_0^1 func on segments graded toward 0, where the left-branch
    preimage carries an x^(1+beta) fractional-power singularity that stalls
    a single global Gauss rule."""
    # segments graded toward 0, split at the branch point 1/2
    cuts = np.union1d((np.arange(n_segments + 1) / n_segments) ** 4, [0.5])
    nodes, weights = np.polynomial.legendre.leggauss(order)
    a, b = cuts[:-1], cuts[1:]
    total = 0.0
    for t, w in zip(nodes, weights):
        x = 0.5 * (a + b) + 0.5 * (b - a) * t
        total += w * np.dot(0.5 * (b - a), np.asarray(func(x)))
    return float(total)


class TestPointwiseTransfer:
    def test_duality_by_quadrature(self):
        """int g . Pf == int (g o T) . f for smooth f, g, both sides by
        graded composite quadrature (independent of the Ulam machinery)."""
        beta = 0.3
        f = lambda x: 1.0 + 0.5 * np.sin(2.0 * x)
        g = lambda x: np.cos(3.0 * x)
        lhs = _graded_quadrature(
            lambda x: g(x) * apply_transfer_pointwise(beta, f, x))
        rhs = _graded_quadrature(lambda x: g(apply_map(beta, x)) * f(x))
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_preserves_constant_mass(self):
        # P1 integrates to 1: 1/T'(z) + 1/2 over (0, 1]
        beta = 0.2
        total = _graded_quadrature(
            lambda x: apply_transfer_pointwise(beta, lambda z: np.ones_like(z), x))
        assert total == pytest.approx(1.0, abs=1e-12)


class TestUlam:
    def test_column_stochastic(self, op):
        assert np.allclose(op.column_sums(), 1.0, atol=1e-12)

    def test_preserves_mass(self, grid, op):
        rng = np.random.default_rng(0)
        d = GridDensity(grid, rng.random(grid.n_cells))
        out = op.transform(d)
        assert out.total_mass == pytest.approx(d.total_mass, abs=1e-13)

    def test_matches_pointwise_transfer_on_smooth_density(self, grid, op):
        f = lambda x: 1.0 + 0.3 * np.cos(2.0 * x)
        d = GridDensity.from_callable(grid, f)
        out = op.transform(d)
        # compare away from 0 where the density is smooth
        sel = grid.midpoints > 0.05
        exact = apply_transfer_pointwise(op.beta, f, grid.midpoints[sel])
        # cell-average vs pointwise agree to the discretization order
        assert np.max(np.abs(out.values[sel] - exact)) < 1e-3

    def test_exact_pushforward_of_cell_mass(self, grid, op):
        # a single-cell spike keeps its mass exactly
        j = grid.n_cells // 2
        v = np.zeros(grid.n_cells)
        v[j] = 1.0 / grid.widths[j]
        out = op.apply_values(v)
        assert np.dot(out, grid.widths) == pytest.approx(1.0, abs=1e-13)

    def test_grid_mismatch_rejected(self, op):
        other = GridDensity.ones(GradedGrid(128, 2.0))
        with pytest.raises(ValueError):
            op.transform(other)


class TestDualityGap:
    def test_small_and_shrinking(self):
        f = lambda x: 1.0 + 0.5 * np.cos(3.0 * x)
        g = lambda x: np.sin(2.0 * x) + x**2
        gaps = [duality_gap(0.2, GradedGrid(n, 2.0), f, g) for n in (256, 1024)]
        assert gaps[1] < gaps[0] / 4.0
        assert gaps[1] < 1e-6

    def test_operator_mismatch_rejected(self, grid, op):
        with pytest.raises(ValueError):
            duality_gap(0.3, grid, np.sin, np.cos, op=op)


class TestFactoryAndCache:
    def test_lru_identity(self, grid):
        factory = OperatorFactory(grid)
        assert factory(0.2) is factory(0.2)

    def test_disk_roundtrip_bit_identical(self, grid, tmp_path):
        factory = OperatorFactory(grid, cache_dir=tmp_path)
        fresh = factory(0.3).matrix
        factory2 = OperatorFactory(grid, cache_dir=tmp_path)
        cached = factory2(0.3).matrix
        assert np.array_equal(fresh, cached)

    def test_corrupt_cache_rebuilt(self, grid, tmp_path):
        factory = OperatorFactory(grid, cache_dir=tmp_path)
        good = factory(0.25).matrix
        path = pmcache.matrix_path(tmp_path, 0.25, grid.n_cells, grid.rho)
        raw = bytearray(path.read_bytes())
        raw[5] ^= 0xFF  # clobber the magic
        path.write_bytes(bytes(raw))
        rebuilt = OperatorFactory(grid, cache_dir=tmp_path)(0.25).matrix
        assert np.array_equal(good, rebuilt)

    def test_truncated_payload_detected(self, grid, tmp_path):
        factory = OperatorFactory(grid, cache_dir=tmp_path)
        factory(0.4)
        path = pmcache.matrix_path(tmp_path, 0.4, grid.n_cells, grid.rho)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(pmcache.CacheCorruption):
            pmcache.load_matrix(path, 0.4, grid.n_cells, grid.rho)


class TestCone:
    def test_lebesgue_density_in_cone(self, grid):
        rep = check_cone(GridDensity.ones(grid), a=2.0, alpha=0.2)
        assert rep.passed

    def test_pushforward_stays_in_cone(self, grid):
        factory = OperatorFactory(grid)
        d = GridDensity.ones(grid)
        for beta in (0.1, 0.2, 0.15, 0.2, 0.1):
            d = factory(beta).transform(d)
            assert check_cone(d, a=2.0, alpha=0.2).passed

    def test_detects_violations(self, grid):
        increasing = GridDensity(grid, np.linspace(0.5, 1.5, grid.n_cells))
        rep = check_cone(increasing, a=60.0, alpha=0.2)
        assert not rep.is_decreasing and not rep.passed
        assert rep.worst_increase > 0.0

    def test_smallest_admissible_a(self, grid):
        d = GridDensity.ones(grid)
        rep = check_cone(d, a=0.5, alpha=0.2)
        # constant 1 needs a >= max x^alpha = 1
        assert not rep.bound_ok
        assert rep.smallest_admissible_a == pytest.approx(1.0, abs=1e-2)


class TestScans:
    def test_lower_bound_positive_and_settling(self):
        grid = GradedGrid(256, 2.0)
        ns, minima = lower_bound_scan(ConstantSchedule(0.2), 200, grid)
        assert minima.min() > 0.0
        tail = minima[-50:]
        assert (tail.max() - tail.min()) / tail.min() < 1e-10

    def test_invariant_density_slope_near_zero(self):
        """Stationary density behaves like x^(-beta) near 0; the measured
        log-log slope on [1e-4, 1e-2] at beta = 0.2 is -0.150 +/- 0.02
        (cross-checked against a 2e7-step orbit histogram, -0.157; the
        asymptotic exponent -0.2 carries slow corrections on this window)."""
        beta = 0.2
        grid = GradedGrid(4096, 8.0)
        values = np.ones(grid.n_cells)
        op = build_ulam(beta, grid)
        for _ in range(400):
            values = op.apply_values(values)
        sel = (grid.midpoints >= 1e-4) & (grid.midpoints <= 1e-2)
        slope = np.polyfit(np.log(grid.midpoints[sel]), np.log(values[sel]), 1)[0]
        assert slope == pytest.approx(-0.150, abs=0.02)

    def test_decay_curve_rejects_bad_p(self):
        grid = GradedGrid(64, 2.0)
        h = GridDensity.ones(grid)
        sched = ConstantSchedule(0.3, alpha_cap=0.4)
        with pytest.raises(ValueError, match="1 <= p < 1/alpha_cap"):
            decay_curve(sched, Identity(), h, 3.0, 10)

    def test_decay_curve_decreases(self):
        grid = GradedGrid(256, 4.0)
        h = GridDensity.ones(grid)
        ns, norms = decay_curve(ConstantSchedule(0.2), Identity(), h, 1.0, 100)
        assert norms[-1] < norms[0]

    def test_dyadic_subset(self):
        ns = np.arange(1, 101)
        idx = dyadic_subset(ns, 4, 100)
        assert list(ns[idx]) == [4, 6, 8, 12, 16, 24, 32, 48, 64, 96]

    def test_fit_slope_on_powerlaw(self):
        ns = np.arange(1, 300)
        vals = 7.0 * ns ** -1.5
        assert fit_loglog_slope(ns, vals, (4, 256)) == pytest.approx(-1.5, abs=1e-12)

    def test_fit_needs_three_points(self):
        with pytest.raises(ValueError):
            fit_loglog_slope(np.arange(1, 10), np.ones(9), (7, 9))
