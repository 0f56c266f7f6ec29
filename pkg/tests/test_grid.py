import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmlab.grid import GradedGrid, GridDensity


class TestGradedGrid:
    def test_cuts_structure(self):
        g = GradedGrid(64, 2.0)
        assert g.cuts[0] == 0.0 and g.cuts[-1] == 1.0
        assert np.all(np.diff(g.cuts) > 0.0)
        assert g.widths.sum() == pytest.approx(1.0, abs=1e-15)

    def test_uniform_when_rho_is_one(self):
        g = GradedGrid(10, 1.0)
        assert np.allclose(g.widths, 0.1)

    def test_grading_concentrates_near_zero(self):
        g = GradedGrid(100, 3.0)
        assert g.widths[0] < g.widths[-1] / 100

    def test_rejects_bad_parameters(self):
        with pytest.raises(ValueError):
            GradedGrid(1, 2.0)
        with pytest.raises(ValueError):
            GradedGrid(10, 0.5)

    def test_equality_by_spec(self):
        assert GradedGrid(32, 2.0) == GradedGrid(32, 2.0)
        assert GradedGrid(32, 2.0) != GradedGrid(32, 3.0)
        assert hash(GradedGrid(32, 2.0)) == hash(GradedGrid(32, 2.0))

    def test_arrays_read_only(self):
        g = GradedGrid(8, 2.0)
        with pytest.raises(ValueError):
            g.cuts[0] = 0.5

    @given(st.floats(min_value=0.0, max_value=1.0))
    @settings(max_examples=100)
    def test_cell_index_contains_point(self, x):
        g = GradedGrid(37, 2.5)
        i = int(g.cell_index(x))
        assert g.cuts[i] <= x or x == 0.0
        assert x <= g.cuts[i + 1] or i == g.n_cells - 1

    def test_integrate_polynomial(self):
        g = GradedGrid(256, 2.0)
        vals = g.average(lambda x: 3.0 * x**2)
        # cell averages of x^2 integrate to 1/1 exactly up to quadrature
        assert g.integrate(vals) == pytest.approx(1.0, abs=1e-12)

    def test_average_exact_for_cubics(self):
        # Gauss-Legendre order 4 integrates cubics exactly per cell
        g = GradedGrid(16, 1.0)
        vals = g.average(lambda x: x**3)
        a, b = g.cuts[:-1], g.cuts[1:]
        exact = (b**4 - a**4) / (4.0 * (b - a))
        assert np.allclose(vals, exact, atol=1e-15)


class TestGridDensity:
    def test_ones(self):
        d = GridDensity.ones(GradedGrid(16, 2.0))
        assert d.total_mass == pytest.approx(1.0, abs=1e-15)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            GridDensity(GradedGrid(16, 2.0), np.ones(15))

    def test_clips_tiny_negatives(self):
        g = GradedGrid(4, 1.0)
        v = np.array([1.0, -1e-13, 1.0, 1.0])
        d = GridDensity(g, v, require_nonnegative=True)
        assert d.values[1] == 0.0

    def test_rejects_real_negatives(self):
        g = GradedGrid(4, 1.0)
        with pytest.raises(ValueError):
            GridDensity(g, np.array([1.0, -1e-3, 1.0, 1.0]),
                        require_nonnegative=True)

    def test_lp_norm(self):
        g = GradedGrid(8, 1.0)
        d = GridDensity(g, np.full(8, 2.0))
        assert d.lp_norm(1.0) == pytest.approx(2.0)
        assert d.lp_norm(2.0) == pytest.approx(2.0)

    def test_from_callable_mass(self):
        g = GradedGrid(512, 4.0)
        alpha = 0.2
        d = GridDensity.from_callable(
            g, lambda x: (1 - alpha) * np.maximum(x, 1e-300) ** (-alpha))
        assert d.total_mass == pytest.approx(1.0, abs=1e-3)
