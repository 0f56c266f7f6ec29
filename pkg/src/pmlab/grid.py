"""Graded partitions of [0, 1] and piecewise-constant (cell-average) densities.

The grading t_i = (i/N)**rho concentrates cells near 0, where cone densities
carry an x**(-alpha) singularity; rho = 1 recovers the uniform grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = ["GradedGrid", "GridDensity"]


@dataclass(frozen=True)
class GradedGrid:
    """Partition 0 = t_0 < t_1 < ... < t_N = 1 with t_i = (i/N)**rho."""

    n_cells: int
    rho: float = 2.0
    cuts: np.ndarray = field(init=False, repr=False, compare=False)
    widths: np.ndarray = field(init=False, repr=False, compare=False)
    midpoints: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("need at least 2 cells")
        if self.rho < 1.0:
            raise ValueError("grading exponent rho must be >= 1")
        cuts = (np.arange(self.n_cells + 1) / self.n_cells) ** self.rho
        cuts[0], cuts[-1] = 0.0, 1.0
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "widths", np.diff(cuts))
        object.__setattr__(self, "midpoints", 0.5 * (cuts[:-1] + cuts[1:]))
        self.cuts.setflags(write=False)
        self.widths.setflags(write=False)
        self.midpoints.setflags(write=False)

    def __eq__(self, other):
        return (
            isinstance(other, GradedGrid)
            and self.n_cells == other.n_cells
            and self.rho == other.rho
        )

    def __hash__(self):
        return hash((self.n_cells, self.rho))

    def cell_index(self, x):
        """Index of the cell containing x (right-closed cells except the first)."""
        i = np.searchsorted(self.cuts, x, side="left") - 1
        return np.clip(i, 0, self.n_cells - 1)

    def integrate(self, values):
        """Midpoint-rule integral of a cell-average function."""
        return float(np.dot(np.asarray(values), self.widths))

    def average(self, func, gauss_order: int = 4):
        """Cell averages of a callable, Gauss-Legendre per cell."""
        nodes, weights = np.polynomial.legendre.leggauss(gauss_order)
        a, b = self.cuts[:-1], self.cuts[1:]
        acc = np.zeros(self.n_cells)
        for t, w in zip(nodes, weights):
            x = 0.5 * (a + b) + 0.5 * (b - a) * t
            acc += w * np.asarray(func(x))
        return 0.5 * acc


# Magnitude of negative cell values tolerated (and clipped) on objects that
# claim to be densities; larger negatives indicate a real bug upstream.
_DENSITY_CLIP = 1e-12


@dataclass
class GridDensity:
    """A cell-average function on a graded grid.

    ``require_nonnegative=True`` clips values in [-1e-12, 0) to zero (with a
    log record) and rejects anything more negative.
    """

    grid: GradedGrid
    values: np.ndarray
    require_nonnegative: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        if self.values.shape != (self.grid.n_cells,):
            raise ValueError("values must have one entry per cell")
        if self.require_nonnegative:
            worst = self.values.min(initial=0.0)
            if worst < -_DENSITY_CLIP:
                raise ValueError(f"density has negative value {worst}")
            if worst < 0.0:
                log.debug("clipping tiny negative density values (worst %g)", worst)
                np.clip(self.values, 0.0, None, out=self.values)

    @property
    def total_mass(self) -> float:
        return self.grid.integrate(self.values)

    @classmethod
    def ones(cls, grid: GradedGrid) -> "GridDensity":
        return cls(grid, np.ones(grid.n_cells), require_nonnegative=True)

    @classmethod
    def from_callable(cls, grid: GradedGrid, func, require_nonnegative=False):
        return cls(grid, grid.average(func), require_nonnegative=require_nonnegative)

    def integral(self) -> float:
        return self.total_mass

    def lp_norm(self, p: float) -> float:
        if p <= 0:
            raise ValueError("p must be positive")
        return float(np.dot(np.abs(self.values) ** p, self.grid.widths)) ** (1.0 / p)
