"""Transfer operators for the map family: exact pointwise action, Ulam
discretization, cone membership, lower-bound and decay scans.

The transfer operator P of T is defined against Lebesgue measure by
int g . Pf = int (g o T) . f.  Pointwise, with z the left-branch preimage,

    Pf(x) = f(z)/T'(z) + f((x+1)/2)/2.

The Ulam matrix has entries A[i, j] = m(cell_j n T^{-1} cell_i)/m(cell_j)
(column-stochastic); acting on cell averages it is the exact cell-averaged
pushforward of the piecewise-constant density.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import cache as _cache
from .grid import GradedGrid, GridDensity
from .maps import apply_map, _beta_value, inverse_left, inverse_right, map_derivative

__all__ = [
    "apply_transfer_pointwise",
    "duality_gap",
    "build_ulam",
    "UlamOperator",
    "OperatorFactory",
    "apply_sequence",
    "check_cone",
    "ConeReport",
    "lower_bound_scan",
    "decay_curve",
    "fit_loglog_slope",
    "dyadic_subset",
]


def apply_transfer_pointwise(beta, f, x):
    """Pf(x) for a callable density f, x in (0, 1] (scalar or array)."""
    z = inverse_left(beta, x)
    zr = inverse_right(x)
    return np.asarray(f(z)) / map_derivative(beta, z) + np.asarray(f(zr)) / 2.0


@dataclass(frozen=True, eq=False)
class UlamOperator:
    """Finite-rank Ulam surrogate of the transfer operator of one map."""

    beta: float
    grid: GradedGrid
    matrix: np.ndarray  # (i, j) = m(cell_j n T^{-1} cell_i)/m(cell_j)

    def __post_init__(self):
        self.matrix.setflags(write=False)

    def column_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def apply_values(self, values: np.ndarray) -> np.ndarray:
        """Push cell-average values forward: move cell masses, re-average."""
        w = self.grid.widths
        return (self.matrix @ (np.asarray(values) * w)) / w

    def transform(self, density: GridDensity) -> GridDensity:
        if density.grid != self.grid:
            raise ValueError("density grid does not match operator grid")
        return GridDensity(
            self.grid,
            self.apply_values(density.values),
            require_nonnegative=density.require_nonnegative,
        )


def _gauss_on_segments(func, lo, hi, order: int = 10):
    """sum_k int_{lo_k}^{hi_k} func, Gauss-Legendre per segment (vectorized)."""
    nodes, weights = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (hi - lo)
    mid = 0.5 * (lo + hi)
    total = 0.0
    for t, w in zip(nodes, weights):
        total += w * np.dot(half, np.asarray(func(mid + half * t)))
    return float(total)


def duality_gap(beta, grid: GradedGrid, f, g, order: int = 10, op=None) -> float:
    """|int g . (P_N f) - int (g o T) . f| for the Ulam surrogate P_N.

    f is projected to its cell averages first (the operator's domain); g stays
    a genuine callable, so the two sides are computed by independent
    quadrature routes: the left over grid cells against the piecewise-constant
    output, the right over cells split at the branch point 1/2 where g o T
    jumps.  The residual gap is the within-cell redistribution error of the
    discretization, O(max width^2).
    """
    b = _beta_value(beta)
    f_vals = grid.average(f, gauss_order=order)
    if op is None:
        op = build_ulam(b, grid)
    elif op.beta != b or op.grid != grid:
        raise ValueError("supplied operator does not match beta/grid")
    pf = op.apply_values(f_vals)
    g_avg = grid.average(g, gauss_order=order)
    lhs = float(np.dot(pf * g_avg, grid.widths))

    cuts = np.union1d(grid.cuts, [0.5])
    lo, hi = cuts[:-1], cuts[1:]
    seg_cell = np.clip(
        np.searchsorted(grid.cuts, 0.5 * (lo + hi)) - 1, 0, grid.n_cells - 1
    )
    rhs = _gauss_on_segments(
        lambda u: f_vals[seg_cell] * np.asarray(g(apply_map(b, u))), lo, hi, order
    )
    return abs(lhs - rhs)


def _branch_contributions(matrix, grid, pre_cuts):
    """Accumulate overlap masses for one monotone branch.

    pre_cuts[i] is the branch preimage of grid cut t_i (increasing), so the
    branch preimage of image cell i is [pre_cuts[i], pre_cuts[i+1]].
    """
    t = grid.cuts
    inner = t[(t > pre_cuts[0]) & (t < pre_cuts[-1])]
    points = np.union1d(pre_cuts, inner)
    mids = 0.5 * (points[:-1] + points[1:])
    lengths = np.diff(points)
    img = np.clip(np.searchsorted(pre_cuts, mids) - 1, 0, grid.n_cells - 1)
    dom = np.clip(np.searchsorted(t, mids) - 1, 0, grid.n_cells - 1)
    np.add.at(matrix, (img, dom), lengths / grid.widths[dom])


def build_ulam(beta, grid: GradedGrid) -> UlamOperator:
    """Exact-preimage Ulam matrix (both branches are monotone, so preimages of
    cells are at most two intervals with endpoints from the inverse branches)."""
    b = _beta_value(beta)
    t = grid.cuts
    matrix = np.zeros((grid.n_cells, grid.n_cells))
    left_pre = inverse_left(b, t)
    left_pre[0], left_pre[-1] = 0.0, 0.5
    _branch_contributions(matrix, grid, left_pre)
    right_pre = (t + 1.0) / 2.0
    _branch_contributions(matrix, grid, right_pre)
    colsums = matrix.sum(axis=0)
    if np.max(np.abs(colsums - 1.0)) > 1e-10:
        raise RuntimeError("Ulam matrix is not column-stochastic to 1e-10")
    return UlamOperator(beta=b, grid=grid, matrix=matrix)


class OperatorFactory:
    """Builds Ulam operators with an in-memory LRU and optional disk cache.

    Immutable outputs are shared between callers; keyed by beta rounded to 12
    decimal digits plus the grid spec.
    """

    def __init__(self, grid: GradedGrid, cache_dir=None, max_cached: int = 16):
        self.grid = grid
        self.cache_dir = cache_dir
        self.max_cached = max_cached
        self._lru: OrderedDict = OrderedDict()

    def __call__(self, beta) -> UlamOperator:
        key = round(float(beta), 12)
        if key in self._lru:
            self._lru.move_to_end(key)
            return self._lru[key]
        op = self._load_or_build(key)
        self._lru[key] = op
        while len(self._lru) > self.max_cached:
            self._lru.popitem(last=False)
        return op

    def _load_or_build(self, beta: float) -> UlamOperator:
        if self.cache_dir is None:
            return build_ulam(beta, self.grid)
        path = _cache.matrix_path(
            self.cache_dir, beta, self.grid.n_cells, self.grid.rho
        )
        if path.exists():
            try:
                matrix = _cache.load_matrix(
                    path, beta, self.grid.n_cells, self.grid.rho
                )
                return UlamOperator(beta=beta, grid=self.grid, matrix=matrix)
            except _cache.CacheCorruption:
                path.unlink(missing_ok=True)
        op = build_ulam(beta, self.grid)
        _cache.save_matrix(path, beta, self.grid.rho, op.matrix)
        return op


def apply_sequence(operators, density: GridDensity) -> GridDensity:
    """Compose in time order: the first operator in the sequence acts first."""
    out = density
    for op in operators:
        out = op.transform(out)
    return out


# ---------------------------------------------------------------------------
# Cone membership

_CONE_TOL = 1e-9


@dataclass(frozen=True)
class ConeReport:
    is_nonnegative: bool
    is_decreasing: bool
    weighted_increasing: bool
    bound_ok: bool
    worst_negative: float
    worst_increase: float
    worst_weighted_decrease: float
    worst_bound_excess: float
    smallest_admissible_a: float

    @property
    def passed(self) -> bool:
        return (
            self.is_nonnegative
            and self.is_decreasing
            and self.weighted_increasing
            and self.bound_ok
        )


def check_cone(f: GridDensity, a: float, alpha: float) -> ConeReport:
    """Check the four cone conditions on cell representatives (midpoints).

    Conditions: f >= 0, f decreasing, x**(alpha+1) * f increasing, and
    f(x) <= a * x**(-alpha) * int f.  Also reports the smallest a that would
    make the bound pass.
    """
    if a <= 0.0 or not 0.0 < alpha < 1.0:
        raise ValueError("need a > 0 and alpha in (0, 1)")
    v = f.values
    mid = f.grid.midpoints
    mass = f.total_mass

    worst_negative = max(0.0, float(-v.min(initial=0.0)))
    inc = np.diff(v)
    worst_increase = max(0.0, float(inc.max(initial=0.0)))
    g = mid ** (alpha + 1.0) * v
    dec = -np.diff(g)
    worst_weighted_decrease = max(0.0, float(dec.max(initial=0.0)))
    envelope = mid ** (-alpha) * mass
    excess = v - a * envelope
    worst_bound_excess = max(0.0, float(excess.max(initial=0.0)))
    smallest_a = float((v / envelope).max()) if mass > 0.0 else 0.0

    return ConeReport(
        is_nonnegative=worst_negative <= _CONE_TOL,
        is_decreasing=worst_increase <= _CONE_TOL,
        weighted_increasing=worst_weighted_decrease <= _CONE_TOL,
        bound_ok=worst_bound_excess <= _CONE_TOL,
        worst_negative=worst_negative,
        worst_increase=worst_increase,
        worst_weighted_decrease=worst_weighted_decrease,
        worst_bound_excess=worst_bound_excess,
        smallest_admissible_a=smallest_a,
    )


# ---------------------------------------------------------------------------
# Scans

def lower_bound_scan(schedule, n_max: int, grid: GradedGrid, factory=None):
    """Per-n minimum over cells of the discretized P^n 1, n = 0..n_max."""
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    factory = factory or OperatorFactory(grid)
    values = np.ones(grid.n_cells)
    minima = np.empty(n_max + 1)
    minima[0] = 1.0
    for n, beta in enumerate(schedule.betas(n_max), start=1):
        values = factory(beta).apply_values(values)
        minima[n] = values.min()
    return np.arange(n_max + 1), minima


def decay_curve(schedule, phi, h: GridDensity, p: float, n_max: int, factory=None):
    """L^p norms of P^n(phi*h - int phi*h) on the grid, n = 1..n_max.

    Requires 1 <= p < 1/alpha_cap (the polynomial decay regime).
    """
    if p < 1.0 or p * schedule.alpha_cap >= 1.0:
        raise ValueError(
            f"need 1 <= p < 1/alpha_cap = {1.0 / schedule.alpha_cap:.4g}, got p={p}"
        )
    grid = h.grid
    factory = factory or OperatorFactory(grid)
    values = np.asarray(phi(grid.midpoints)) * h.values
    values = values - grid.integrate(values)
    norms = np.empty(n_max)
    for n, beta in enumerate(schedule.betas(n_max)):
        values = factory(beta).apply_values(values)
        norms[n] = np.dot(np.abs(values) ** p, grid.widths) ** (1.0 / p)
    return np.arange(1, n_max + 1), norms


def dyadic_subset(ns, lo, hi):
    """Indices of ns that are powers of two (times 1 or 1.5) within [lo, hi]."""
    ns = np.asarray(ns)
    picks = []
    k = 1
    while k <= ns.max():
        for m in (k, (3 * k) // 2):
            if lo <= m <= hi and m in ns:
                picks.append(m)
        k *= 2
    picks = sorted(set(picks))
    return np.array([int(np.flatnonzero(ns == m)[0]) for m in picks])


def fit_loglog_slope(ns, values, window):
    """Least-squares slope of log(values) vs log(n) on dyadic n in window."""
    lo, hi = window
    idx = dyadic_subset(ns, lo, hi)
    if idx.size < 3:
        raise ValueError("fit window holds fewer than 3 dyadic points")
    x = np.log(np.asarray(ns, dtype=float)[idx])
    y = np.log(np.asarray(values, dtype=float)[idx])
    slope, _ = np.polyfit(x, y, 1)
    return float(slope)
