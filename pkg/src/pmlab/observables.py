"""Lipschitz observables on [0, 1].

Plain callables would do for most of the pipeline, but the experiments also
need the Lipschitz constant (bounds and admissibility checks) and pickling
(process pools), so observables are small module-level classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Identity", "Affine", "PiecewiseLinear", "coordinate"]


@dataclass(frozen=True)
class Identity:
    """phi(x) = x."""

    lipschitz: float = 1.0

    def __call__(self, x):
        return np.asarray(x, dtype=float)


@dataclass(frozen=True)
class Affine:
    """phi(x) = slope * x + intercept."""

    slope: float = 1.0
    intercept: float = 0.0

    @property
    def lipschitz(self) -> float:
        return abs(self.slope)

    def __call__(self, x):
        return self.slope * np.asarray(x, dtype=float) + self.intercept


@dataclass(frozen=True)
class PiecewiseLinear:
    """Continuous piecewise-linear interpolant through (knots, values).

    Knots must be strictly increasing and cover [0, 1]; evaluation clamps to
    the end values outside the knot range.
    """

    knots: tuple
    values: tuple

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.size != v.size or k.size < 2:
            raise ValueError("need matching knots/values with at least 2 points")
        if np.any(np.diff(k) <= 0.0):
            raise ValueError("knots must be strictly increasing")
        if k[0] > 0.0 or k[-1] < 1.0:
            raise ValueError("knots must cover [0, 1]")
        object.__setattr__(self, "knots", tuple(float(x) for x in k))
        object.__setattr__(self, "values", tuple(float(x) for x in v))

    @property
    def lipschitz(self) -> float:
        k = np.asarray(self.knots)
        v = np.asarray(self.values)
        return float(np.max(np.abs(np.diff(v) / np.diff(k))))

    def __call__(self, x):
        return np.interp(np.asarray(x, dtype=float), self.knots, self.values)


def coordinate() -> Identity:
    """The default observable phi(x) = x."""
    return Identity()
