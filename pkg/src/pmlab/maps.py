"""Pomeau-Manneville interval maps and sequential composition schedules.

The map with slope exponent beta is

    T(x) = x + 2**beta * x**(1+beta)   on [0, 1/2]
    T(x) = 2x - 1                      on (1/2, 1]

The left branch has an indifferent fixed point at 0 (derivative 1) and maps
[0, 1/2] onto [0, 1]; the right branch is affine onto (0, 1].  A schedule
emits one exponent per time step, all strictly below a common cap in (0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MapParameter",
    "apply_map",
    "map_derivative",
    "inverse_left",
    "inverse_right",
    "ConstantSchedule",
    "ExplicitSchedule",
    "NearbySchedule",
    "IIDSchedule",
    "iterate_schedule",
]

# Below this the left branch is x*(1+o(1)) to machine precision; solving for
# the preimage would underflow x**(1+beta).
_TINY = 1e-300

_INVERSE_TOL = 1e-14
_INVERSE_MAXITER = 200


@dataclass(frozen=True)
class MapParameter:
    """Slope exponent of one Pomeau-Manneville map, 0 < beta < 1."""

    beta: float

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    def __float__(self):
        return self.beta


def _beta_value(beta) -> float:
    b = float(beta)
    if not 0.0 < b < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {b}")
    return b


def _check_domain(x, name="x"):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError(f"{name} must lie in [0, 1]")
    return x


def _powxp(x, p):
    """x**p for x >= 0 via exp(p*log x) with an explicit x == 0 branch.

    Keeps the power evaluation deterministic across platforms/libms.
    """
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.exp(p * np.log(x))
    return np.where(x > 0.0, out, 0.0)


def apply_map(beta, x):
    """Evaluate T_beta at x (scalar or array), result in [0, 1].

    Only floating overshoot at the branch top (|excess| < 1e-12) is clamped;
    anything larger is a bug and raises.
    """
    b = _beta_value(beta)
    scalar = np.isscalar(x) or getattr(x, "ndim", 1) == 0
    x = _check_domain(x)
    left = x <= 0.5
    y = np.where(left, x + math.pow(2.0, b) * _powxp(x, 1.0 + b), 2.0 * x - 1.0)
    over = y - 1.0
    if np.any(over > 1e-12):
        raise FloatingPointError("branch value exceeds 1 beyond roundoff")
    y = np.clip(np.asarray(y), 0.0, 1.0)
    return float(y) if scalar else y


def map_derivative(beta, x):
    """T_beta'(x): 1 + 2**beta*(1+beta)*x**beta on the left branch, 2 on the right."""
    b = _beta_value(beta)
    scalar = np.isscalar(x) or getattr(x, "ndim", 1) == 0
    x = _check_domain(x)
    left = x <= 0.5
    d = np.where(left, 1.0 + math.pow(2.0, b) * (1.0 + b) * _powxp(x, b), 2.0)
    return float(d) if scalar else d


def inverse_left(beta, y):
    """Preimage of y under the left branch: the unique root of T_beta(x) = y in [0, 1/2].

    Newton iteration seeded at min(y, 1/2), safeguarded by bisection on a
    shrinking bracket.  Absolute tolerance 1e-14, 200-iteration cap; hitting
    the cap signals a solver bug, not bad input.
    """
    b = _beta_value(beta)
    scalar = np.isscalar(y) or getattr(y, "ndim", 1) == 0
    y = _check_domain(y, "y")
    y = np.atleast_1d(y)
    c = math.pow(2.0, b)

    # T(x) = x*(1 + 2**beta x**beta) <= 2x on [0,1/2], so the root is >= y/2.
    lo = 0.5 * y
    hi = np.minimum(y, 0.5)
    x = hi.copy()
    tiny = y < _TINY
    x[tiny] = y[tiny]

    active = ~tiny & (y > 0.0)
    for _ in range(_INVERSE_MAXITER):
        if not np.any(active):
            break
        xa = x[active]
        f = xa + c * _powxp(xa, 1.0 + b) - y[active]
        lo_a, hi_a = lo[active], hi[active]
        lo_a = np.where(f < 0.0, xa, lo_a)
        hi_a = np.where(f >= 0.0, xa, hi_a)
        df = 1.0 + c * (1.0 + b) * _powxp(xa, b)
        step = f / df
        xn = xa - step
        done = np.abs(step) < _INVERSE_TOL
        # fall back to bisection only while still converging, else a step that
        # lands exactly on the (just-updated) bracket edge looks out of range
        bad = ~done & ((xn <= lo_a) | (xn >= hi_a))
        xn = np.where(bad, 0.5 * (lo_a + hi_a), xn)
        lo[active], hi[active] = lo_a, hi_a
        x[active] = xn
        done |= (hi_a - lo_a) < _INVERSE_TOL
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    else:
        if np.any(active):
            raise RuntimeError("inverse_left: safeguarded Newton failed to converge")
    return float(x[0]) if scalar else x


def inverse_right(y):
    """Preimage of y under the affine right branch: (y+1)/2, exact."""
    scalar = np.isscalar(y) or getattr(y, "ndim", 1) == 0
    y = _check_domain(y, "y")
    x = (np.asarray(y) + 1.0) / 2.0
    return float(x) if scalar else x


# ---------------------------------------------------------------------------
# Schedules


class ScheduleExhausted(Exception):
    """An explicit-list schedule was asked for more steps than it holds."""


def _check_cap(alpha_cap):
    if not 0.0 < alpha_cap < 1.0:
        raise ValueError(f"alpha_cap must lie in (0, 1), got {alpha_cap}")
    return float(alpha_cap)


@dataclass(frozen=True)
class ConstantSchedule:
    """The same exponent at every step."""

    beta: float
    alpha_cap: float = 0.99

    def __post_init__(self):
        _check_cap(self.alpha_cap)
        if not 0.0 < self.beta < self.alpha_cap:
            raise ValueError(f"beta must lie in (0, alpha_cap), got {self.beta}")

    def betas(self, n: int) -> np.ndarray:
        return np.full(n, self.beta)


@dataclass(frozen=True)
class ExplicitSchedule:
    """A fixed finite list of exponents."""

    values: tuple
    alpha_cap: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        _check_cap(self.alpha_cap)
        for v in self.values:
            if not 0.0 < v < self.alpha_cap:
                raise ValueError(f"schedule value {v} outside (0, alpha_cap)")

    def betas(self, n: int) -> np.ndarray:
        if n > len(self.values):
            raise ScheduleExhausted(
                f"schedule holds {len(self.values)} steps, {n} requested"
            )
        return np.array(self.values[:n])


def _prefix_stable_rng(seed: int) -> np.random.Generator:
    # Philox is counter-based: the first n draws do not depend on how many
    # draws follow, so betas(n) is a prefix of betas(n') for n < n'.
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


@dataclass(frozen=True)
class NearbySchedule:
    """I.i.d. uniform exponents in the window (beta0 - epsilon, beta0 + epsilon)."""

    beta0: float
    epsilon: float
    seed: int = 0
    alpha_cap: float = 0.99

    def __post_init__(self):
        _check_cap(self.alpha_cap)
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be >= 0")
        lo, hi = self.beta0 - self.epsilon, self.beta0 + self.epsilon
        if lo <= 0.0 or hi >= self.alpha_cap:
            raise ValueError(
                f"window ({lo}, {hi}) escapes (0, alpha_cap={self.alpha_cap})"
            )

    def betas(self, n: int) -> np.ndarray:
        if self.epsilon == 0.0:
            return np.full(n, self.beta0)
        rng = _prefix_stable_rng(self.seed)
        return self.beta0 + self.epsilon * (2.0 * rng.random(n) - 1.0)


@dataclass(frozen=True)
class IIDSchedule:
    """I.i.d. draws from a finite alphabet of exponents with given probabilities."""

    alphabet: tuple
    probabilities: tuple
    seed: int = 0
    alpha_cap: float = 0.99

    def __post_init__(self):
        object.__setattr__(self, "alphabet", tuple(float(v) for v in self.alphabet))
        object.__setattr__(
            self, "probabilities", tuple(float(p) for p in self.probabilities)
        )
        _check_cap(self.alpha_cap)
        if len(self.alphabet) != len(self.probabilities):
            raise ValueError("alphabet and probabilities must have equal length")
        for v in self.alphabet:
            if not 0.0 < v < self.alpha_cap:
                raise ValueError(f"alphabet value {v} outside (0, alpha_cap)")
        p = np.array(self.probabilities)
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must be nonnegative and sum to 1")

    def symbols(self, n: int) -> np.ndarray:
        rng = _prefix_stable_rng(self.seed)
        p = np.array(self.probabilities)
        # inverse-CDF on one uniform per step keeps the stream prefix-stable
        edges = np.cumsum(p)
        return np.searchsorted(edges, rng.random(n), side="right").clip(
            0, len(p) - 1
        )

    def betas(self, n: int) -> np.ndarray:
        return np.array(self.alphabet)[self.symbols(n)]


def iterate_schedule(schedule, x0: float, n: int):
    """Orbit x0, T^1 x0, ..., T^n x0 as a generator (streaming, O(1) memory)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    x = float(x0)
    if not 0.0 <= x <= 1.0:
        raise ValueError("x0 must lie in [0, 1]")
    yield x
    if n == 0:
        return
    for b in schedule.betas(n):
        x = apply_map(b, x)
        yield x
