"""Martingale-coboundary machinery on the grid.

The Birkhoff sum of the centered observable splits into reverse-martingale
differences plus a coboundary evaluated at the endpoint,

    sum_{k<=n} phi_k o T^k  =  sum_{k<=n} psi_k o T^k  +  H_{n+1} o T^{n+1},

with H_{n+1} = sum_{k<=n} P_{k+1}^{n+1}(phi_k . P^k 1) / P^{n+1} 1 and
phi_k = phi - int phi o T^k dm.  Everything here advances that identity one
operator application per step:

    c_n     = int phi . D_n dm,            D_n = P^n 1
    N_{n+1} = P_{n+1}(N_n + (phi - c_n) D_n),   n >= 1,  N_1 = 0
    D_{n+1} = P_{n+1} D_n
    H_{n+1} = N_{n+1} / D_{n+1}

Second moments of psi_k come from the operator identity

    v_k = int (phi_k + H_k)^2 D_k dm - int H_{k+1}^2 D_{k+1} dm,

and sigma_n^2 = sum_{k<=n} v_k.  The quadrature variance Sigma_n^2 =
int (sum phi_k o T^k)^2 dm accumulates as sum_k int phi_k^2 D_k + 2 sum_k
int phi_k . N_k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .grid import GradedGrid, GridDensity
from .maps import apply_map
from .transfer import OperatorFactory

__all__ = [
    "Decomposition",
    "DecompositionScan",
    "PsiFunction",
    "h_moment_scan",
    "FiveTermScan",
    "five_term_scan",
    "TailDiagnostics",
    "tail_series_diagnostics",
    "pathwise_identity_residual",
]

# Lemma-level guarantee: inf_{n,x} P^n 1 > 0.  Dipping below this floor means
# the discretization broke down, so raise instead of clamping.
_D_FLOOR = 1e-6


class DensityFloorError(RuntimeError):
    """P^n 1 dipped below the positive floor guaranteed by the theory."""


class Decomposition:
    """Sequential state (D_n, N_n, H_n) advanced one operator per step.

    Index convention follows the sums starting at k = 1: H_1 = 0 and the
    first advance only pushes D.  ``r_moments`` lists exponents r for which
    int |H_n|^r D_n dm is recorded at every step.
    """

    def __init__(self, schedule, phi, grid: GradedGrid, factory=None,
                 r_moments=(), floor: float = _D_FLOOR):
        self.schedule = schedule
        self.phi = phi
        self.grid = grid
        self.factory = factory or OperatorFactory(grid)
        self.floor = floor
        self.n = 0
        self.D = np.ones(grid.n_cells)
        self.N = np.zeros(grid.n_cells)
        self.H = np.zeros(grid.n_cells)
        self._phi_mid = np.asarray(phi(grid.midpoints), dtype=float)
        if self._phi_mid.ndim == 0:
            self._phi_mid = np.full(grid.n_cells, float(self._phi_mid))
        self._w = grid.widths
        self._betas = np.empty(0)
        # per-step records, entry k-1 holds the value at index k
        self.c: list[float] = []
        self.v: list[float] = []
        self.Sigma2: list[float] = []
        self.min_D: list[float] = []
        self.martingale_residuals: list[float] = []
        self.h_moments = {float(r): [] for r in r_moments}
        self._sigma2_accum = 0.0

    def _beta(self, k: int) -> float:
        if k > self._betas.size:
            target = max(k, 2 * self._betas.size, 64)
            try:
                self._betas = self.schedule.betas(target)
            except Exception:
                # explicit-list schedules may be shorter than the greedy chunk
                self._betas = self.schedule.betas(k)
        return float(self._betas[k - 1])

    def _expect(self, values) -> float:
        """int values . D_n dm for the current state."""
        return float(np.dot(values * self.D, self._w))

    def _record_state(self):
        c_n = self._expect(self._phi_mid)
        self.c.append(c_n)
        phi_c = self._phi_mid - c_n
        own = self._expect(phi_c * phi_c)
        cross = float(np.dot(phi_c * self.N, self._w))
        prev = self.Sigma2[-1] if self.Sigma2 else 0.0
        self.Sigma2.append(prev + own + 2.0 * cross)
        self.min_D.append(float(self.D.min()))
        for r, lst in self.h_moments.items():
            lst.append(float(np.dot(np.abs(self.H) ** r * self.D, self._w)))

    def advance(self):
        """Move from index n to n+1 (one operator application)."""
        op = self.factory(self._beta(self.n + 1))
        if self.n == 0:
            self.D = op.apply_values(self.D)
            self.n = 1
            self._record_state()
            return
        phi_c = self._phi_mid - self.c[-1]
        numer_in = self.N + phi_c * self.D
        sq_before = self._expect((phi_c + self.H) ** 2)
        N_new = op.apply_values(numer_in)
        D_new = op.apply_values(self.D)
        if D_new.min() < self.floor:
            raise DensityFloorError(
                f"P^{self.n + 1} 1 dipped to {D_new.min():.3g} < {self.floor:.0e}"
            )
        H_new = N_new / D_new
        sq_after = float(np.dot(H_new * H_new * D_new, self._w))
        v_n = sq_before - sq_after
        self.v.append(v_n)
        self._sigma2_accum += v_n
        residual = float(np.dot(np.abs(N_new - H_new * D_new), self._w))
        self.martingale_residuals.append(residual)
        self.N, self.D, self.H = N_new, D_new, H_new
        self.n += 1
        self._record_state()

    def run(self, n_target: int):
        while self.n < n_target:
            self.advance()
        return self

    @property
    def sigma2(self) -> float:
        """sigma_n^2 for the current index (sum of available v_k)."""
        return self._sigma2_accum

    def density(self) -> GridDensity:
        return GridDensity(self.grid, self.D, require_nonnegative=True)

    def h_interpolator(self):
        """Monotone-cubic interpolant of H_n for evaluation along trajectories."""
        return PchipInterpolator(self.grid.midpoints, self.H, extrapolate=True)

    def scan(self, n_max: int) -> "DecompositionScan":
        """Advance to index n_max + 1 so c_1..c_n_max and v_1..v_n_max exist."""
        self.run(n_max + 1)
        return DecompositionScan(
            n_max=n_max,
            c=np.array(self.c[:n_max]),
            v=np.array(self.v[:n_max]),
            sigma2=np.cumsum(self.v[:n_max]),
            Sigma2=np.array(self.Sigma2[:n_max]),
            min_D=np.array(self.min_D[:n_max]),
            martingale_residuals=np.array(self.martingale_residuals[:n_max]),
            h_moments={r: np.array(lst[:n_max]) for r, lst in self.h_moments.items()},
        )


@dataclass
class DecompositionScan:
    """Per-n records of a decomposition run (entry k-1 is index k)."""

    n_max: int
    c: np.ndarray
    v: np.ndarray
    sigma2: np.ndarray
    Sigma2: np.ndarray
    min_D: np.ndarray
    martingale_residuals: np.ndarray
    h_moments: dict


@dataclass
class PsiFunction:
    """psi_k at time k as a grid function, with its second moment v_k."""

    k: int
    values: np.ndarray
    v: float


def psi_at(decomp_k: Decomposition, beta_next: float, phi) -> PsiFunction:
    """psi_k(x) = phi_k(x) + H_k(x) - H_{k+1}(T_{k+1} x) on the grid.

    ``decomp_k`` must sit at index k; it is advanced to k+1 in place.  The
    moment v_k comes from the operator identity, not from the grid values.
    """
    k = decomp_k.n
    grid = decomp_k.grid
    phi_c = np.asarray(phi(grid.midpoints)) - decomp_k.c[-1]
    h_k = decomp_k.H.copy()
    decomp_k.advance()
    h_next = decomp_k.h_interpolator()
    mapped = apply_map(beta_next, grid.midpoints)
    values = phi_c + h_k - h_next(mapped)
    return PsiFunction(k=k, values=values, v=decomp_k.v[-1])


def h_moment_scan(schedule, phi, r: float, n_max: int, grid: GradedGrid,
                  factory=None):
    """Per-n values of ||H_n o T^n||_{L^r} = (int |H_n|^r D_n dm)^{1/r}.

    Admissible only for 1 <= r < 1/(2 alpha_cap), the range in which the
    running supremum is bounded.
    """
    limit = 1.0 / (2.0 * schedule.alpha_cap)
    if not 1.0 <= r < limit:
        raise ValueError(
            f"r={r} outside the admissible range 1 <= r < 1/(2 alpha) = {limit:.4g}"
        )
    decomp = Decomposition(schedule, phi, grid, factory=factory, r_moments=(r,))
    scan = decomp.scan(n_max)
    norms = scan.h_moments[float(r)] ** (1.0 / r)
    running_sup = np.maximum.accumulate(norms)
    return np.arange(1, n_max + 1), norms, running_sup


# ---------------------------------------------------------------------------
# Trajectory-lockstep diagnostics


def _stratified_points(m: int, seed: int) -> np.ndarray:
    """One jittered point per stratum of width 1/m; Philox keeps the stream
    counter-based so point i never depends on how many points are drawn."""
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    return (np.arange(m) + rng.random(m)) / m


@dataclass
class FiveTermScan:
    """Per-checkpoint samples of S'_n and its five-term split.

    ``terms[j]`` is an (n_checkpoints, M) array for split term j+1; ``term2``
    is deterministic (a grid integral).  ``identity_residual`` is the largest
    |S'_n - sum of terms| over trajectories and checkpoints.
    """

    checkpoints: np.ndarray
    s_prime: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    term3: np.ndarray
    term4: np.ndarray
    term5: np.ndarray
    sigma2: np.ndarray
    identity_residual: float

    def growth_exponent(self) -> float:
        """Slope of log median|S'_n| against log sigma_n^2 (< 1 expected)."""
        med = np.median(np.abs(self.s_prime), axis=1)
        keep = med > 0
        x = np.log(self.sigma2[keep])
        y = np.log(med[keep])
        slope, _ = np.polyfit(x, y, 1)
        return float(slope)


def five_term_scan(schedule, phi, grid: GradedGrid, m_trajectories: int,
                   n_max: int, checkpoints, seed: int = 0,
                   factory=None) -> FiveTermScan:
    """Advance grid state and a trajectory ensemble under one clock and
    accumulate the five split terms of S'_n per trajectory."""
    checkpoints = np.asarray(sorted(checkpoints), dtype=int)
    if checkpoints[-1] > n_max or checkpoints[0] < 1:
        raise ValueError("checkpoints must lie in [1, n_max]")
    betas = schedule.betas(n_max + 1)
    decomp = Decomposition(schedule, phi, grid, factory=factory)
    decomp.advance()  # index 1
    h_interp = decomp.h_interpolator()

    x = _stratified_points(m_trajectories, seed)
    x = apply_map(betas[0], x)  # T^1 x

    w = grid.widths
    phi_mid = np.asarray(phi(grid.midpoints))

    s_prime = np.zeros(m_trajectories)
    acc1 = np.zeros(m_trajectories)
    acc4 = np.zeros(m_trajectories)
    acc5 = np.zeros(m_trajectories)
    out = {name: [] for name in ("s_prime", "t1", "t2", "t3", "t4", "t5", "sig2")}

    ckpt_set = set(int(c) for c in checkpoints)
    for i in range(1, n_max + 1):
        c_i = decomp.c[-1]
        D_i, H_i_vals = decomp.D, decomp.H
        phi_i_x = np.asarray(phi(x)) - c_i
        h_i_x = h_interp(x)
        int_phi2 = float(np.dot((phi_mid - c_i) ** 2 * D_i, w))
        int_phih = float(np.dot((phi_mid - c_i) * H_i_vals * D_i, w))

        decomp.advance()  # index i+1: exposes H_{i+1} and v_i
        h_interp = decomp.h_interpolator()
        x = apply_map(betas[i], x)  # T^{i+1} x
        h_next_x = h_interp(x)

        psi_i = phi_i_x + h_i_x - h_next_x
        s_prime += psi_i**2 - decomp.v[-1]
        acc1 += phi_i_x**2 - int_phi2
        acc4 += -2.0 * psi_i * h_next_x
        acc5 += 2.0 * (phi_i_x * h_i_x - int_phih)

        if i in ckpt_set:
            t2 = float(np.dot(decomp.H**2 * decomp.D, w))
            t3 = -(h_next_x**2)
            out["s_prime"].append(s_prime.copy())
            out["t1"].append(acc1.copy())
            out["t2"].append(t2)
            out["t3"].append(t3)
            out["t4"].append(acc4.copy())
            out["t5"].append(acc5.copy())
            out["sig2"].append(decomp.sigma2)  # sigma_i^2 = sum_{k<=i} v_k

    s_arr = np.array(out["s_prime"])
    t1 = np.array(out["t1"])
    t2 = np.array(out["t2"])
    t3 = np.array(out["t3"])
    t4 = np.array(out["t4"])
    t5 = np.array(out["t5"])
    residual = float(
        np.max(np.abs(s_arr - (t1 + t2[:, None] + t3 + t4 + t5)))
    )
    return FiveTermScan(
        checkpoints=checkpoints,
        s_prime=s_arr,
        term1=t1,
        term2=t2,
        term3=t3,
        term4=t4,
        term5=t5,
        sigma2=np.array(out["sig2"]),
        identity_residual=residual,
    )


# ---------------------------------------------------------------------------
# Tail series (ASIP variance bookkeeping)


@dataclass
class TailDiagnostics:
    ns: np.ndarray
    sigma2: np.ndarray
    ratio: np.ndarray          # sigma_{n+1}^2 / sigma_n^2
    delta2: np.ndarray         # sum_{k>=n} v_k / sigma_k^4, tail-corrected
    delta_sigma_product: np.ndarray  # delta_n^2 . sigma_n^2  (-> 1)
    truncation_tail: float     # the 1/sigma_{n_max}^2 integral-comparison bound


def tail_series_diagnostics(v, n_max: int | None = None) -> TailDiagnostics:
    """Ratios sigma_{n+1}^2/sigma_n^2 and delta_n^2 sigma_n^2 per n.

    delta_n^2 truncates the series at n_max; the missing tail is bounded by
    1/sigma_{n_max}^2 by integral comparison (v_k/sigma_k^4 <=
    integral of dx/x^2 over adjacent sigma^2 values) and added back.
    """
    v = np.asarray(v, dtype=float)
    if n_max is None:
        n_max = v.size
    v = v[:n_max]
    sigma2 = np.cumsum(v)
    if sigma2[-1] <= 0.0:
        raise ValueError("sigma_n^2 must be positive for tail diagnostics")
    ratio = sigma2[1:] / sigma2[:-1]
    tail = 1.0 / sigma2[-1]
    partial = np.cumsum((v / sigma2**2)[::-1])[::-1]
    delta2 = partial + tail
    return TailDiagnostics(
        ns=np.arange(1, n_max + 1),
        sigma2=sigma2,
        ratio=ratio,
        delta2=delta2,
        delta_sigma_product=delta2 * sigma2,
        truncation_tail=tail,
    )


def pathwise_identity_residual(schedule, phi, grid: GradedGrid, x0, n_max: int,
                               factory=None) -> float:
    """Largest |sum phi_k o T^k - sum psi_k o T^k - H_{n+1} o T^{n+1}| over
    the given initial points and 1 <= n <= n_max, with psi accumulated
    independently of the telescoped closed form."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    betas = schedule.betas(n_max + 1)
    decomp = Decomposition(schedule, phi, grid, factory=factory)
    decomp.advance()
    h_interp = decomp.h_interpolator()
    x = apply_map(betas[0], x0)
    sum_phi = np.zeros_like(x0)
    sum_psi = np.zeros_like(x0)
    worst = 0.0
    for i in range(1, n_max + 1):
        c_i = decomp.c[-1]
        phi_i_x = np.asarray(phi(x)) - c_i
        h_i_x = h_interp(x)
        decomp.advance()
        h_interp = decomp.h_interpolator()
        x = apply_map(betas[i], x)
        h_next_x = h_interp(x)
        sum_phi += phi_i_x
        sum_psi += phi_i_x + h_i_x - h_next_x
        worst = max(worst, float(np.max(np.abs(sum_phi - sum_psi - h_next_x))))
    return worst
