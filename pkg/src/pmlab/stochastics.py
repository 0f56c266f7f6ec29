"""Monte Carlo ensembles over Lebesgue-random initial points: variance
growth, growth-exponent fits, self-norming CLT / LIL diagnostics, the
Gaussian surrogate for the ASIP bookkeeping, and the nearby-map / quenched
experiments.

Determinism contract: every result is a pure function of (config, master
seed).  Trajectories are processed in fixed-size blocks whose RNG streams
are keyed by (seed, block index); block partials are merged in block order,
so the worker count never changes the bits.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .grid import GradedGrid
from .maps import ConstantSchedule, IIDSchedule, NearbySchedule, apply_map
from .martingale import Decomposition
from .transfer import OperatorFactory

__all__ = [
    "GrowthFit",
    "EnsembleResult",
    "run_ensemble",
    "KSReport",
    "clt_test",
    "LILReport",
    "lil_band_diagnostic",
    "SurrogatePath",
    "AsipReport",
    "asip_surrogate",
    "nearby_maps_experiment",
    "quenched_experiment",
]

_BLOCK = 8192


def _block_bounds(m: int, block: int = _BLOCK):
    return [(lo, min(lo + block, m)) for lo in range(0, m, block)]


def _block_seed(master_seed: int, block_index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=np.array([master_seed, block_index], dtype=np.uint64))
    )


def _stratified_block(m_total: int, lo: int, hi: int, master_seed: int,
                      block_index: int) -> np.ndarray:
    # one jittered point per stratum of width 1/M; the jitter stream is keyed
    # by (seed, block) so blocks are independent and order-free
    u = _block_seed(master_seed, block_index).random(hi - lo)
    return (np.arange(lo, hi) + u) / m_total


@dataclass
class GrowthFit:
    """Power-law fit of the variance curve Sigma_n^2 ~ n^gamma."""

    checkpoints: np.ndarray
    sigma2_hat: np.ndarray
    stderr: np.ndarray
    gamma_hat: float
    gamma_ci: tuple
    degenerate: bool = False


@dataclass
class EnsembleResult:
    checkpoints: np.ndarray
    snapshots: np.ndarray      # (n_checkpoints, M) Birkhoff sums
    sigma2_hat: np.ndarray
    stderr: np.ndarray
    fit: GrowthFit
    lil: "LILReport | None" = None

    def normalized(self, j: int) -> np.ndarray:
        """S_n / Sigma_hat_n at checkpoint j (self-norming CLT input)."""
        return self.snapshots[j] / np.sqrt(self.sigma2_hat[j])


def _fit_gamma(checkpoints, sigma2_hat, block_sigma2=None):
    """log-log fit over the top half of checkpoints; jackknife CI over
    trajectory blocks when block partials are supplied."""
    checkpoints = np.asarray(checkpoints, dtype=float)
    top = np.arange(len(checkpoints) // 2, len(checkpoints))
    if top.size < 2:  # need at least two points for a slope
        top = np.arange(len(checkpoints))
    if top.size < 2 or np.any(sigma2_hat[top] <= 0.0):
        return float("nan"), (float("nan"), float("nan")), True
    x = np.log(checkpoints[top])

    def slope(s2):
        return float(np.polyfit(x, np.log(s2[top]), 1)[0])

    gamma = slope(sigma2_hat)
    ci = (float("nan"), float("nan"))
    if block_sigma2 is not None and len(block_sigma2) > 2:
        b = len(block_sigma2)
        weights = np.array([w for w, _ in block_sigma2], dtype=float)
        parts = np.array([p for _, p in block_sigma2])
        total = weights.sum()
        loo = []
        for i in range(b):
            s2 = (sigma2_hat * total - weights[i] * parts[i]) / (total - weights[i])
            if np.any(s2[top] <= 0.0):
                continue
            loo.append(slope(s2))
        if len(loo) > 2:
            loo = np.array(loo)
            k = len(loo)
            se = np.sqrt((k - 1) / k * np.sum((loo - loo.mean()) ** 2))
            ci = (gamma - 1.96 * se, gamma + 1.96 * se)
    return gamma, ci, False


def run_ensemble(schedule, phi, centerings, m_trajectories: int, n_max: int,
                 checkpoints, seed: int = 0, workers: int = 1,
                 lil_window=None, variance_curve=None) -> EnsembleResult:
    """Advance M trajectories from stratified-uniform initial points and
    collect Birkhoff sums of phi_k o T^k at the checkpoints.

    ``centerings`` must come from the grid pipeline (c_k = int phi D_k dm for
    k = 1..n_max); letting the ensemble center itself would bias Sigma^2.
    ``lil_window=(n_min, n_max)`` additionally tracks the running LIL sup
    normalized by ``variance_curve`` (sigma_n^2 per n).
    """
    checkpoints = np.asarray(sorted(int(c) for c in checkpoints))
    if checkpoints[-1] > n_max or checkpoints[0] < 1:
        raise ValueError("checkpoints must lie in [1, n_max]")
    centerings = np.asarray(centerings, dtype=float)
    if centerings.size < n_max:
        raise ValueError("need centerings c_k for every k <= n_max")
    betas = schedule.betas(n_max)
    track_lil = lil_window is not None
    if track_lil:
        curve = np.asarray(variance_curve, dtype=float)
        if curve.size < n_max:
            raise ValueError("variance_curve must cover n_max")
        denom = np.sqrt(curve * np.maximum(np.log(np.log(np.maximum(curve, 1.1))), 1e-30))

    ckpt_index = {int(n): j for j, n in enumerate(checkpoints)}

    def run_block(b, lo, hi):
        x = _stratified_block(m_trajectories, lo, hi, seed, b)
        s = np.zeros(hi - lo)
        snaps = np.empty((len(checkpoints), hi - lo))
        sup = np.zeros(hi - lo) if track_lil else None
        for k in range(1, n_max + 1):
            x = apply_map(betas[k - 1], x)
            s += phi(x) - centerings[k - 1]
            j = ckpt_index.get(k)
            if j is not None:
                snaps[j] = s
            if track_lil and lil_window[0] <= k <= lil_window[1] and denom[k - 1] > 0:
                np.maximum(sup, np.abs(s) / denom[k - 1], out=sup)
        return snaps, sup

    bounds = _block_bounds(m_trajectories)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda args: run_block(*args),
                         [(b, lo, hi) for b, (lo, hi) in enumerate(bounds)])
            )
    else:
        results = [run_block(b, lo, hi) for b, (lo, hi) in enumerate(bounds)]

    snapshots = np.concatenate([r[0] for r in results], axis=1)
    # fixed pairwise merge order: block partials combined left to right
    block_stats = [
        (r[0].shape[1], np.mean(r[0] ** 2, axis=1)) for r in results
    ]
    sigma2_hat = np.zeros(len(checkpoints))
    total = 0
    for w, p in block_stats:
        sigma2_hat = (sigma2_hat * total + p * w) / (total + w)
        total += w
    stderr = np.std(snapshots**2, axis=1) / np.sqrt(m_trajectories)

    gamma, ci, degenerate = _fit_gamma(checkpoints, sigma2_hat, block_stats)
    fit = GrowthFit(checkpoints, sigma2_hat, stderr, gamma, ci, degenerate)
    lil = None
    if track_lil:
        sups = np.concatenate([r[1] for r in results])
        lil = _summarize_lil(sups)
    return EnsembleResult(checkpoints, snapshots, sigma2_hat, stderr, fit, lil)


# ---------------------------------------------------------------------------
# CLT / LIL diagnostics


@dataclass
class KSReport:
    statistic: float
    p_value: float
    degenerate: bool = False


def clt_test(normalized_sums, min_size: int = 1000) -> KSReport:
    """Two-sided Kolmogorov-Smirnov distance of S_n/Sigma_hat_n against N(0,1)."""
    z = np.asarray(normalized_sums, dtype=float)
    if z.size < min_size:
        raise ValueError(f"snapshot too small ({z.size} < {min_size})")
    if not np.all(np.isfinite(z)) or np.std(z) == 0.0:
        return KSReport(float("nan"), float("nan"), degenerate=True)
    res = stats.kstest(z, "norm")
    return KSReport(float(res.statistic), float(res.pvalue))


@dataclass
class LILReport:
    """Fraction of trajectories whose normalized running sup lies in the LIL
    band [1-delta, 1+delta].  Asymptotic-only diagnostic: loglog convergence
    is far beyond desk scale, so there is no pass/fail attached."""

    band_fraction: float
    delta: float
    quantiles: dict
    degenerate: bool = False


def _summarize_lil(sups: np.ndarray, delta: float = 0.2) -> LILReport:
    if np.all(sups == 0.0):
        return LILReport(0.0, delta, {}, degenerate=True)
    qs = {q: float(np.quantile(sups, q)) for q in (0.1, 0.25, 0.5, 0.75, 0.9)}
    frac = float(np.mean((sups >= 1.0 - delta) & (sups <= 1.0 + delta)))
    return LILReport(frac, delta, qs)


def lil_band_diagnostic(sups, delta: float = 0.2) -> LILReport:
    """Band report from per-trajectory running sups (see EnsembleResult.lil)."""
    return _summarize_lil(np.asarray(sups, dtype=float), delta)


# ---------------------------------------------------------------------------
# ASIP surrogate


@dataclass
class SurrogatePath:
    """One path of independent G_i ~ N(0, v_i) with partial sums; the
    variance ledger sum_{i<=n} Var G_i = sigma_n^2 holds by construction."""

    v: np.ndarray
    draws: np.ndarray
    partial_sums: np.ndarray

    @property
    def variance_ledger(self) -> np.ndarray:
        return np.cumsum(self.v)


@dataclass
class AsipReport:
    path: SurrogatePath
    checkpoints: np.ndarray
    sigma2: np.ndarray
    surrogate_samples: np.ndarray  # (n_checkpoints, M)
    ks_by_checkpoint: list
    ledger_exact: bool


def asip_surrogate(v, seed: int, checkpoints, birkhoff_snapshots,
                   m_samples: int | None = None) -> AsipReport:
    """Gaussian surrogate for the Birkhoff-sum process.

    Draws one full path of G_i ~ N(0, v_i) plus M surrogate partial-sum
    samples at the checkpoints (via independent checkpoint increments, which
    has the identical law), and compares their law against the matching
    Birkhoff snapshots by two-sample KS.  The almost-sure coupling itself is
    not constructible, so the comparison is distributional.
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0.0):
        raise ValueError("psi second moments v_i must be nonnegative")
    checkpoints = np.asarray(sorted(int(c) for c in checkpoints))
    if checkpoints[-1] > v.size:
        raise ValueError("checkpoints exceed the available v_i scan")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    draws = rng.standard_normal(v.size) * np.sqrt(v)
    path = SurrogatePath(v=v, draws=draws, partial_sums=np.cumsum(draws))

    sigma2 = np.cumsum(v)[checkpoints - 1]
    snapshots = np.asarray(birkhoff_snapshots)
    m = m_samples or snapshots.shape[1]
    seg_var = np.diff(np.concatenate([[0.0], sigma2]))
    incr = rng.standard_normal((len(checkpoints), m)) * np.sqrt(seg_var)[:, None]
    surrogate = np.cumsum(incr, axis=0)
    ks = [
        stats.ks_2samp(surrogate[j], snapshots[j]) for j in range(len(checkpoints))
    ]
    ledger = bool(
        np.array_equal(path.variance_ledger, np.cumsum(path.v))
    )
    return AsipReport(
        path=path,
        checkpoints=checkpoints,
        sigma2=sigma2,
        surrogate_samples=surrogate,
        ks_by_checkpoint=[KSReport(float(k.statistic), float(k.pvalue)) for k in ks],
        ledger_exact=ledger,
    )


# ---------------------------------------------------------------------------
# Section-5 experiments

# hypothesis of the nearby-maps / random-compositions theorems
_BETA_LIMIT = 1.0 / 8.0


def _pipeline_fit(schedule, phi, grid, m_trajectories, n_max, checkpoints,
                  seed, factory=None, workers: int = 1):
    decomp = Decomposition(schedule, phi, grid, factory=factory)
    scan = decomp.scan(n_max)
    if np.allclose(scan.v, 0.0, atol=1e-14):
        fit = GrowthFit(np.asarray(checkpoints), np.zeros(len(checkpoints)),
                        np.zeros(len(checkpoints)), float("nan"),
                        (float("nan"), float("nan")), degenerate=True)
        return fit, scan, None
    result = run_ensemble(schedule, phi, scan.c, m_trajectories, n_max,
                          checkpoints, seed=seed, workers=workers)
    return result.fit, scan, result


def nearby_maps_experiment(beta0: float, epsilon: float, phi, grid: GradedGrid,
                           m_trajectories: int, n_max: int, checkpoints,
                           seed: int = 0, n_schedules: int = 4,
                           alpha_cap: float | None = None, workers: int = 1):
    """Growth fits for randomized schedules inside (beta0-eps, beta0+eps).

    The nearby-maps theorem needs 0 < beta0, beta_k < 1/8 and phi not a
    coboundary; a degenerate fit (phi effectively constant) is reported as
    non-applicable rather than fitted.
    """
    if not 0.0 < beta0 < _BETA_LIMIT:
        raise ValueError(f"beta0 must lie in (0, 1/8), got {beta0}")
    if beta0 - epsilon <= 0.0 or beta0 + epsilon >= _BETA_LIMIT:
        raise ValueError("perturbation window escapes (0, 1/8)")
    cap = alpha_cap or _BETA_LIMIT
    fits = []
    for j in range(n_schedules):
        if epsilon == 0.0:
            sched = ConstantSchedule(beta0, alpha_cap=cap)
        else:
            sched = NearbySchedule(beta0, epsilon, seed=seed + 1000 * j,
                                   alpha_cap=cap)
        fit, _, _ = _pipeline_fit(sched, phi, grid, m_trajectories, n_max,
                                  checkpoints, seed=seed + j, workers=workers)
        fits.append(fit)
    return fits


def quenched_experiment(alphabet, probabilities, phi, grid: GradedGrid,
                        m_trajectories: int, n_max: int, checkpoints,
                        master_seed: int = 0, n_omega: int = 8,
                        workers: int = 1):
    """Per-omega pipeline runs for random compositions over a finite alphabet.

    Each omega is one realization of the i.i.d. symbol sequence; the
    centerings are quenched (computed from the per-omega operator sequence).
    Returns the list of per-omega GrowthFits.
    """
    for b in alphabet:
        if not 0.0 < b < _BETA_LIMIT:
            raise ValueError(f"alphabet value {b} outside (0, 1/8)")
    cap = _BETA_LIMIT
    factory = OperatorFactory(grid, max_cached=len(alphabet) + 1)
    fits = []
    for j in range(n_omega):
        sched = IIDSchedule(tuple(alphabet), tuple(probabilities),
                            seed=master_seed + j, alpha_cap=cap)
        fit, _, _ = _pipeline_fit(sched, phi, grid, m_trajectories, n_max,
                                  checkpoints, seed=master_seed + 7919 * (j + 1),
                                  factory=factory, workers=workers)
        fits.append(fit)
    return fits
