"""Desk-scale evaluation metrics over raw latent features.

Two-sample tests (unbiased RBF-MMD with a permutation null, Gaussian
Frechet distance), periodicity estimation via autocorrelation, and an
event-lag synchronization probe that cross-correlates generated latents
against the ground-truth event train.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a**2).sum(axis=1)[:, None]
    bb = (b**2).sum(axis=1)[None, :]
    return np.maximum(aa + bb - 2.0 * a @ b.T, 0.0)


def median_bandwidth(a: np.ndarray, b: np.ndarray) -> float:
    """Median pairwise distance over the pooled sample.

    Pools larger than 8192 points are thinned by a deterministic stride so the
    quadratic distance matrix stays tractable.
    """
    pooled = np.vstack([a, b])
    if len(pooled) > 8192:
        step = -(-len(pooled) // 8192)
        pooled = pooled[::step]
    d2 = _pairwise_sq_dists(pooled, pooled)
    upper = d2[np.triu_indices_from(d2, k=1)]
    med = float(np.sqrt(np.median(upper)))
    return med if med > 0 else 1.0


def _kernel_sum(a: np.ndarray, b: np.ndarray, gamma: float, block: int = 2048) -> float:
    """Sum of exp(-gamma * ||a_i - b_j||^2) over all pairs, in row blocks."""
    total = 0.0
    for i in range(0, len(a), block):
        total += float(np.exp(-gamma * _pairwise_sq_dists(a[i:i + block], b)).sum())
    return total


def rbf_mmd(a: np.ndarray, b: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel (U-statistic estimator)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    m, n = len(a), len(b)
    if m < 2 or n < 2:
        raise DataError("rbf_mmd needs at least 2 samples per set")
    h = bandwidth if bandwidth is not None else median_bandwidth(a, b)
    gamma = 1.0 / (2.0 * h * h)
    if max(m, n) <= 4096:
        kaa = np.exp(-gamma * _pairwise_sq_dists(a, a))
        kbb = np.exp(-gamma * _pairwise_sq_dists(b, b))
        kab = np.exp(-gamma * _pairwise_sq_dists(a, b))
        sum_aa = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
        sum_bb = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
        return float(sum_aa + sum_bb - 2.0 * kab.mean())
    sum_aa = (_kernel_sum(a, a, gamma) - m) / (m * (m - 1))
    sum_bb = (_kernel_sum(b, b, gamma) - n) / (n * (n - 1))
    sum_ab = _kernel_sum(a, b, gamma) / (m * n)
    return float(sum_aa + sum_bb - 2.0 * sum_ab)


def mmd_permutation_pvalue(a: np.ndarray, b: np.ndarray, n_perm: int = 200,
                           bandwidth: float | None = None,
                           rng: np.random.Generator | None = None,
                           max_points: int | None = None) -> tuple[float, float]:
    """(observed mmd^2, permutation-test p-value) under the exchange null.

    max_points caps each set by a seeded uniform subsample so the O(n^2)
    kernel stays tractable on large corpora; both sets are capped identically.
    """
    rng = rng or np.random.default_rng(0)
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if max_points is not None:
        if len(a) > max_points:
            a = a[rng.choice(len(a), size=max_points, replace=False)]
        if len(b) > max_points:
            b = b[rng.choice(len(b), size=max_points, replace=False)]
    h = bandwidth if bandwidth is not None else median_bandwidth(a, b)
    observed = rbf_mmd(a, b, h)
    pooled = np.vstack([a, b])
    m = len(a)
    count = 0
    for _ in range(n_perm):
        perm = rng.permutation(len(pooled))
        stat = rbf_mmd(pooled[perm[:m]], pooled[perm[m:]], h)
        if stat >= observed:
            count += 1
    return observed, (count + 1) / (n_perm + 1)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    sym = 0.5 * (mat + mat.T)
    evals, evecs = np.linalg.eigh(sym)
    if evals.min() < -1e-8 * max(1.0, abs(evals.max())):
        warnings.warn(f"clamping negative eigenvalue {evals.min():.3g} in matrix sqrt")
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def frechet_gaussian(a: np.ndarray, b: np.ndarray) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) on sample moments."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    s_a = np.cov(a, rowvar=False)
    s_b = np.cov(b, rowvar=False)
    s_a = np.atleast_2d(s_a)
    s_b = np.atleast_2d(s_b)
    root_a = _psd_sqrt(s_a)
    cross = _psd_sqrt(root_a @ s_b @ root_a)
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a + s_b - 2.0 * cross))
    return max(val, 0.0)


def period_estimate(signal: np.ndarray) -> float:
    """Dominant period in frames via autocorrelation with parabolic refinement.

    Accepts a 1-D envelope; raises on flat signals where the period is
    undefined.
    """
    x = np.asarray(signal, dtype=np.float64).ravel()
    n = len(x)
    if n < 8:
        raise DataError("signal too short for period estimation")
    x = x - x.mean()
    if np.allclose(x, 0.0):
        raise DataError("flat signal: period undefined")
    ac = np.correlate(x, x, mode="full")[n - 1:]
    ac /= ac[0]
    lo, hi = 2, n // 2
    lags = np.arange(lo, hi + 1)
    best = int(lags[np.argmax(ac[lo:hi + 1])])
    # parabolic sub-lag refinement around the peak
    if lo < best < n - 1:
        y0, y1, y2 = ac[best - 1], ac[best], ac[best + 1]
        denom = y0 - 2 * y1 + y2
        if denom != 0:
            return float(best + 0.5 * (y0 - y2) / denom)
    return float(best)


def event_lag(latents: np.ndarray, events: np.ndarray, pattern: np.ndarray,
              max_lag: int = 8) -> int:
    """Lag (frames) maximizing cross-correlation of the latents' projection
    onto an event pattern against the ground-truth indicator train.

    Positive lag means the latents respond after the events.
    """
    events = np.asarray(events, dtype=np.float64).ravel()
    if events.sum() < 5:
        raise DataError("need at least 5 events for the lag probe")
    proj = np.asarray(latents, dtype=np.float64) @ np.asarray(pattern, dtype=np.float64)
    proj = proj - proj.mean()
    ev = events - events.mean()
    n = len(ev)
    best_lag, best_val = 0, -np.inf
    for lag in range(-max_lag, max_lag + 1):
        if lag >= 0:
            v = float(proj[lag:n] @ ev[:n - lag])
        else:
            v = float(proj[:n + lag] @ ev[-lag:])
        if v > best_val:
            best_val, best_lag = v, lag
    return best_lag


@dataclass
class MetricReport:
    mmd2: float
    mmd2_pvalue: float
    frechet: float
    oracle_nll: float
    period_error: float | None = None
    event_lag: int | None = None
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)
