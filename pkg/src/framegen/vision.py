"""Per-frame vision conditioning: grid features, PCA, temporal difference.

Grid features are deterministic per-patch statistics of a single frame
(mean/std color, quadrant luminances, gradient magnitudes), standing in for
a pretrained encoder. They are PCA-reduced, concatenated with the temporal
difference from the previous frame, and aggregated to one token per frame
by a small learnable non-causal attention layer (see :mod:`framegen.model`
for the aggregator network). Everything here is frame-local, so cross-frame
causality reduces to the explicit i-1 dependence of the temporal diff.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError

GRID_CHANNELS = 12  # rgb mean(3) + rgb std(3) + quadrant luminance(4) + |grad|(2)


def extract_grid(frame: np.ndarray, patch: int = 8) -> np.ndarray:
    """Patch statistics of one frame, shape (H', W', 12).

    Deterministic and strictly patch-local: gradients are taken inside each
    patch, so a change confined to one patch moves only that grid cell.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DataError(f"frame must be (H, W, 3), got {frame.shape}")
    h, w, _ = frame.shape
    if h % patch != 0 or w % patch != 0:
        raise DataError(f"resolution {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    # (H', W', patch, patch, 3)
    tiles = frame.reshape(hp, patch, wp, patch, 3).transpose(0, 2, 1, 3, 4)
    grid = np.empty((hp, wp, GRID_CHANNELS))
    grid[:, :, 0:3] = tiles.mean(axis=(2, 3))
    grid[:, :, 3:6] = tiles.std(axis=(2, 3))
    lum = tiles.mean(axis=4)  # (H', W', patch, patch)
    q = patch // 2
    grid[:, :, 6] = lum[:, :, :q, :q].mean(axis=(2, 3))   # top-left
    grid[:, :, 7] = lum[:, :, :q, q:].mean(axis=(2, 3))   # top-right
    grid[:, :, 8] = lum[:, :, q:, :q].mean(axis=(2, 3))   # bottom-left
    grid[:, :, 9] = lum[:, :, q:, q:].mean(axis=(2, 3))   # bottom-right
    grid[:, :, 10] = np.abs(np.diff(lum, axis=3)).mean(axis=(2, 3))  # horizontal grad
    grid[:, :, 11] = np.abs(np.diff(lum, axis=2)).mean(axis=(2, 3))  # vertical grad
    return grid


@dataclass
class PCAProjector:
    """Orthonormal projection onto the top principal directions."""

    mean: np.ndarray          # (c_g,)
    basis: np.ndarray         # (c_g, c_p), orthonormal columns
    cev: float                # cumulative explained variance actually retained

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)

    @property
    def c_p(self) -> int:
        return self.basis.shape[1]

    @property
    def fingerprint(self) -> str:
        return hashlib.sha1(self.basis.tobytes() + self.mean.tobytes()).hexdigest()[:16]

    def project(self, grid: np.ndarray) -> np.ndarray:
        """(..., c_g) -> (..., c_p)."""
        return (np.asarray(grid, dtype=np.float64) - self.mean) @ self.basis

    def lift(self, proj: np.ndarray) -> np.ndarray:
        """(..., c_p) -> (..., c_g) reconstruction."""
        return proj @ self.basis.T + self.mean


def fit_pca(samples: np.ndarray, target_cev: float = 0.70) -> PCAProjector:
    """Fit PCA keeping the smallest c_p with explained variance >= target_cev.

    samples: (N, c_g) with N >= c_g.
    """
    samples = np.asarray(samples, dtype=np.float64)
    samples = samples.reshape(-1, samples.shape[-1])
    n, c_g = samples.shape
    if n < c_g:
        raise DataError(f"need at least {c_g} samples to fit PCA, got {n}")
    if not 0.0 < target_cev <= 1.0:
        raise DataError(f"target_cev must be in (0, 1], got {target_cev}")
    mean = samples.mean(axis=0)
    cov = np.cov(samples - mean, rowvar=False, bias=False)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 0.0:
        warnings.warn("degenerate covariance: all variance is zero; keeping one component")
        return PCAProjector(mean=mean, basis=evecs[:, :1], cev=1.0)
    ratios = np.cumsum(evals) / total
    c_p = int(np.searchsorted(ratios, target_cev - 1e-12) + 1)
    rank = int((evals > 1e-12 * evals[0]).sum())
    if c_p > rank:
        warnings.warn(f"degenerate covariance: requested cev needs {c_p} dims, rank is {rank}")
        c_p = rank
    return PCAProjector(mean=mean, basis=evecs[:, :c_p], cev=float(ratios[c_p - 1]))


@dataclass
class ProjectedGrid:
    """PCA-projected grid features carrying their projector fingerprint."""

    values: np.ndarray        # (H', W', c_p)
    fingerprint: str


def project_grid(grid: np.ndarray, projector: PCAProjector) -> ProjectedGrid:
    return ProjectedGrid(values=projector.project(grid), fingerprint=projector.fingerprint)


def condition_features(g_i: ProjectedGrid, g_prev: ProjectedGrid | None) -> np.ndarray:
    """Channel concat of the projected grid and its temporal difference.

    For the first frame the previous grid is taken equal to the current one,
    so the difference channels are zero.
    """
    if g_prev is not None and g_prev.fingerprint != g_i.fingerprint:
        raise DataError("projector mismatch between adjacent frames")
    prev_vals = g_i.values if g_prev is None else g_prev.values
    return np.concatenate([g_i.values, g_i.values - prev_vals], axis=-1)


def condition_sequence(projected: np.ndarray) -> np.ndarray:
    """Apply condition_features along a sequence: (n, H', W', c_p) -> (n, H', W', 2c_p)."""
    diffs = np.concatenate([np.zeros_like(projected[:1]), np.diff(projected, axis=0)], axis=0)
    return np.concatenate([projected, diffs], axis=-1)
