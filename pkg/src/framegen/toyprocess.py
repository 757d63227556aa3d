"""Analytic latent process driving the toy audio-visual task.

Latents follow a conditionally Gaussian AR(1) law

    x_i = beta * x_{i-1} + sum_k e_{k,i} * g_k + sigma_n * zeta_i,

where e_{k,i} are binary event indicators, g_k are fixed per-emitter
patterns whose left/right channel halves are panned by the emitter's
horizontal position, and zeta_i is standard normal. The conditional
p(x_i | x_{i-1}, e_i) is Gaussian in closed form, which gives exact
oracles for sampling, likelihood, and synchronization probes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


def event_pattern(pattern_id: int, position: float, c_x: int) -> np.ndarray:
    """Unit-energy base pattern for an emitter, panned by horizontal position.

    The first half of the latent dimensions is the left channel, the second
    half the right; they are scaled by (1 - p) and p respectively.
    """
    if c_x % 2 != 0:
        raise DataError(f"c_x must be even for stereo panning, got {c_x}")
    half = c_x // 2
    rng = np.random.default_rng(0xE0E0 + int(pattern_id))
    base = rng.standard_normal(half)
    base /= np.linalg.norm(base)
    g = np.concatenate([(1.0 - position) * base, position * base])
    return g


@dataclass
class ToyProcess:
    """Closed-form conditional latent law for a fixed emitter layout."""

    patterns: np.ndarray  # (K, c_x), already panned
    beta: float = 0.9
    sigma_n: float = 0.1

    def __post_init__(self):
        self.patterns = np.atleast_2d(np.asarray(self.patterns, dtype=np.float64))
        if not abs(self.beta) < 1.0:
            raise DataError(f"|beta| must be < 1 for stationarity, got {self.beta}")

    @property
    def c_x(self) -> int:
        return self.patterns.shape[1]

    @classmethod
    def from_emitters(cls, pattern_ids, positions, c_x: int,
                      beta: float = 0.9, sigma_n: float = 0.1) -> "ToyProcess":
        pats = np.stack([event_pattern(pid, p, c_x) for pid, p in zip(pattern_ids, positions)])
        return cls(patterns=pats, beta=beta, sigma_n=sigma_n)

    def conditional_mean(self, x_prev: np.ndarray, events_i: np.ndarray) -> np.ndarray:
        """mean of p(x_i | x_{i-1}, e_i) = beta*x_{i-1} + sum_k e_k g_k."""
        drive = np.asarray(events_i, dtype=np.float64) @ self.patterns
        return self.beta * np.asarray(x_prev, dtype=np.float64) + drive

    def oracle_sample(self, x_prev: np.ndarray, events_i: np.ndarray,
                      rng: np.random.Generator) -> np.ndarray:
        mean = self.conditional_mean(x_prev, events_i)
        return mean + self.sigma_n * rng.standard_normal(mean.shape)

    def oracle_nll(self, x_i: np.ndarray, x_prev: np.ndarray, events_i: np.ndarray) -> float:
        """Exact negative log-density of the conditional Gaussian."""
        mean = self.conditional_mean(x_prev, events_i)
        resid = np.asarray(x_i, dtype=np.float64) - mean
        c_x = resid.shape[-1]
        return float(0.5 * c_x * np.log(2 * np.pi * self.sigma_n**2)
                     + 0.5 * np.sum(resid**2) / self.sigma_n**2)

    def rollout(self, events: np.ndarray, rng: np.random.Generator,
                x0: np.ndarray | None = None) -> np.ndarray:
        """Sample a full latent trajectory given an (n, K) event track."""
        events = np.atleast_2d(np.asarray(events, dtype=np.float64))
        n = events.shape[0]
        x = np.zeros(self.c_x) if x0 is None else np.asarray(x0, dtype=np.float64)
        out = np.empty((n, self.c_x))
        for i in range(n):
            x = self.oracle_sample(x, events[i], rng)
            out[i] = x
        return out
