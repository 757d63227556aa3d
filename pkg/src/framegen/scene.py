"""Synthetic scene generation with known event ground truth.

A scene is a dark canvas with a set of emitters at fixed horizontal
positions. When an emitter fires (Bernoulli rate or fixed period) its frame
shows a bright colored blob at that position; otherwise the frame stays
dark. The same event track drives the toy latent process, so rendered video
and oracle audio latents are synchronized by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .toyprocess import ToyProcess

_PATTERN_COLORS = np.array([
    [1.0, 0.3, 0.2],
    [0.2, 1.0, 0.4],
    [0.3, 0.4, 1.0],
    [1.0, 0.9, 0.2],
    [0.9, 0.2, 1.0],
    [0.2, 0.95, 0.95],
])


@dataclass
class Emitter:
    pattern_id: int
    position: float  # horizontal, in [0, 1]
    rate: float | None = None  # Bernoulli firing probability per frame
    period: int | None = None  # fixed period in frames (fires at i % period == phase)
    phase: int = 0

    def __post_init__(self):
        if (self.rate is None) == (self.period is None):
            raise DataError("emitter needs exactly one of rate or period")
        if not 0.0 <= self.position <= 1.0:
            raise DataError(f"emitter position must be in [0, 1], got {self.position}")


@dataclass
class SceneSpec:
    seed: int
    n_frames: int
    emitters: list[Emitter]
    height: int = 64
    width: int = 64
    beta: float = 0.9
    sigma_n: float = 0.1

    def __post_init__(self):
        if len(self.emitters) == 0:
            raise DataError("scene needs at least one emitter")
        if self.n_frames < 1:
            raise DataError("scene needs at least one frame")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_frames": self.n_frames,
            "height": self.height,
            "width": self.width,
            "beta": self.beta,
            "sigma_n": self.sigma_n,
            "emitters": [
                {"pattern_id": e.pattern_id, "position": e.position,
                 "rate": e.rate, "period": e.period, "phase": e.phase}
                for e in self.emitters
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        emitters = [Emitter(**e) for e in d["emitters"]]
        return cls(seed=d["seed"], n_frames=d["n_frames"], emitters=emitters,
                   height=d["height"], width=d["width"],
                   beta=d["beta"], sigma_n=d["sigma_n"])


@dataclass
class EventTrack:
    """Binary indicators, shape (n, K), plus emitter horizontal positions."""

    e: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        self.e = np.asarray(self.e)
        self.positions = np.asarray(self.positions, dtype=np.float64)


def sample_events(spec: SceneSpec, rng: np.random.Generator) -> EventTrack:
    n, k = spec.n_frames, len(spec.emitters)
    e = np.zeros((n, k), dtype=np.int64)
    for j, em in enumerate(spec.emitters):
        if em.period is not None:
            idx = np.arange(n)
            e[:, j] = ((idx % em.period) == (em.phase % em.period)).astype(np.int64)
        else:
            e[:, j] = (rng.random(n) < em.rate).astype(np.int64)
    return EventTrack(e=e, positions=np.array([em.position for em in spec.emitters]))


def _blob(height: int, width: int, cx: float, cy: float, radius: float) -> np.ndarray:
    ys = np.arange(height)[:, None]
    xs = np.arange(width)[None, :]
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    return np.exp(-d2 / (2 * radius**2))


def render_frames(spec: SceneSpec, track: EventTrack) -> np.ndarray:
    """Frames (n, H, W, 3) in [0, 1]; dark unless an emitter fires."""
    frames = np.zeros((spec.n_frames, spec.height, spec.width, 3), dtype=np.float64)
    for j, em in enumerate(spec.emitters):
        cx = em.position * (spec.width - 1)
        cy = spec.height / 2.0
        blob = _blob(spec.height, spec.width, cx, cy, radius=spec.height / 12.0)
        color = _PATTERN_COLORS[em.pattern_id % len(_PATTERN_COLORS)]
        fired = np.nonzero(track.e[:, j])[0]
        for i in fired:
            frames[i] += blob[:, :, None] * color[None, None, :]
    return np.clip(frames, 0.0, 1.0)


def toy_process_for(spec: SceneSpec, c_x: int) -> ToyProcess:
    return ToyProcess.from_emitters(
        [em.pattern_id for em in spec.emitters],
        [em.position for em in spec.emitters],
        c_x=c_x, beta=spec.beta, sigma_n=spec.sigma_n,
    )


def render(spec: SceneSpec, c_x: int = 32) -> tuple[np.ndarray, EventTrack, np.ndarray]:
    """Render a scene: (frames, event track, oracle latents).

    Deterministic in spec.seed; frame i visually encodes exactly the events
    e_{i,.}, and the oracle latents follow the toy process driven by the
    same event track.
    """
    rng = np.random.default_rng(spec.seed)
    track = sample_events(spec, rng)
    frames = render_frames(spec, track)
    process = toy_process_for(spec, c_x)
    latents = process.rollout(track.e, rng)
    return frames, track, latents
