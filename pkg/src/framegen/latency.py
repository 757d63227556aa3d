"""Per-frame latency measurement protocol.

Token-level latency spans feeding the previous audio latent through head
sampling of the next one, including vision encoding; waveform-level
additionally includes the incremental decode. A flush callable runs before
every clock read so pending asynchronous work cannot leak across region
boundaries (a no-op on synchronous CPU backends). Statistics are computed
over per-clip means after a 3-clip warm-up, excluding each clip's first
frame.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np

from .codec import CodecStats
from .errors import DataError
from .model import FrameModel
from .sampler import GenerationSession, SamplerConfig
from .vision import PCAProjector


@dataclass
class LatencyStats:
    mean_ms: float
    std_ms: float


@dataclass
class LatencyReport:
    token_level: LatencyStats
    waveform_level: LatencyStats
    per_clip_token_ms: list
    per_clip_waveform_ms: list
    nfe: int
    n_clips_measured: int
    n_warmup: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def _check_clock() -> None:
    res = time.get_clock_info("perf_counter").resolution
    if res > 1e-4:
        warnings.warn(f"clock resolution {res * 1e3:.3f} ms is coarser than 0.1 ms; "
                      "latency figures may be unreliable")


def measure(model: FrameModel, projector: PCAProjector, clips,
            cfg: SamplerConfig, codec_stats: CodecStats, warmup: int = 3,
            flush=None, seed: int = 0, config_hash: str = "") -> LatencyReport:
    """Measure per-frame latency over a list of clips (arrays of frames).

    Requires at least warmup + 1 clips; per-clip means exclude the first
    frame of each clip, and report statistics exclude the warm-up clips.
    """
    if len(clips) < warmup + 1:
        raise DataError(f"need at least {warmup + 1} clips ({warmup} warm-up + 1 measured), "
                        f"got {len(clips)}")
    _check_clock()
    flush = flush or (lambda: None)

    clip_token_means = []
    clip_wave_means = []
    for ci, frames in enumerate(clips):
        session = GenerationSession(model, projector, cfg, seed=seed + ci,
                                    codec_stats=codec_stats)
        token_ms = []
        wave_ms = []
        for frame in frames:
            flush()
            t0 = time.perf_counter_ns()
            x, _ = session.step_frame(frame, decode=False)
            flush()
            t1 = time.perf_counter_ns()
            session.decode_frame(x)
            flush()
            t2 = time.perf_counter_ns()
            token_ms.append((t1 - t0) / 1e6)
            wave_ms.append((t2 - t0) / 1e6)
        # first frame excluded from every clip mean
        clip_token_means.append(float(np.mean(token_ms[1:])))
        clip_wave_means.append(float(np.mean(wave_ms[1:])))

    measured_token = clip_token_means[warmup:]
    measured_wave = clip_wave_means[warmup:]
    return LatencyReport(
        token_level=LatencyStats(float(np.mean(measured_token)), float(np.std(measured_token))),
        waveform_level=LatencyStats(float(np.mean(measured_wave)), float(np.std(measured_wave))),
        per_clip_token_ms=measured_token,
        per_clip_waveform_ms=measured_wave,
        nfe=cfg.nfe_per_frame,
        n_clips_measured=len(measured_token),
        n_warmup=warmup,
        config_hash=config_hash,
    )
