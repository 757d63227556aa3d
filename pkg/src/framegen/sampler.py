"""Frame-level online generation with dual-stream classifier-free guidance.

Per frame: feed the previous audio latent to both the conditional and the
null KV-cache stream, encode the current video frame to a vision token,
advance the conditional stream with it and the null stream with the
learnable null embedding, combine the two outputs with guidance scale
omega, concatenate with the audio-position output into the head condition,
and sample the next latent with either the multi-step Heun solver or the
few-step consistency sampler. Vision encoding happens inside the per-frame
loop, so no future frame is ever touched before its latent is emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import KVCacheSet, RoPEConfig
from .codec import AudioLatentSeq, CodecStats, DecoderState, Waveform, decode_incremental
from .errors import ConfigError
from .head import EvalCounter, cm_sample, heun_sample
from .model import FrameModel
from .vision import PCAProjector, ProjectedGrid, condition_features, extract_grid, project_grid

DEFAULT_CM_SCHEDULES = {1: (), 2: (2.5,), 4: (5.0, 1.1, 0.08)}


@dataclass
class SamplerConfig:
    omega: float = 3.0
    mode: str = "diffusion"              # diffusion (Heun) | ect (consistency)
    heun_steps: int = 30
    cm_schedule: tuple = (5.0, 1.1, 0.08)
    rope: RoPEConfig | None = None
    streaming_decode: bool = False
    head_cfg: bool = False               # MAR-style guidance inside the head
    patch: int = 8

    def __post_init__(self):
        if self.omega < 0:
            raise ConfigError("guidance scale omega must be non-negative")
        if self.mode not in ("diffusion", "ect"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}")

    @property
    def nfe_per_frame(self) -> int:
        if self.mode == "diffusion":
            return 2 * self.heun_steps - 1
        return 1 + len(self.cm_schedule)


def head_cfg_ablation(z_pre: torch.Tensor, z_cond: torch.Tensor, z_null: torch.Tensor,
                      omega: float, head, counter: EvalCounter):
    """MAR-style CFG: guide inside the head's denoiser combination.

    Returns a denoiser closure evaluating both Concat(z_pre, z_cond) and
    Concat(z_pre, z_null) conditionings per step, doubling the NFE.
    """
    zc = torch.cat([z_pre, z_cond], dim=-1)
    zu = torch.cat([z_pre, z_null], dim=-1)

    def guided(x, t, _z):
        counter.count += 1  # second conditioning evaluation
        d_cond = head.denoise(x, t, zc)
        if omega == 1.0:
            head.denoise(x, t, zu)  # still evaluated; NFE accounting stays exact
            return d_cond
        d_null = head.denoise(x, t, zu)
        return d_null + omega * (d_cond - d_null)

    return guided


class GenerationSession:
    """One logical generation stream: dual CFG caches, rng, codec state."""

    def __init__(self, model: FrameModel, projector: PCAProjector,
                 cfg: SamplerConfig, seed: int = 0,
                 codec_stats: CodecStats | None = None):
        self.model = model
        self.model.eval()
        self.projector = projector
        self.cfg = cfg
        self.rope = cfg.rope or model.default_rope()
        self.cache = model.backbone.new_cache()   # batch dim 2: [cond, null]
        self.rng = torch.Generator().manual_seed(seed)
        self.counter = EvalCounter()
        self.prev_projected: ProjectedGrid | None = None
        self.x_prev: torch.Tensor | None = None   # (1, c_x), standardized
        self.frame_index = 0
        self.codec_stats = codec_stats
        self.decode_state = DecoderState(codec_stats) if codec_stats else None
        self.nfe_per_frame: list[int] = []

    def encode_vision(self, frame: np.ndarray) -> torch.Tensor:
        """Raw frame -> vision token (1, c_v); uses frames i and i-1 only."""
        grid = extract_grid(frame, self.cfg.patch)
        pg = project_grid(grid, self.projector)
        cond = condition_features(pg, self.prev_projected)
        self.prev_projected = pg
        cond_t = torch.as_tensor(cond, dtype=torch.float32)[None]
        with torch.no_grad():
            return self.model.aggregator(cond_t)

    def decode_frame(self, x_std: np.ndarray) -> np.ndarray:
        """Incrementally decode one generated latent to waveform samples."""
        if self.decode_state is None:
            raise ConfigError("streaming decode requires codec stats")
        samples, self.decode_state = decode_incremental(x_std, self.decode_state)
        return samples

    @torch.no_grad()
    def step_frame(self, frame: np.ndarray, decode: bool | None = None):
        """Generate the latent for one frame; returns (x_i, frame_samples|None)."""
        omega = self.cfg.omega
        # (1) audio position: x_{i-1} into both streams (BOS for the first frame)
        if self.x_prev is None:
            out_a = self.model.backbone.forward_step(2, "bos", self.cache, self.rope)
        else:
            tok = self.x_prev.expand(2, -1)
            out_a = self.model.backbone.forward_step(tok, "audio", self.cache, self.rope)
        z_pre = out_a[1] if omega == 0.0 else out_a[0]

        # (2)-(3) vision position: [v_i, null] batched across the two streams
        v_i = self.encode_vision(frame)[0]
        null = self.model.backbone.null_embed
        vis = torch.stack([v_i, null.to(v_i.dtype)])
        out_v = self.model.backbone.forward_step(vis, "vision", self.cache, self.rope)
        z_cond, z_null = out_v[0], out_v[1]

        # (4) guidance; omega = 1 and 0 short-circuit to single-stream outputs
        if omega == 1.0:
            z_post = z_cond
        elif omega == 0.0:
            z_post = z_null
        else:
            z_post = z_null + omega * (z_cond - z_null)

        # (5)-(6) head sampling on z_i = Concat(z_pre, z_post)
        z = torch.cat([z_pre, z_post], dim=-1)[None]
        before = self.counter.count
        if self.cfg.head_cfg:
            fn = head_cfg_ablation(z_pre[None], z_cond[None], z_null[None],
                                   omega, self.model.head, self.counter)
        else:
            fn = self.model.head.denoise
        if self.cfg.mode == "diffusion":
            x = heun_sample(fn, z, self.cfg.heun_steps, self.rng,
                            c_x=self.model.cfg.c_x, counter=self.counter)
        else:
            x = cm_sample(fn, z, self.cfg.cm_schedule, self.rng,
                          c_x=self.model.cfg.c_x, counter=self.counter)
        self.nfe_per_frame.append(self.counter.count - before)

        self.x_prev = x
        self.frame_index += 1

        # (7) optional incremental decode
        x_np = x[0].numpy().astype(np.float64)
        samples = None
        if self.cfg.streaming_decode if decode is None else decode:
            samples = self.decode_frame(x_np)
        return x_np, samples


@dataclass
class GenerationOutput:
    latents_std: np.ndarray               # (n, c_x) in standardized scale
    latents_raw: np.ndarray | None        # destandardized, if stats were given
    waveform: Waveform | None
    nfe_per_frame: list


def generate(model: FrameModel, frames: np.ndarray, projector: PCAProjector,
             cfg: SamplerConfig, seed: int = 0,
             codec_stats: CodecStats | None = None,
             session: GenerationSession | None = None) -> GenerationOutput:
    """Run the online loop over `frames`; pass a session to continue a stream."""
    if session is None:
        session = GenerationSession(model, projector, cfg, seed=seed,
                                    codec_stats=codec_stats)
    latents = []
    chunks = []
    for frame in frames:
        x, samples = session.step_frame(frame)
        latents.append(x)
        if samples is not None:
            chunks.append(samples)
    latents = np.stack(latents) if latents else np.zeros((0, model.cfg.c_x))
    raw = codec_stats.destandardize(latents) if codec_stats is not None and len(latents) else None
    waveform = Waveform(np.concatenate(chunks, axis=1)) if chunks else None
    return GenerationOutput(latents_std=latents, latents_raw=raw,
                            waveform=waveform, nfe_per_frame=list(session.nfe_per_frame))


def continue_generation(session: GenerationSession, extra_frames: np.ndarray,
                        codec_stats: CodecStats | None = None) -> GenerationOutput:
    """Extend an existing stream; caches and rope scaling persist."""
    return generate(session.model, extra_frames, session.projector, session.cfg,
                    codec_stats=codec_stats or session.codec_stats, session=session)
