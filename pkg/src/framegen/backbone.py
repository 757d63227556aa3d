"""Causal decoder-only transformer over interleaved audio/vision tokens.

Layout is [BOS, v_1, x_1, ..., v_n, x_n] with 1-based positions; audio and
vision enter through separate input projections. LLaMA-style blocks:
RMSNorm pre-normalization, rotary positions applied per head, SwiGLU MLP.
Supports full teacher-forced forwards and O(1)-per-token incremental
decoding against an append-only KV cache, with PI/NTK rescaling and
sliding-window attention for operating beyond the training context.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError


@dataclass
class RoPEConfig:
    base: float = 10000.0
    mode: str = "none"            # none | pi | ntk
    n_train: int = 481
    n_target: int = 481
    swa_window: int | None = None

    def __post_init__(self):
        if self.mode not in ("none", "pi", "ntk"):
            raise ConfigError(f"unknown rope mode {self.mode!r}")
        if self.mode != "none" and self.n_target < self.n_train:
            raise ConfigError("n_target must be >= n_train when extending context")

    @property
    def max_positions(self) -> int | None:
        """Hard position limit; None when SWA keeps offsets in-window."""
        if self.swa_window is not None:
            return None
        return self.n_target if self.mode != "none" else self.n_train

    def effective_base(self, d_h: int) -> float:
        if self.mode == "ntk":
            return self.base * (self.n_target / self.n_train) ** (d_h / (d_h - 2))
        return self.base

    def position_scale(self) -> float:
        if self.mode == "pi":
            return self.n_train / self.n_target
        return 1.0


def rope_angles(positions: torch.Tensor, d_h: int, cfg: RoPEConfig) -> torch.Tensor:
    """Rotation angles i' * phi_l, shape (..., d_h/2)."""
    if d_h % 2 != 0:
        raise ConfigError("per-head dimension must be even for rotary pairing")
    base = cfg.effective_base(d_h)
    ls = torch.arange(d_h // 2, dtype=positions.dtype, device=positions.device)
    freqs = base ** (-2.0 * ls / d_h)
    return positions[..., None] * cfg.position_scale() * freqs


def rope_rotate(vec: torch.Tensor, positions: torch.Tensor, cfg: RoPEConfig) -> torch.Tensor:
    """Pairwise 2-D rotation of the last dim; positions broadcast over heads.

    vec: (..., L, d_h); positions: (L,) 1-based token positions.
    """
    d_h = vec.shape[-1]
    ang = rope_angles(positions.to(vec.dtype), d_h, cfg)
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = vec[..., 0::2], vec[..., 1::2]
    out = torch.empty_like(vec)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


def _mlp_hidden(d_model: int) -> int:
    return ((int(8 * d_model / 3) + 7) // 8) * 8


class SwiGLU(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        hidden = _mlp_hidden(d_model)
        self.w_gate = nn.Linear(d_model, hidden, bias=False)
        self.w_up = nn.Linear(d_model, hidden, bias=False)
        self.w_down = nn.Linear(hidden, d_model, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class Attention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.d_h = d_model // heads
        if self.d_h % 2 != 0:
            raise ConfigError("per-head dim must be even for rotary pairing")
        self.wq = nn.Linear(d_model, d_model, bias=False)
        self.wk = nn.Linear(d_model, d_model, bias=False)
        self.wv = nn.Linear(d_model, d_model, bias=False)
        self.wo = nn.Linear(d_model, d_model, bias=False)

    def _split(self, x):
        b, l, _ = x.shape
        return x.view(b, l, self.heads, self.d_h).transpose(1, 2)  # (B, H, L, d_h)

    def forward_full(self, x, positions, rope: RoPEConfig, mask):
        q = rope_rotate(self._split(self.wq(x)), positions, rope)
        k = rope_rotate(self._split(self.wk(x)), positions, rope)
        v = self._split(self.wv(x))
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_h)
        logits = logits + mask
        attn = torch.softmax(logits, dim=-1)
        out = attn @ v
        b, _, l, _ = out.shape
        return self.wo(out.transpose(1, 2).reshape(b, l, -1))

    def forward_step(self, x, position, rope: RoPEConfig, k_cache, v_cache, key_positions,
                     swa_window):
        # x: (B, 1, d_model); caches (B, H, len, d_h)
        pos = torch.tensor([position], dtype=x.dtype, device=x.device)
        q = rope_rotate(self._split(self.wq(x)), pos, rope)
        k_new = rope_rotate(self._split(self.wk(x)), pos, rope)
        v_new = self._split(self.wv(x))
        k = torch.cat([k_cache, k_new], dim=2) if k_cache is not None else k_new
        v = torch.cat([v_cache, v_new], dim=2) if v_cache is not None else v_new
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_h)
        if swa_window is not None:
            kp = torch.cat([key_positions, pos]) if key_positions is not None else pos
            stale = (position - kp) >= swa_window
            logits = logits.masked_fill(stale.view(1, 1, 1, -1), float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = attn @ v
        b = out.shape[0]
        return self.wo(out.transpose(1, 2).reshape(b, 1, -1)), k, v


class Block(nn.Module):
    def __init__(self, d_model: int, heads: int, eps: float, dropout: float):
        super().__init__()
        self.attn_norm = RMSNorm(d_model, eps)
        self.attn = Attention(d_model, heads)
        self.mlp_norm = RMSNorm(d_model, eps)
        self.mlp = SwiGLU(d_model)
        self.dropout = nn.Dropout(dropout)


@dataclass
class BackboneConfig:
    depth: int = 4
    d_model: int = 128
    heads: int = 4
    c_x: int = 32
    c_v: int = 64
    rms_eps: float = 1e-6
    dropout: float = 0.0


class KVCacheSet:
    """Append-only per-layer key/value history for one decoding stream."""

    def __init__(self, depth: int):
        self.keys: list[torch.Tensor | None] = [None] * depth
        self.values: list[torch.Tensor | None] = [None] * depth
        self.positions: torch.Tensor | None = None  # 1-based, shared across layers

    @property
    def length(self) -> int:
        return 0 if self.positions is None else int(self.positions.numel())


class Backbone(nn.Module):
    """Decoder-only transformer over the interleaved [BOS, v, x, ...] layout."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.audio_in = nn.Linear(cfg.c_x, cfg.d_model)
        self.vision_in = nn.Linear(cfg.c_v, cfg.d_model)
        self.bos = nn.Parameter(torch.randn(cfg.d_model) * 0.02)
        self.null_embed = nn.Parameter(torch.zeros(cfg.c_v))
        self.blocks = nn.ModuleList(
            Block(cfg.d_model, cfg.heads, cfg.rms_eps, cfg.dropout) for _ in range(cfg.depth)
        )
        self.final_norm = RMSNorm(cfg.d_model, cfg.rms_eps) if cfg.depth > 0 else None

    # -- embedding -------------------------------------------------------

    def embed_interleaved(self, audio: torch.Tensor, vision: torch.Tensor) -> torch.Tensor:
        """(B, n, c_x) and (B, n, c_v) -> (B, 2n+1, d_model) in BOS/v/x order.

        Audio token i enters at position 2i+1; it conditions the *next*
        frame, so x_n is included for teacher forcing of nothing and the
        useful outputs stop at position 2n.
        """
        b, n, _ = audio.shape
        a = self.audio_in(audio)
        v = self.vision_in(vision)
        seq = torch.empty(b, 2 * n + 1, self.cfg.d_model, dtype=a.dtype, device=a.device)
        seq[:, 0] = self.bos.to(a.dtype)
        seq[:, 1::2] = v
        seq[:, 2::2] = a
        return seq

    def substitute_null(self, vision: torch.Tensor, mode: str = "all") -> torch.Tensor:
        """Replace vision tokens with the learnable null embedding (v-space)."""
        if mode == "none":
            return vision
        if mode != "all":
            raise ConfigError(f"unknown null substitution mode {mode!r}")
        return self.null_embed.to(vision.dtype).expand_as(vision)

    # -- masks -----------------------------------------------------------

    def _full_mask(self, length: int, rope: RoPEConfig, dtype, device) -> torch.Tensor:
        pos = torch.arange(1, length + 1, device=device)
        allowed = pos[None, :] <= pos[:, None]
        if rope.swa_window is not None:
            allowed &= (pos[:, None] - pos[None, :]) < rope.swa_window
        mask = torch.zeros(length, length, dtype=dtype, device=device)
        mask.masked_fill_(~allowed, float("-inf"))
        return mask

    # -- forward ---------------------------------------------------------

    def _run_blocks_full(self, x: torch.Tensor, rope: RoPEConfig) -> torch.Tensor:
        length = x.shape[1]
        positions = torch.arange(1, length + 1, dtype=x.dtype, device=x.device)
        mask = self._full_mask(length, rope, x.dtype, x.device)
        for blk in self.blocks:
            h = blk.attn.forward_full(blk.attn_norm(x), positions, rope, mask)
            x = x + blk.dropout(h)
            x = x + blk.dropout(blk.mlp(blk.mlp_norm(x)))
        if self.final_norm is not None:
            x = self.final_norm(x)
        return x

    def forward_full(self, audio: torch.Tensor, vision: torch.Tensor,
                     rope: RoPEConfig | None = None) -> torch.Tensor:
        """Teacher-forced forward; returns outputs at all 2n+1 positions."""
        rope = rope or RoPEConfig()
        seq = self.embed_interleaved(audio, vision)
        limit = rope.max_positions
        if limit is not None and seq.shape[1] > limit:
            raise DataError(
                f"sequence of {seq.shape[1]} positions exceeds the limit of {limit}; "
                "extend the context with PI, NTK, or SWA"
            )
        return self._run_blocks_full(seq, rope)

    def forward_embedded(self, seq: torch.Tensor, rope: RoPEConfig | None = None) -> torch.Tensor:
        """Forward over already-embedded inputs (used by probes and tests)."""
        rope = rope or RoPEConfig()
        return self._run_blocks_full(seq, rope)

    def forward_step(self, token: torch.Tensor, kind: str, cache: KVCacheSet,
                     rope: RoPEConfig | None = None) -> torch.Tensor:
        """Advance one position. token: (B, c_x) | (B, c_v) | ignored for BOS.

        Appends K/V to the cache and returns the output at the new position,
        shape (B, d_model).
        """
        rope = rope or RoPEConfig()
        position = cache.length + 1
        limit = rope.max_positions
        if limit is not None and position > limit:
            raise DataError(
                f"KV cache is full at {cache.length} of {limit} positions; "
                "extend the context with PI, NTK, or SWA"
            )
        if kind == "bos":
            if token is None:
                batch = 1
            elif isinstance(token, int):
                batch = token
            else:
                batch = token.shape[0]
            x = self.bos.unsqueeze(0).expand(batch, -1)
        elif kind == "audio":
            x = self.audio_in(token)
        elif kind == "vision":
            x = self.vision_in(token)
        else:
            raise ConfigError(f"unknown token kind {kind!r}")
        x = x[:, None, :]  # (B, 1, d_model)
        for li, blk in enumerate(self.blocks):
            h, k, v = blk.attn.forward_step(
                blk.attn_norm(x), position, rope,
                cache.keys[li], cache.values[li], cache.positions, rope.swa_window)
            cache.keys[li], cache.values[li] = k, v
            x = x + blk.dropout(h)
            x = x + blk.dropout(blk.mlp(blk.mlp_norm(x)))
        pos = torch.tensor([float(position)])
        cache.positions = pos if cache.positions is None else torch.cat([cache.positions, pos])
        if self.final_norm is not None:
            x = self.final_norm(x)
        return x[:, 0, :]

    def new_cache(self) -> KVCacheSet:
        return KVCacheSet(self.cfg.depth)
