"""Per-token conditional diffusion head with EDM preconditioning.

The denoiser is D(x_t, t, z) = c_skip(t) x_t + c_out(t) NN(c_in(t) x_t,
c_noise(t), z); the network is a stack of modulated MLP blocks whose
scale/shift/gate are derived from the noise embedding plus the projected
condition vector. An uncertainty scalar u(t) (one affine layer over the
noise embedding) weights the training loss. Sampling is either a
deterministic Heun solver over the rho=7 schedule or few-step consistency
sampling; both count denoiser evaluations explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DataError

SIGMA_DATA = 0.5

T_MAX = 80.0
T_MIN = 0.0
RHO = 7.0

NOISE_EMBED_FEATURES = 64  # 32 sin/cos pairs over c_noise(t)


def precondition(t, sigma_data: float = SIGMA_DATA):
    """EDM scalings (c_skip, c_out, c_in, c_noise) for noise level t >= 0.

    c_noise is only defined for t > 0; at t == 0 a placeholder zero is
    returned there (the boundary where c_skip = 1 and c_out = 0, so the
    network output is never consumed).
    """
    t = torch.as_tensor(t, dtype=torch.get_default_dtype() if not torch.is_tensor(t) else None)
    if (t < 0).any():
        raise DataError("noise level t must be non-negative")
    s2 = sigma_data**2
    denom = t**2 + s2
    c_skip = s2 / denom
    c_out = t * sigma_data / torch.sqrt(denom)
    c_in = 1.0 / torch.sqrt(denom)
    c_noise = torch.where(t > 0, 0.25 * torch.log(t.clamp_min(torch.finfo(t.dtype).tiny)),
                          torch.zeros_like(t))
    return c_skip, c_out, c_in, c_noise


def _fourier_frequencies(dtype=torch.float32):
    # log-spaced angular frequencies in [1, 64]; moderate top end keeps
    # u(t) smooth on the working range of c_noise(t).
    n = NOISE_EMBED_FEATURES // 2
    return torch.logspace(0, math.log10(64.0), n, dtype=dtype)


def noise_features(c_noise: torch.Tensor, dtype=None) -> torch.Tensor:
    """Fixed Fourier features of c_noise(t), shape (..., 64)."""
    dtype = dtype or c_noise.dtype
    freqs = _fourier_frequencies(dtype).to(c_noise.device)
    ang = c_noise[..., None].to(dtype) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass
class HeadConfig:
    c_x: int = 32
    cond_dim: int = 256          # 2 * d_model of the backbone
    width: int = 256
    blocks: int = 4
    dropout: float = 0.0
    sigma_data: float = SIGMA_DATA


class ModulatedBlock(nn.Module):
    """Residual MLP block with (scale, shift, gate) modulation."""

    def __init__(self, width: int, dropout: float):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False)
        self.mod = nn.Linear(width, 3 * width)
        nn.init.zeros_(self.mod.weight)
        nn.init.zeros_(self.mod.bias)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, cond):
        scale, shift, gate = self.mod(cond).chunk(3, dim=-1)
        h = self.norm(x) * (1 + scale) + shift
        h = self.fc2(self.dropout(F.silu(self.fc1(h))))
        return x + gate * h


class DiffusionHead(nn.Module):
    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        self.x_in = nn.Linear(cfg.c_x, cfg.width)
        self.z_in = nn.Linear(cfg.cond_dim, cfg.width)
        self.noise_mlp = nn.Sequential(
            nn.Linear(NOISE_EMBED_FEATURES, cfg.width), nn.SiLU(),
            nn.Linear(cfg.width, cfg.width),
        )
        self.blocks = nn.ModuleList(
            ModulatedBlock(cfg.width, cfg.dropout) for _ in range(cfg.blocks)
        )
        self.out = nn.Linear(cfg.width, cfg.c_x)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        # one affine layer over the noise embedding; zero-init so u(0) = 0
        self.u_layer = nn.Linear(NOISE_EMBED_FEATURES, 1)
        nn.init.zeros_(self.u_layer.weight)
        nn.init.zeros_(self.u_layer.bias)

    def network(self, x_scaled, c_noise, z):
        cond = self.noise_mlp(noise_features(c_noise)) + self.z_in(z)
        h = self.x_in(x_scaled)
        for blk in self.blocks:
            h = blk(h, cond)
        return self.out(h)

    def denoise(self, x_t: torch.Tensor, t: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """Preconditioned denoiser; at t == 0 returns x_t by the boundary law."""
        if not torch.isfinite(x_t).all():
            raise DataError("non-finite input to denoiser")
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device)
        if t.ndim == 0:
            t = t.expand(x_t.shape[:-1])
        c_skip, c_out, c_in, c_noise = precondition(t, self.cfg.sigma_data)
        nn_out = self.network(c_in[..., None] * x_t, c_noise, z)
        return c_skip[..., None] * x_t + c_out[..., None] * nn_out

    def uncertainty(self, t) -> torch.Tensor:
        """Continuous uncertainty u(t); scalar per noise level."""
        t = torch.as_tensor(t)
        if (t <= 0).any():
            raise DataError("uncertainty is defined for t > 0")
        c_noise = 0.25 * torch.log(t)
        return self.u_layer(noise_features(c_noise)).squeeze(-1)


class EvalCounter:
    """Counts denoiser evaluations (NFE) during sampling."""

    def __init__(self):
        self.count = 0


def _denoise_counted(head_fn, x, t, z, counter: EvalCounter) -> torch.Tensor:
    counter.count += 1
    if float(t) == 0.0:
        return x  # boundary: c_skip(0)=1, c_out(0)=0; the network is not run
    return head_fn(x, t, z)


def heun_schedule(n_steps: int, t_max: float = T_MAX, t_min: float = T_MIN,
                  rho: float = RHO) -> torch.Tensor:
    """rho-warped descent schedule with an appended terminal zero.

    Returns n_steps + 1 values; t_0 = t_max, t_{n_steps-1} = t_min, and the
    final appended entry is exactly 0 so every solver run ends at the data
    manifold.
    """
    if n_steps < 2:
        raise DataError("Heun sampling needs at least 2 steps")
    j = torch.arange(n_steps, dtype=torch.float64)
    ts = (t_max ** (1 / rho) + j / (n_steps - 1) * (t_min ** (1 / rho) - t_max ** (1 / rho))) ** rho
    return torch.cat([ts, torch.zeros(1, dtype=torch.float64)])


def heun_sample(head_fn, z: torch.Tensor, n_steps: int, rng: torch.Generator,
                c_x: int | None = None, counter: EvalCounter | None = None) -> torch.Tensor:
    """Deterministic Heun solver for dx/dt = (x - D(x, t, z)) / t.

    head_fn(x, t, z) evaluates the denoiser at scalar noise level t.
    Second-order correction on every interval except the last; evaluations
    at t = 0 resolve through the boundary identity D(x, 0) = x.
    """
    counter = counter if counter is not None else EvalCounter()
    ts = heun_schedule(n_steps)
    if c_x is None:
        c_x = z.shape[-1]
    shape = z.shape[:-1] + (c_x,)
    eps = torch.randn(shape, generator=rng, dtype=torch.float32)
    x = float(ts[0]) * eps.to(z.dtype)
    n_intervals = len(ts) - 1
    for i in range(n_intervals):
        t_cur, t_next = float(ts[i]), float(ts[i + 1])
        d_cur = _denoise_counted(head_fn, x, t_cur, z, counter)
        slope = (x - d_cur) / t_cur if t_cur > 0 else torch.zeros_like(x)
        x_next = x + (t_next - t_cur) * slope
        if i < n_intervals - 1:
            d_next = _denoise_counted(head_fn, x_next, t_next, z, counter)
            slope_next = (x_next - d_next) / t_next if t_next > 0 else torch.zeros_like(x)
            x = x + (t_next - t_cur) * 0.5 * (slope + slope_next)
        else:
            x = x_next
    return x


def cm_sample(head_fn, z: torch.Tensor, intermediate_ts, rng: torch.Generator,
              c_x: int | None = None, counter: EvalCounter | None = None,
              t_max: float = T_MAX, shared_noise: bool = False) -> torch.Tensor:
    """Few-step consistency sampling; NFE = 1 + len(intermediate_ts).

    Each intermediate step re-noises the current estimate at t_k with fresh
    noise (shared_noise reuses the initial draw, exposed for ablation).
    """
    ts = [float(t) for t in intermediate_ts]
    if any(t >= t_max for t in ts):
        raise DataError(f"intermediate noise levels must be < t_max={t_max}")
    if any(b >= a for a, b in zip(ts, ts[1:])):
        raise DataError("intermediate noise levels must be strictly decreasing")
    counter = counter if counter is not None else EvalCounter()
    if c_x is None:
        c_x = z.shape[-1]
    shape = z.shape[:-1] + (c_x,)
    eps0 = torch.randn(shape, generator=rng, dtype=torch.float32).to(z.dtype)
    x0 = _denoise_counted(head_fn, t_max * eps0, t_max, z, counter)
    for t_k in ts:
        eps_k = eps0 if shared_noise else torch.randn(
            shape, generator=rng, dtype=torch.float32).to(z.dtype)
        x0 = _denoise_counted(head_fn, x0 + t_k * eps_k, t_k, z, counter)
    return x0
