"""Two-stage training: diffusion pretraining and consistency fine-tuning.

Stage 1 minimizes the uncertainty-weighted denoising score matching loss
lambda(t) exp(-u(t)) ||x0 - D(x0 + t*eps, t, z)||^2 + u(t) with
ln t ~ N(P_mean, P_std) and whole-sequence vision dropout for CFG. Stage 2
fine-tunes the same network into a consistency model: the student output at
noise level t is pulled toward a stop-gradient EMA teacher evaluated at
r = m(t, Iters), where the gap t - r anneals to zero over training. Both
stages replicate the noise draw four times per token and train the head and
backbone jointly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import torch

from .errors import ConfigError, NumericalError
from .model import FrameModel

SIGMA_DATA = 0.5


@dataclass
class NoiseSamplerCfg:
    p_mean: float
    p_std: float

    def __post_init__(self):
        if self.p_std < 0:
            raise ConfigError("p_std must be non-negative")


STAGE1_NOISE = NoiseSamplerCfg(p_mean=-0.4, p_std=1.0)
STAGE2_NOISE = NoiseSamplerCfg(p_mean=-0.8, p_std=1.6)


def sample_noise_level(cfg: NoiseSamplerCfg, shape, rng: torch.Generator) -> torch.Tensor:
    """t = exp(p_mean + p_std * g), g standard normal."""
    g = torch.randn(shape, generator=rng)
    return torch.exp(cfg.p_mean + cfg.p_std * g)


@dataclass
class ECTMapCfg:
    q: float
    s: int
    k: float = 8.0
    b: float = 1.0

    def __post_init__(self):
        if self.q <= 1 or self.s < 1 or self.k <= 0 or self.b <= 0:
            raise ConfigError("ECT mapping requires q > 1, s >= 1, k > 0, b > 0")

    @classmethod
    def cf(cls, total_iter: int) -> "ECTMapCfg":
        return cls(q=2.0, s=max(1, total_iter // 8), k=8.0, b=1.0)

    @classmethod
    def in_(cls, total_iter: int) -> "ECTMapCfg":
        return cls(q=4.0, s=max(1, total_iter // 4), k=8.0, b=1.0)

    @classmethod
    def preset(cls, name: str, total_iter: int) -> "ECTMapCfg":
        if name.lower() == "cf":
            return cls.cf(total_iter)
        if name.lower() == "in":
            return cls.in_(total_iter)
        raise ConfigError(f"unknown ECT preset {name!r}; expected CF or IN")


def ect_map(t, iters: int, cfg: ECTMapCfg):
    """Annealed teacher noise level r = max(0, (1 - q^-ceil(iters/s) k sigmoid(-b t)) t)."""
    t = torch.as_tensor(t)
    bucket = math.ceil(iters / cfg.s)
    shrink = cfg.q ** (-bucket) * cfg.k * torch.sigmoid(torch.as_tensor(-cfg.b) * t)
    return torch.clamp((1.0 - shrink) * t, min=0.0)


def lambda_weight(t, sigma_data: float = SIGMA_DATA):
    t = torch.as_tensor(t)
    return (t**2 + sigma_data**2) / (t * sigma_data) ** 2


def consistency_weight(t, sigma_data: float = SIGMA_DATA):
    t = torch.as_tensor(t)
    return 1.0 / t**2 + 1.0 / sigma_data**2


def pseudo_huber(a: torch.Tensor, b: torch.Tensor, nu: float = 0.06) -> torch.Tensor:
    """d(a, b) = sqrt(||a - b||^2 + nu^2) - nu over the last dim."""
    return torch.sqrt(((a - b) ** 2).sum(dim=-1) + nu**2) - nu


def scheduled_lr(base_lr: float, iteration: int, total_iter: int,
                 warmup_iter: int = 100, final_frac: float = 0.05) -> float:
    """Linear warmup then cosine decay to final_frac * base_lr."""
    if warmup_iter > 0 and iteration < warmup_iter:
        return base_lr * (iteration + 1) / warmup_iter
    span = max(1, total_iter - warmup_iter)
    p = min(1.0, (iteration - warmup_iter) / span)
    floor = final_frac * base_lr
    return floor + (base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * p))


def ema_update(target, source, mu: float) -> None:
    """In-place convex combination: target <- mu*target + (1-mu)*source."""
    with torch.no_grad():
        for pt, ps in zip(target.parameters(), source.parameters()):
            pt.mul_(mu).add_(ps, alpha=1.0 - mu)


def apply_vision_dropout(model: FrameModel, vtoks: torch.Tensor,
                         null_mask: torch.Tensor) -> torch.Tensor:
    """Replace whole sequences of vision tokens with the null embedding."""
    null = model.backbone.null_embed.to(vtoks.dtype)
    mask = null_mask.view(-1, 1, 1)
    return torch.where(mask, null.expand_as(vtoks), vtoks)


def stage1_loss(model: FrameModel, latents: torch.Tensor, cond_grids: torch.Tensor,
                t: torch.Tensor, eps: torch.Tensor, null_mask: torch.Tensor):
    """Stage-1 DSM loss for fixed noise draws.

    latents: (B, n, c_x) standardized; cond_grids: (B, n, H', W', 2c_p);
    t: (B, n, R); eps: (B, n, R, c_x); null_mask: (B,) bool.
    Returns (scalar loss, breakdown dict). Loss is summed over tokens and
    averaged over batch and the R noise replicas.
    """
    vtoks = apply_vision_dropout(model, model.vision_tokens(cond_grids), null_mask)
    z = model.compute_z(latents, vtoks)
    x0 = latents.unsqueeze(2)                      # (B, n, 1, c_x)
    x_t = x0 + t.unsqueeze(-1) * eps
    z_rep = z.unsqueeze(2).expand(-1, -1, t.shape[2], -1)
    d_out = model.head.denoise(x_t, t, z_rep)
    resid = ((x0 - d_out) ** 2).sum(dim=-1)        # (B, n, R)
    u = model.head.uncertainty(t)
    lam = lambda_weight(t, model.cfg.sigma_data)
    per_draw = lam * torch.exp(-u) * resid + u
    loss = per_draw.sum(dim=1).mean()
    return loss, {
        "loss": float(loss.detach()),
        "residual": float((lam * torch.exp(-u) * resid).sum(dim=1).mean().detach()),
        "uncertainty": float(u.mean().detach()),
    }


def stage2_loss(student: FrameModel, teacher: FrameModel, latents: torch.Tensor,
                cond_grids: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                null_mask: torch.Tensor, iters: int, map_cfg: ECTMapCfg,
                nu: float = 0.06, head_only: bool = False):
    """Stage-2 ECT loss for fixed noise draws (shared eps couples x^t and x^r)."""
    r = ect_map(t, iters, map_cfg)
    x0 = latents.unsqueeze(2)
    x_t = x0 + t.unsqueeze(-1) * eps
    x_r = x0 + r.unsqueeze(-1) * eps

    vtoks = apply_vision_dropout(student, student.vision_tokens(cond_grids), null_mask)
    z_s = student.compute_z(latents, vtoks)
    if head_only:
        z_s = z_s.detach()
    z_s = z_s.unsqueeze(2).expand(-1, -1, t.shape[2], -1)
    g_student = student.head.denoise(x_t, t, z_s)

    with torch.no_grad():
        vtoks_t = apply_vision_dropout(teacher, teacher.vision_tokens(cond_grids), null_mask)
        z_t = teacher.compute_z(latents, vtoks_t)
        z_t = z_t.unsqueeze(2).expand(-1, -1, t.shape[2], -1)
        # at r == 0 the boundary parameterization gives exactly x^r = x0
        g_teacher = teacher.head.denoise(x_r, r, z_t)

    d = pseudo_huber(g_student, g_teacher, nu)
    w = consistency_weight(t, student.cfg.sigma_data)
    loss = (w * d).sum(dim=1).mean()
    return loss, {
        "loss": float(loss.detach()),
        "dt_mean": float((t - r).mean().detach()),
        "r_zero_frac": float((r == 0).float().mean().detach()),
    }


@dataclass
class TrainConfig:
    stage: int = 1
    total_iter: int = 20000
    batch_size: int = 32
    n_t_draws: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.02
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    ema_rate: float = 0.9999
    p_uncond: float = 0.1
    nu: float = 0.06
    ect_preset: str = "CF"
    head_only: bool = False
    dropout: float = 0.1         # stage defaults: 0.1 (stage 1) / 0.2 (stage 2)
    warmup_iter: int = 100
    final_lr_frac: float = 0.05


class TrainState:
    """Student, sampling-EMA, optional ECT teacher, optimizer, iteration, rng."""

    def __init__(self, model: FrameModel, cfg: TrainConfig, seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.ema = model.clone()
        for p in self.ema.parameters():
            p.requires_grad_(False)
        self.teacher: FrameModel | None = None
        if cfg.stage == 2:
            self.teacher = model.clone()
            for p in self.teacher.parameters():
                p.requires_grad_(False)
            self.teacher.eval()
            self.map_cfg = ECTMapCfg.preset(cfg.ect_preset, cfg.total_iter)
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas,
                                     weight_decay=cfg.weight_decay)
        self.iteration = 0
        self.rng = torch.Generator().manual_seed(seed)
        self.noise_cfg = STAGE1_NOISE if cfg.stage == 1 else STAGE2_NOISE
        self._set_dropout(cfg.dropout)

    def _set_dropout(self, p: float) -> None:
        for m in self.model.modules():
            if isinstance(m, torch.nn.Dropout):
                m.p = p

    def _draws(self, batch_latents: torch.Tensor):
        b, n, c_x = batch_latents.shape
        r = self.cfg.n_t_draws
        t = sample_noise_level(self.noise_cfg, (b, n, r), self.rng).to(batch_latents.dtype)
        eps = torch.randn((b, n, r, c_x), generator=self.rng).to(batch_latents.dtype)
        null_mask = torch.rand((b,), generator=self.rng) < self.cfg.p_uncond
        return t, eps, null_mask

    def _step_seed(self) -> int:
        # dropout layers draw from the global torch generator; derive their
        # seed from the state generator so a restored state replays exactly
        return int(torch.randint(0, 2**31 - 1, (1,), generator=self.rng))

    def _optimize(self, loss: torch.Tensor) -> float:
        lr = scheduled_lr(self.cfg.lr, self.iteration, self.cfg.total_iter,
                          self.cfg.warmup_iter, self.cfg.final_lr_frac)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        return float(grad_norm)


def dsm_step(state: TrainState, latents: torch.Tensor, cond_grids: torch.Tensor) -> dict:
    """One Stage-1 optimization step; returns a loss breakdown record."""
    state.model.train()
    t, eps, null_mask = state._draws(latents)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(state._step_seed())
        loss, info = stage1_loss(state.model, latents, cond_grids, t, eps, null_mask)
    if not torch.isfinite(loss):
        bad = torch.nonzero(~torch.isfinite(
            ((latents.unsqueeze(2) + t.unsqueeze(-1) * eps)).sum(-1)))
        idx = bad[0].tolist() if len(bad) else "unknown"
        raise NumericalError(f"non-finite Stage-1 loss at iteration {state.iteration}; "
                             f"first bad (batch, token, draw) index: {idx}, "
                             f"t range [{float(t.min()):.3g}, {float(t.max()):.3g}]")
    info["grad_norm"] = state._optimize(loss)
    ema_update(state.ema, state.model, state.cfg.ema_rate)
    state.iteration += 1
    info["iter"] = state.iteration
    return info


def ect_step(state: TrainState, latents: torch.Tensor, cond_grids: torch.Tensor) -> dict:
    """One Stage-2 optimization step with the stop-gradient EMA teacher."""
    if state.teacher is None:
        raise ConfigError("Stage-2 state must be initialized from a Stage-1 checkpoint")
    state.model.train()
    t, eps, null_mask = state._draws(latents)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(state._step_seed())
        loss, info = stage2_loss(state.model, state.teacher, latents, cond_grids, t, eps,
                                 null_mask, state.iteration, state.map_cfg,
                                 nu=state.cfg.nu, head_only=state.cfg.head_only)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite Stage-2 loss at iteration {state.iteration}; "
                             f"t range [{float(t.min()):.3g}, {float(t.max()):.3g}]")
    info["grad_norm"] = state._optimize(loss)
    ema_update(state.teacher, state.model, state.cfg.ema_rate)
    ema_update(state.ema, state.model, state.cfg.ema_rate)
    state.iteration += 1
    info["iter"] = state.iteration
    return info
