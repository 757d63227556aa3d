"""Full generative model: vision aggregator + AR backbone + diffusion head."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, RoPEConfig
from .errors import ConfigError
from .head import DiffusionHead, HeadConfig


@dataclass
class AggregatorConfig:
    c_in: int = 12               # conditioned channels (2 * c_p)
    grid_h: int = 8
    grid_w: int = 8
    c_v: int = 64
    heads: int = 4

    def __post_init__(self):
        if self.grid_h % 2 != 0 or self.grid_w % 2 != 0:
            raise ConfigError("grid dimensions must be even for 2x downsampling")
        if self.c_v % self.heads != 0:
            raise ConfigError("c_v must be divisible by aggregator heads")


class Aggregator(nn.Module):
    """One vision token per frame from a conditioned feature grid.

    Channel projection, non-overlapping 2x2 patch mixing (2x spatial
    downsampling), learnable positional embeddings, then a single
    bidirectional attention layer read out at a prepended aggregation token.
    """

    def __init__(self, cfg: AggregatorConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.c_v
        self.channel_proj = nn.Linear(cfg.c_in, d)
        self.down = nn.Linear(4 * d, d)
        n_tokens = (cfg.grid_h // 2) * (cfg.grid_w // 2)
        self.pos_emb = nn.Parameter(torch.randn(n_tokens, d) * 0.02)
        self.agg_token = nn.Parameter(torch.randn(d) * 0.02)
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d, bias=False)
        self.attn_out = nn.Linear(d, d, bias=False)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, H', W', c_in) -> (B, c_v)."""
        b, h, w, _ = grid.shape
        x = self.channel_proj(grid)
        d = self.cfg.c_v
        # 2x2 non-overlapping patch mixing
        x = x.view(b, h // 2, 2, w // 2, 2, d).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, (h // 2) * (w // 2), 4 * d)
        x = self.down(x) + self.pos_emb
        agg = self.agg_token.expand(b, 1, d)
        tokens = torch.cat([agg, x], dim=1)
        hn = self.norm1(tokens)
        q, k, v = self.qkv(hn).chunk(3, dim=-1)
        nh = self.cfg.heads
        dh = d // nh
        q = q.view(b, -1, nh, dh).transpose(1, 2)
        k = k.view(b, -1, nh, dh).transpose(1, 2)
        v = v.view(b, -1, nh, dh).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / dh**0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, -1, d)
        tokens = tokens + self.attn_out(out)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens[:, 0]


@dataclass
class ModelConfig:
    c_x: int = 32
    c_v: int = 64
    c_p: int = 6                 # PCA dims; conditioned channels are 2*c_p
    grid_h: int = 8
    grid_w: int = 8
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    agg_heads: int = 4
    head_width: int = 256
    head_blocks: int = 4
    dropout: float = 0.0         # backbone residual-branch dropout
    head_dropout: float = 0.0    # head hidden-layer dropout
    sigma_data: float = 0.5
    n_train: int = 481

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(depth=self.depth, d_model=self.d_model, heads=self.heads,
                              c_x=self.c_x, c_v=self.c_v, dropout=self.dropout)

    def head_config(self) -> HeadConfig:
        return HeadConfig(c_x=self.c_x, cond_dim=2 * self.d_model, width=self.head_width,
                          blocks=self.head_blocks, dropout=self.head_dropout,
                          sigma_data=self.sigma_data)

    def aggregator_config(self) -> AggregatorConfig:
        return AggregatorConfig(c_in=2 * self.c_p, grid_h=self.grid_h, grid_w=self.grid_w,
                                c_v=self.c_v, heads=self.agg_heads)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class FrameModel(nn.Module):
    """Aggregator + interleaved AR backbone + diffusion head, trained jointly."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.aggregator = Aggregator(cfg.aggregator_config())
        self.backbone = Backbone(cfg.backbone_config())
        self.head = DiffusionHead(cfg.head_config())

    def default_rope(self) -> RoPEConfig:
        return RoPEConfig(n_train=self.cfg.n_train, n_target=self.cfg.n_train)

    def vision_tokens(self, cond_grids: torch.Tensor) -> torch.Tensor:
        """(B, n, H', W', 2*c_p) -> (B, n, c_v)."""
        b, n = cond_grids.shape[:2]
        flat = cond_grids.reshape(b * n, *cond_grids.shape[2:])
        return self.aggregator(flat).view(b, n, -1)

    def compute_z(self, latents: torch.Tensor, vtoks: torch.Tensor,
                  rope: RoPEConfig | None = None) -> torch.Tensor:
        """Teacher-forced condition vectors, shape (B, n, 2*d_model).

        z_i concatenates the backbone outputs after consuming x_{i-1}
        (position 2i-1, with x_0 = BOS) and after consuming v_i (position 2i).
        """
        rope = rope or self.default_rope()
        out = self.backbone.forward_full(latents, vtoks, rope)
        n = latents.shape[1]
        z_pre = out[:, 0:2 * n:2]   # outputs at audio positions 1, 3, ..., 2n-1
        z_post = out[:, 1:2 * n:2]  # outputs at vision positions 2, 4, ..., 2n
        return torch.cat([z_pre, z_post], dim=-1)

    def clone(self) -> "FrameModel":
        import copy
        other = FrameModel(self.cfg)
        other.load_state_dict(copy.deepcopy(self.state_dict()))
        return other
