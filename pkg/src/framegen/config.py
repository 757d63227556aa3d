"""Run configuration: line-based key=value files with a strict key set.

Unknown keys are rejected; the sha256 hash of the canonicalized config is
embedded in datasets, checkpoints, and reports so mismatched artifacts are
detected at load time.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError
from .model import ModelConfig


@dataclass
class RunConfig:
    seed: int = 0

    # codec / latent geometry
    hop: int = 16
    channels: int = 2
    sample_rate: int = 480

    # toy scene / dataset
    n_clips: int = 64
    n_test_clips: int = 16
    n_frames: int = 240
    n_emitters: int = 2
    emitter_rate: float = 0.15
    periodic_period: int = 8
    periodic_fraction: float = 0.5   # fraction of clips with one periodic emitter
    beta: float = 0.9
    sigma_n: float = 0.1
    height: int = 64
    width: int = 64
    patch: int = 8
    pca_cev: float = 0.70

    # model
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    c_v: int = 64
    agg_heads: int = 4
    head_width: int = 256
    head_blocks: int = 4
    sigma_data: float = 0.5

    # optimization (shared)
    batch_size: int = 32
    n_t_draws: int = 4
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    ema_rate: float = 0.9999
    p_uncond: float = 0.1
    checkpoint_every: int = 1000
    warmup_iter: int = 100
    final_lr_frac: float = 0.05

    # stage 1
    stage1_iters: int = 20000
    stage1_lr: float = 1e-4
    stage1_p_mean: float = -0.4
    stage1_p_std: float = 1.0
    stage1_dropout: float = 0.1

    # stage 2
    stage2_iters: int = 10000
    stage2_lr: float = 1e-4
    stage2_p_mean: float = -0.8
    stage2_p_std: float = 1.6
    stage2_dropout: float = 0.2
    ect_preset: str = "CF"
    nu: float = 0.06
    head_only: bool = False

    # sampling
    omega: float = 3.0
    sampler_mode: str = "diffusion"
    heun_steps: int = 30
    cm_schedule: tuple = (5.0, 1.1, 0.08)
    rope_mode: str = "none"
    rope_base: float = 10000.0
    target_frames: int = 0           # 0 means the training window

    @property
    def c_x(self) -> int:
        return self.hop * self.channels

    @property
    def n_train_positions(self) -> int:
        return 2 * self.n_frames + 1

    def model_config(self) -> ModelConfig:
        # c_p is dataset-dependent (PCA rank); filled in when a projector exists
        return ModelConfig(
            c_x=self.c_x, c_v=self.c_v, grid_h=self.height // self.patch,
            grid_w=self.width // self.patch, d_model=self.d_model, depth=self.depth,
            heads=self.heads, agg_heads=self.agg_heads, head_width=self.head_width,
            head_blocks=self.head_blocks, sigma_data=self.sigma_data,
            n_train=self.n_train_positions,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(name: str, raw: str):
    f = _FIELDS[name]
    typ = f.type if isinstance(f.type, type) else type(f.default)
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {name}: expected a boolean, got {raw!r}")
    if typ is tuple:
        return tuple(float(v) for v in raw.split(",") if v.strip()) if raw.strip() else ()
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"key {name}: cannot parse {raw!r} as {typ.__name__}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines; '#' starts a comment; unknown keys are rejected."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(RunConfig):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            val = ",".join(repr(v) for v in val)
        lines.append(f"{f.name}={val}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]
