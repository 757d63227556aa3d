"""Shared fixtures: a desk-scale trained model cached on disk.

Training runs once per config hash and is reused across test sessions via
tests/_artifacts/<hash>/. Delete that directory to force a retrain.
"""

import pathlib
from types import SimpleNamespace

import pytest

from framegen.checkpoint import load_checkpoint
from framegen.config import RunConfig, config_hash
from framegen.dataset import generate_dataset, load_dataset, save_dataset
from framegen.runner import train_stage

ARTIFACTS = pathlib.Path(__file__).resolve().parent / "_artifacts"

# Desk-scale run: small stereo latents (c_x = 8), 32-frame clips, a model
# small enough to train on one CPU core while leaving headroom on the
# conditional-oracle tolerances.
DESK_CFG = RunConfig(
    seed=0,
    hop=4, channels=2, sample_rate=120,
    n_clips=6144, n_test_clips=512, n_frames=32,
    periodic_period=8, periodic_fraction=0.5,
    height=64, width=64, patch=8, pca_cev=0.99,
    d_model=64, depth=3, heads=4, c_v=32, agg_heads=4,
    head_width=128, head_blocks=3,
    batch_size=16, n_t_draws=8, ema_rate=0.999,
    warmup_iter=100, final_lr_frac=0.02,
    stage1_iters=20000, stage1_lr=1e-3, stage1_dropout=0.0,
    stage2_iters=6000, stage2_lr=2e-4, stage2_dropout=0.0,
    checkpoint_every=2000,
)


def _stage_checkpoint(cfg, ds, stage, root, stage1_path=None):
    path = root / f"stage{stage}.ckpt"
    total = cfg.stage1_iters if stage == 1 else cfg.stage2_iters
    if path.exists():
        state = load_checkpoint(path, expected_config_hash=config_hash(cfg))
        if state.iteration >= total:
            return state
        return train_stage(cfg, ds, stage, path, resume_path=path,
                           log_path=root / f"stage{stage}.jsonl")
    return train_stage(cfg, ds, stage, path, stage1_path=stage1_path,
                       log_path=root / f"stage{stage}.jsonl")


@pytest.fixture(scope="session")
def desk():
    """Dataset plus trained stage-1/stage-2 states at the desk config."""
    cfg = DESK_CFG
    h = config_hash(cfg)
    root = ARTIFACTS / h
    root.mkdir(parents=True, exist_ok=True)
    ds_dir = root / "dataset"
    if (ds_dir / "manifest.json").exists():
        ds = load_dataset(ds_dir)
    else:
        ds = generate_dataset(cfg)
        save_dataset(ds, ds_dir)
    stage1 = _stage_checkpoint(cfg, ds, 1, root)
    stage2 = _stage_checkpoint(cfg, ds, 2, root, stage1_path=root / "stage1.ckpt")
    return SimpleNamespace(cfg=cfg, cfg_hash=h, ds=ds, root=root,
                           stage1=stage1, stage2=stage2)
