"""Seed-regenerable toy dataset: scenes, oracle latents, conditioned grids.

A dataset directory holds a JSON manifest (scene specs and split tags), an
npz of per-clip arrays (raw oracle latents, event tracks, PCA-projected and
temporally differenced grid features), the fitted PCA projector, and the
fitted codec standardization stats. Everything is deterministic in the run
seed, so clips can be regenerated bit-identically from their specs.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecStats, fit_stats
from .config import RunConfig, config_hash
from .errors import DataError
from .scene import Emitter, EventTrack, SceneSpec, render
from .vision import PCAProjector, condition_sequence, extract_grid, fit_pca


def make_scene_spec(cfg: RunConfig, clip_seed: int, periodic: bool) -> SceneSpec:
    """Deterministic emitter layout for one clip."""
    rng = np.random.default_rng(clip_seed)
    emitters = []
    for j in range(cfg.n_emitters):
        position = float(rng.uniform(0.05, 0.95))
        pattern_id = int(rng.integers(0, 6))
        if periodic and j == 0:
            emitters.append(Emitter(pattern_id=pattern_id, position=position,
                                    period=cfg.periodic_period,
                                    phase=int(rng.integers(0, cfg.periodic_period))))
        else:
            emitters.append(Emitter(pattern_id=pattern_id, position=position,
                                    rate=cfg.emitter_rate))
    return SceneSpec(seed=clip_seed, n_frames=cfg.n_frames, emitters=emitters,
                     height=cfg.height, width=cfg.width, beta=cfg.beta,
                     sigma_n=cfg.sigma_n)


@dataclass
class Clip:
    clip_id: int
    spec: SceneSpec
    split: str
    latents: np.ndarray       # (n, c_x) raw (unstandardized)
    events: np.ndarray        # (n, K)
    positions: np.ndarray     # (K,)
    cond_grids: np.ndarray    # (n, H', W', 2*c_p) float32


@dataclass
class Dataset:
    clips: list
    projector: PCAProjector
    stats: CodecStats
    cfg_hash: str

    def split(self, tag: str) -> list:
        return [c for c in self.clips if c.split == tag]

    @property
    def c_p(self) -> int:
        return self.projector.c_p


def _clip_frames_and_grids(spec: SceneSpec, cfg: RunConfig):
    frames, track, latents = render(spec, c_x=cfg.c_x)
    grids = np.stack([extract_grid(f, cfg.patch) for f in frames])
    return frames, track, latents, grids


def generate_dataset(cfg: RunConfig) -> Dataset:
    """Build the full corpus in memory; deterministic in cfg.seed."""
    if cfg.n_clips < 1:
        raise DataError("need at least one clip")
    total = cfg.n_clips + cfg.n_test_clips
    base = np.random.default_rng(cfg.seed).integers(0, 2**31 - 1, size=total)
    records = []
    all_train_grids = []
    all_train_latents = []
    for ci in range(total):
        split = "train" if ci < cfg.n_clips else "test"
        # consistent periodic/aperiodic ratio within each split
        local = ci if split == "train" else ci - cfg.n_clips
        periodic = (local % max(1, round(1 / max(cfg.periodic_fraction, 1e-9)))) == 0 \
            if cfg.periodic_fraction > 0 else False
        spec = make_scene_spec(cfg, int(base[ci]), periodic)
        _, track, latents, grids = _clip_frames_and_grids(spec, cfg)
        records.append((ci, spec, split, track, latents, grids))
        if split == "train":
            all_train_grids.append(grids.reshape(-1, grids.shape[-1]))
            all_train_latents.append(latents)
    projector = fit_pca(np.concatenate(all_train_grids), cfg.pca_cev)
    stats = fit_stats(np.concatenate(all_train_latents), hop=cfg.hop,
                      channels=cfg.channels, sample_rate=cfg.sample_rate)
    clips = []
    for ci, spec, split, track, latents, grids in records:
        projected = projector.project(grids)
        cond = condition_sequence(projected).astype(np.float32)
        clips.append(Clip(clip_id=ci, spec=spec, split=split, latents=latents,
                          events=track.e, positions=track.positions, cond_grids=cond))
    return Dataset(clips=clips, projector=projector, stats=stats,
                   cfg_hash=config_hash(cfg))


def manifest_dict(ds: Dataset) -> dict:
    return {
        "config_hash": ds.cfg_hash,
        "clips": [{"clip_id": c.clip_id, "split": c.split, "scene": c.spec.to_dict()}
                  for c in ds.clips],
    }


def manifest_hash(ds: Dataset) -> str:
    blob = json.dumps(manifest_dict(ds), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def save_dataset(ds: Dataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest_dict(ds), f, indent=1, sort_keys=True)
    arrays = {}
    for c in ds.clips:
        arrays[f"latents_{c.clip_id}"] = c.latents
        arrays[f"events_{c.clip_id}"] = c.events
        arrays[f"positions_{c.clip_id}"] = c.positions
        arrays[f"cond_{c.clip_id}"] = c.cond_grids
    np.savez_compressed(os.path.join(out_dir, "arrays.npz"), **arrays)
    np.savez(os.path.join(out_dir, "projector.npz"), mean=ds.projector.mean,
             basis=ds.projector.basis, cev=ds.projector.cev)
    np.savez(os.path.join(out_dir, "stats.npz"), mean=ds.stats.mean,
             scale=ds.stats.scale, hop=ds.stats.hop, channels=ds.stats.channels,
             sample_rate=ds.stats.sample_rate)


def load_dataset(out_dir) -> Dataset:
    path = os.path.join(out_dir, "manifest.json")
    if not os.path.exists(path):
        raise DataError(f"no dataset manifest at {path}")
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    arrays = np.load(os.path.join(out_dir, "arrays.npz"))
    proj = np.load(os.path.join(out_dir, "projector.npz"))
    projector = PCAProjector(mean=proj["mean"], basis=proj["basis"], cev=float(proj["cev"]))
    st = np.load(os.path.join(out_dir, "stats.npz"))
    stats = CodecStats(mean=st["mean"], scale=float(st["scale"]), hop=int(st["hop"]),
                       channels=int(st["channels"]), sample_rate=int(st["sample_rate"]))
    clips = []
    for rec in manifest["clips"]:
        cid = rec["clip_id"]
        clips.append(Clip(
            clip_id=cid, spec=SceneSpec.from_dict(rec["scene"]), split=rec["split"],
            latents=arrays[f"latents_{cid}"], events=arrays[f"events_{cid}"],
            positions=arrays[f"positions_{cid}"], cond_grids=arrays[f"cond_{cid}"],
        ))
    return Dataset(clips=clips, projector=projector, stats=stats,
                   cfg_hash=manifest["config_hash"])
