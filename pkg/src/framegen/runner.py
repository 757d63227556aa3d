"""High-level experiment drivers shared by the CLI and the test harness."""

from __future__ import annotations

import json

import numpy as np
import torch

from .backbone import RoPEConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_hash
from .dataset import Dataset
from .errors import ConfigError, DataError
from .head import cm_sample, heun_sample
from .metrics import MetricReport, event_lag, mmd_permutation_pvalue, frechet_gaussian
from .model import FrameModel
from .sampler import SamplerConfig, generate
from .scene import render_frames, sample_events, toy_process_for
from .training import NoiseSamplerCfg, TrainConfig, TrainState, dsm_step, ect_step


def build_model(cfg: RunConfig, c_p: int) -> FrameModel:
    mcfg = cfg.model_config()
    mcfg.c_p = c_p
    return FrameModel(mcfg)


def _train_tensors(ds: Dataset):
    train = ds.split("train")
    lat = torch.stack([
        torch.as_tensor(ds.stats.standardize(c.latents), dtype=torch.float32) for c in train])
    cond = torch.stack([torch.as_tensor(c.cond_grids, dtype=torch.float32) for c in train])
    return lat, cond


def _train_config(cfg: RunConfig, stage: int) -> TrainConfig:
    return TrainConfig(
        stage=stage,
        total_iter=cfg.stage1_iters if stage == 1 else cfg.stage2_iters,
        batch_size=cfg.batch_size, n_t_draws=cfg.n_t_draws,
        lr=cfg.stage1_lr if stage == 1 else cfg.stage2_lr,
        weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2),
        grad_clip=cfg.grad_clip, ema_rate=cfg.ema_rate, p_uncond=cfg.p_uncond,
        nu=cfg.nu, ect_preset=cfg.ect_preset, head_only=cfg.head_only,
        dropout=cfg.stage1_dropout if stage == 1 else cfg.stage2_dropout,
        warmup_iter=cfg.warmup_iter, final_lr_frac=cfg.final_lr_frac,
    )


def train_stage(cfg: RunConfig, ds: Dataset, stage: int, out_path,
                resume_path=None, stage1_path=None, log_path=None,
                iters: int | None = None) -> TrainState:
    """Run one training stage over the dataset's train split."""
    cfg_hash = config_hash(cfg)
    if ds.cfg_hash != cfg_hash:
        raise ConfigError(f"dataset hash {ds.cfg_hash} does not match config {cfg_hash}")
    if resume_path is not None:
        state = load_checkpoint(resume_path, expected_config_hash=cfg_hash)
        if state.cfg.stage != stage:
            raise ConfigError(f"resume checkpoint is stage {state.cfg.stage}, wanted {stage}")
    else:
        if stage == 2:
            if stage1_path is None:
                raise ConfigError("Stage 2 must be initialized from a Stage-1 checkpoint")
            s1 = load_checkpoint(stage1_path, expected_config_hash=cfg_hash)
            model = FrameModel(s1.model.cfg)
            model.load_state_dict(s1.model.state_dict())
            state = TrainState(model, _train_config(cfg, 2), seed=cfg.seed + 2)
        else:
            torch.manual_seed(cfg.seed + 1)  # deterministic parameter init
            state = TrainState(build_model(cfg, ds.c_p), _train_config(cfg, 1),
                               seed=cfg.seed + 1)
    if stage == 1:
        state.noise_cfg = NoiseSamplerCfg(cfg.stage1_p_mean, cfg.stage1_p_std)
    else:
        state.noise_cfg = NoiseSamplerCfg(cfg.stage2_p_mean, cfg.stage2_p_std)

    lat, cond = _train_tensors(ds)
    n_clips = lat.shape[0]
    step_fn = dsm_step if stage == 1 else ect_step
    total = state.cfg.total_iter if iters is None else state.iteration + iters
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.iteration < total:
            idx = torch.randint(0, n_clips, (min(state.cfg.batch_size, n_clips),),
                                generator=state.rng)
            info = step_fn(state, lat[idx], cond[idx])
            if log_f and (info["iter"] % 50 == 0 or info["iter"] == total):
                log_f.write(json.dumps(info) + "\n")
            if out_path and info["iter"] % cfg.checkpoint_every == 0:
                save_checkpoint(out_path, state, cfg_hash)
    finally:
        if log_f:
            log_f.close()
    if out_path:
        save_checkpoint(out_path, state, cfg_hash)
    return state


def sampling_model(state: TrainState, use: str = "auto") -> FrameModel:
    """Pick the parameter group used for sampling (EMA by default)."""
    if use == "auto":
        use = "teacher" if state.cfg.stage == 2 else "ema"
    if use == "student":
        return state.model
    if use == "ema":
        return state.ema
    if use == "teacher":
        if state.teacher is None:
            raise ConfigError("no teacher parameters in a Stage-1 checkpoint")
        return state.teacher
    raise ConfigError(f"unknown parameter group {use!r}")


def sampler_config(cfg: RunConfig, mode: str | None = None, nfe: int | None = None,
                   omega: float | None = None, target_frames: int | None = None,
                   rope_mode: str | None = None, streaming: bool = False,
                   head_cfg: bool = False) -> SamplerConfig:
    mode = mode or cfg.sampler_mode
    omega = cfg.omega if omega is None else omega
    cm_schedule = tuple(cfg.cm_schedule)
    heun_steps = cfg.heun_steps
    if nfe is not None:
        if mode == "ect":
            from .sampler import DEFAULT_CM_SCHEDULES
            if nfe not in DEFAULT_CM_SCHEDULES:
                raise ConfigError(f"no default CM schedule for NFE={nfe}")
            cm_schedule = DEFAULT_CM_SCHEDULES[nfe]
        else:
            if nfe % 2 == 0:
                raise ConfigError("Heun NFE must be odd (2N-1)")
            heun_steps = (nfe + 1) // 2
    rope_mode = rope_mode or cfg.rope_mode
    n_train = cfg.n_train_positions
    tf = target_frames if target_frames is not None else (cfg.target_frames or cfg.n_frames)
    n_target = 2 * tf + 1
    swa = n_train if rope_mode == "swa" else None
    rope = RoPEConfig(base=cfg.rope_base, mode="none" if rope_mode in ("none", "swa") else rope_mode,
                      n_train=n_train, n_target=max(n_target, n_train), swa_window=swa)
    return SamplerConfig(omega=omega, mode=mode, heun_steps=heun_steps,
                         cm_schedule=cm_schedule, rope=rope,
                         streaming_decode=streaming, head_cfg=head_cfg, patch=cfg.patch)


def frames_for_clip(ds: Dataset, clip, n_frames: int | None = None):
    """Regenerate a clip's frames (optionally extended) from its scene spec."""
    spec = clip.spec
    if n_frames is not None and n_frames != spec.n_frames:
        from dataclasses import replace
        spec = replace(spec, n_frames=n_frames)
    rng = np.random.default_rng(spec.seed)
    track = sample_events(spec, rng)
    return render_frames(spec, track), track


def generate_clip(model: FrameModel, ds: Dataset, clip, scfg: SamplerConfig,
                  seed: int = 0, n_frames: int | None = None):
    frames, track = frames_for_clip(ds, clip, n_frames)
    out = generate(model, frames, ds.projector, scfg, seed=seed, codec_stats=ds.stats)
    return out, track


def conditional_match(model: FrameModel, ds: Dataset, scfg: SamplerConfig,
                      n_contexts: int = 100, n_samples: int = 256, seed: int = 0):
    """Compare head samples against the closed-form oracle conditional.

    Contexts are (clip, frame) pairs from the test split with teacher-forced
    prefixes. Returns (mean absolute error of the per-context sample means,
    relative error of the pooled sample covariance).
    """
    test = ds.split("test")
    if not test:
        raise DataError("dataset has no test split")
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    c_x = model.cfg.c_x
    errs = []
    pooled = []
    contexts = []
    for k in range(n_contexts):
        clip = test[k % len(test)]
        i = int(rng.integers(1, clip.spec.n_frames))  # frame index, 0-based, >= 1
        contexts.append((clip, i))
    # z is computed once per distinct clip
    z_cache = {}
    for clip, i in contexts:
        if clip.clip_id not in z_cache:
            lat_std = torch.as_tensor(ds.stats.standardize(clip.latents),
                                      dtype=torch.float32)[None]
            cond = torch.as_tensor(clip.cond_grids, dtype=torch.float32)[None]
            with torch.no_grad():
                vtoks = model.vision_tokens(cond)
                z_cache[clip.clip_id] = model.compute_z(lat_std, vtoks)[0]
        z_i = z_cache[clip.clip_id][i][None].expand(n_samples, -1)
        with torch.no_grad():
            if scfg.mode == "diffusion":
                xs = heun_sample(model.head.denoise, z_i, scfg.heun_steps, gen, c_x=c_x)
            else:
                xs = cm_sample(model.head.denoise, z_i, scfg.cm_schedule, gen, c_x=c_x)
        xs_raw = ds.stats.destandardize(xs.numpy().astype(np.float64))
        process = toy_process_for(clip.spec, c_x)
        oracle_mean = process.conditional_mean(clip.latents[i - 1], clip.events[i])
        errs.append(xs_raw.mean(axis=0) - oracle_mean)
        pooled.append(xs_raw - oracle_mean)
    errs = np.stack(errs)
    mean_abs_err = float(np.abs(errs).mean())
    pooled = np.concatenate(pooled)
    emp_cov = np.cov(pooled, rowvar=False)
    sigma_n = test[0].spec.sigma_n
    target = sigma_n**2 * np.eye(c_x)
    cov_rel_err = float(np.linalg.norm(emp_cov - target) / np.linalg.norm(target))
    return mean_abs_err, cov_rel_err


def evaluate_model(model: FrameModel, ds: Dataset, scfg: SamplerConfig,
                   n_clips: int | None = None, seed: int = 0,
                   frames_per_clip: int | None = None, n_perm: int = 100,
                   cfg_hash: str = "", mmd_max_points: int = 2048) -> MetricReport:
    """Generate on the test split and compare raw latents against the oracle."""
    test = ds.split("test")
    if n_clips is not None:
        test = test[:n_clips]
    gen_set, real_set = [], []
    lags = []
    nll = []
    for k, clip in enumerate(test):
        out, track = generate_clip(model, ds, clip, scfg, seed=seed + k,
                                   n_frames=frames_per_clip)
        n = out.latents_raw.shape[0]
        gen_set.append(out.latents_raw)
        real_set.append(clip.latents[:n])
        process = toy_process_for(clip.spec, model.cfg.c_x)
        if track.e[:n].sum() >= 5:
            j = int(np.argmax(track.e[:n].sum(axis=0)))
            lags.append(event_lag(out.latents_raw, track.e[:n, j], process.patterns[j]))
        prev = np.zeros(model.cfg.c_x)
        for i in range(n):
            nll.append(process.oracle_nll(out.latents_raw[i],
                                          out.latents_raw[i - 1] if i else prev,
                                          track.e[i]))
    gen_arr = np.concatenate(gen_set)
    real_arr = np.concatenate(real_set)
    mmd2, pval = mmd_permutation_pvalue(gen_arr, real_arr, n_perm=n_perm,
                                        rng=np.random.default_rng(seed),
                                        max_points=mmd_max_points)
    fre = frechet_gaussian(gen_arr, real_arr)
    lag = int(np.round(np.median(lags))) if lags else None
    return MetricReport(mmd2=mmd2, mmd2_pvalue=pval, frechet=fre,
                        oracle_nll=float(np.mean(nll)), event_lag=lag,
                        config_hash=cfg_hash)
