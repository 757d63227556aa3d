"""Command-line surface: dataset generation, training, sampling, eval, bench.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
Every artifact embeds the run-config hash so mismatched pieces are rejected
at load time.
"""

from __future__ import annotations

import functools
import json
import os
import sys

import click
import numpy as np

from .checkpoint import load_checkpoint
from .codec import write_waveform
from .config import RunConfig, config_hash, dump_config, load_config
from .dataset import generate_dataset, load_dataset, manifest_hash, save_dataset
from .errors import ConfigError, DataError, NumericalError
from .latency import measure
from .runner import (conditional_match, evaluate_model, frames_for_clip,
                     generate_clip, sampler_config, sampling_model, train_stage)


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except DataError as exc:
            click.echo(f"data error: {exc}", err=True)
            sys.exit(3)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(4)
    return wrapper


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return load_config(path)


def _checkpoint_for(cfg: RunConfig, path):
    return load_checkpoint(path, expected_config_hash=config_hash(cfg))


def _clip_by_id(ds, clip_id: int):
    for c in ds.clips:
        if c.clip_id == clip_id:
            return c
    raise DataError(f"no clip with id {clip_id} in the dataset")


@click.group()
def main():
    """Frame-level online conditional audio-latent generation."""


@main.command("gen-data")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="Run-config file (key=value lines).")
@click.option("--clips", type=int, default=None, help="Override train-clip count.")
@click.option("--frames", type=int, default=None, help="Override frames per clip.")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--out", type=click.Path(), required=True, help="Output dataset directory.")
@_exit_codes
def gen_data(config, clips, frames, seed, out):
    """Generate the seed-regenerable toy dataset."""
    cfg = _load_run_config(config)
    if clips is not None:
        if clips < 1:
            raise DataError("need at least one clip")
        cfg.n_clips = clips
    if frames is not None:
        cfg.n_frames = frames
    if seed is not None:
        cfg.seed = seed
    ds = generate_dataset(cfg)
    save_dataset(ds, out)
    with open(os.path.join(out, "run.cfg"), "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
    click.echo(json.dumps({
        "dataset": out,
        "clips": len(ds.clips),
        "c_p": ds.c_p,
        "manifest_hash": manifest_hash(ds),
        "config_hash": ds.cfg_hash,
    }))


def _train_command(stage: int, config, data, resume, stage1, out, log, iters):
    cfg = load_config(config)
    ds = load_dataset(data)
    state = train_stage(cfg, ds, stage, out, resume_path=resume,
                        stage1_path=stage1, log_path=log, iters=iters)
    click.echo(json.dumps({
        "stage": stage,
        "iterations": state.iteration,
        "checkpoint": out,
        "config_hash": config_hash(cfg),
    }))


@main.command("train-stage1")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True,
              help="Dataset directory from gen-data.")
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True, help="Checkpoint path.")
@click.option("--log", type=click.Path(), default=None, help="JSONL loss log.")
@click.option("--iters", type=int, default=None,
              help="Run this many additional iterations instead of the configured total.")
@_exit_codes
def train_stage1(config, data, resume, out, log, iters):
    """Diffusion pretraining (denoising score matching)."""
    _train_command(1, config, data, resume, None, out, log, iters)


@main.command("train-stage2")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--stage1", type=click.Path(exists=True), default=None,
              help="Stage-1 checkpoint to initialize from.")
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), required=True)
@click.option("--log", type=click.Path(), default=None)
@click.option("--iters", type=int, default=None)
@_exit_codes
def train_stage2(config, data, stage1, resume, out, log, iters):
    """Consistency fine-tuning for few-step sampling."""
    _train_command(2, config, data, resume, stage1, out, log, iters)


@main.command("sample")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--clip", type=int, required=True, help="Clip id to condition on.")
@click.option("--mode", type=click.Choice(["diffusion", "ect"]), default=None)
@click.option("--nfe", type=int, default=None, help="Denoiser evaluations per frame.")
@click.option("--omega", type=float, default=None, help="Guidance scale.")
@click.option("--rope", type=click.Choice(["none", "pi", "ntk", "swa"]), default=None)
@click.option("--frames", type=int, default=None, help="Frames to generate.")
@click.option("--seed", type=int, default=0)
@click.option("--params", type=click.Choice(["auto", "student", "ema", "teacher"]),
              default="auto")
@click.option("--out", type=click.Path(), required=True, help="Output prefix.")
@_exit_codes
def sample(config, data, checkpoint, clip, mode, nfe, omega, rope, frames, seed,
           params, out):
    """Generate latents and a waveform conditioned on one clip's video."""
    cfg = load_config(config)
    ds = load_dataset(data)
    state = _checkpoint_for(cfg, checkpoint)
    model = sampling_model(state, params)
    scfg = sampler_config(cfg, mode=mode, nfe=nfe, omega=omega,
                          target_frames=frames, rope_mode=rope, streaming=True)
    result, _track = generate_clip(model, ds, _clip_by_id(ds, clip), scfg,
                                   seed=seed, n_frames=frames)
    np.savez(out + ".latents.npz", latents_std=result.latents_std,
             latents_raw=result.latents_raw)
    if result.waveform is not None:
        write_waveform(out + ".wav.f32", result.waveform)
    with open(out + ".manifest.jsonl", "w", encoding="utf-8") as f:
        f.write(json.dumps({"config_hash": config_hash(cfg), "clip": clip,
                            "mode": scfg.mode, "omega": scfg.omega,
                            "seed": seed}) + "\n")
        for i, n in enumerate(result.nfe_per_frame):
            f.write(json.dumps({"frame": i, "nfe": n}) + "\n")
    click.echo(json.dumps({"frames": int(result.latents_std.shape[0]),
                           "nfe_per_frame": scfg.nfe_per_frame,
                           "config_hash": config_hash(cfg)}))


@main.command("eval")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["test", "train"]), default="test")
@click.option("--mode", type=click.Choice(["diffusion", "ect"]), default=None)
@click.option("--nfe", type=int, default=None)
@click.option("--clips", type=int, default=None, help="Number of clips to evaluate.")
@click.option("--params", type=click.Choice(["auto", "student", "ema", "teacher"]),
              default="auto")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None, help="Write the report as JSON.")
@_exit_codes
def eval_cmd(config, data, checkpoint, split, mode, nfe, clips, params, seed, out):
    """Two-sample metrics of generated latents against the oracle."""
    if split != "test":
        raise ConfigError("evaluation runs on the held-out test split")
    cfg = load_config(config)
    ds = load_dataset(data)
    state = _checkpoint_for(cfg, checkpoint)
    model = sampling_model(state, params)
    scfg = sampler_config(cfg, mode=mode, nfe=nfe)
    report = evaluate_model(model, ds, scfg, n_clips=clips, seed=seed,
                            cfg_hash=config_hash(cfg))
    blob = json.dumps(report.to_dict(), indent=1)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(blob + "\n")
    click.echo(blob)


@main.command("bench-latency")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--clips", type=int, default=8, help="Clips to run (3 are warm-up).")
@click.option("--frames", type=int, default=None, help="Frames per clip.")
@click.option("--mode", type=click.Choice(["diffusion", "ect"]), default=None)
@click.option("--nfe", type=int, default=None)
@click.option("--params", type=click.Choice(["auto", "student", "ema", "teacher"]),
              default="auto")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None, help="Write the report as JSON.")
@_exit_codes
def bench_latency(config, data, checkpoint, clips, frames, mode, nfe, params, seed, out):
    """Per-frame token-level and waveform-level latency."""
    cfg = load_config(config)
    ds = load_dataset(data)
    state = _checkpoint_for(cfg, checkpoint)
    model = sampling_model(state, params)
    scfg = sampler_config(cfg, mode=mode, nfe=nfe)
    test = ds.split("test") or ds.clips
    clip_frames = []
    for k in range(clips):
        fr, _ = frames_for_clip(ds, test[k % len(test)], frames)
        clip_frames.append(fr)
    report = measure(model, ds.projector, clip_frames, scfg, ds.stats,
                     seed=seed, config_hash=config_hash(cfg))
    blob = json.dumps(report.to_dict(), indent=1)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(blob + "\n")
    click.echo(blob)


@main.command("oracle-match")
@click.option("--config", type=click.Path(exists=True), required=True)
@click.option("--data", type=click.Path(exists=True), required=True)
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--contexts", type=int, default=100)
@click.option("--samples", type=int, default=256)
@click.option("--mode", type=click.Choice(["diffusion", "ect"]), default=None)
@click.option("--params", type=click.Choice(["auto", "student", "ema", "teacher"]),
              default="auto")
@click.option("--seed", type=int, default=0)
@_exit_codes
def oracle_match(config, data, checkpoint, contexts, samples, mode, params, seed):
    """Head-sample statistics against the closed-form conditional oracle."""
    cfg = load_config(config)
    ds = load_dataset(data)
    state = _checkpoint_for(cfg, checkpoint)
    model = sampling_model(state, params)
    scfg = sampler_config(cfg, mode=mode)
    mean_err, cov_err = conditional_match(model, ds, scfg, n_contexts=contexts,
                                          n_samples=samples, seed=seed)
    click.echo(json.dumps({"mean_abs_err": mean_err, "cov_rel_err": cov_err,
                           "sigma_n": cfg.sigma_n,
                           "config_hash": config_hash(cfg)}))


if __name__ == "__main__":
    main()
