"""Acceptance gate: twelve end-to-end criteria, one test (and one printed
pass/fail line) each.

Criteria 7, 8, and 10 use the disk-cached trained model from conftest; the
rest are structural/numerical and run on purpose-built small models.
Generated-latent corpora are cached next to the checkpoints, keyed by
sampler setting, so reruns skip the expensive generation passes.
"""

import math

import numpy as np
import pytest
import torch

from framegen.backbone import Backbone, BackboneConfig, RoPEConfig
from framegen.codec import AudioLatentSeq, CodecStats, DecoderState, Waveform, \
    decode, decode_incremental, encode
from framegen.head import (EvalCounter, cm_sample, heun_sample, heun_schedule,
                           precondition)
from framegen.latency import measure
from framegen.metrics import (mmd_permutation_pvalue, period_estimate, event_lag,
                              rbf_mmd)
from framegen.model import FrameModel
from framegen.runner import conditional_match, frames_for_clip, sampler_config, \
    sampling_model
from framegen.sampler import SamplerConfig, generate
from framegen.scene import render, toy_process_for
from framegen.training import ECTMapCfg, ect_map, stage1_loss, stage2_loss

from test_sampler import make_setup, scfg
from test_training import tiny_config, tiny_batch, _fd_check


def _report(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n:02d} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {n:02d}: {detail}"


# -- 1: preconditioner identity ------------------------------------------------

def test_criterion_01_preconditioner_identity():
    sigma_data = 0.5
    t = torch.logspace(math.log10(1e-3), math.log10(80.0), 100, dtype=torch.float64)
    c_skip, c_out, c_in, _ = precondition(t, sigma_data)
    ident = c_skip**2 * (t**2 + sigma_data**2) + c_out**2
    worst = float((ident - sigma_data**2).abs().max())
    zero = torch.tensor(0.0, dtype=torch.float64)
    cs0, co0, ci0, _ = precondition(zero, sigma_data)
    boundary = float(cs0) == 1.0 and float(co0) == 0.0 and float(ci0) == 2.0
    _report(1, worst <= 1e-9 and boundary,
            f"identity max err {worst:.2e} (<=1e-9), boundary "
            f"c_skip(0)={float(cs0)}, c_out(0)={float(co0)}, c_in(0)={float(ci0)}")


# -- 2: schedules and NFE ------------------------------------------------------

def test_criterion_02_schedules_and_nfe():
    ts = heun_schedule(30)
    endpoints = float(ts[0]) == 80.0 and float(ts[29]) == 0.0 and float(ts[30]) == 0.0

    torch.manual_seed(0)
    z = torch.randn(2, 8)
    head = lambda x, t, zz: x * 0.5  # arbitrary; only evaluation counts matter
    gen = torch.Generator().manual_seed(0)
    c = EvalCounter()
    heun_sample(head, z, 30, gen, c_x=4, counter=c)
    heun_nfe = c.count
    cm_nfes = []
    for sched in ((), (2.5,), (5.0, 1.1, 0.08)):
        c = EvalCounter()
        cm_sample(head, z, sched, gen, c_x=4, counter=c)
        cm_nfes.append(c.count)
    ok = endpoints and heun_nfe == 59 and cm_nfes == [1, 2, 4]
    _report(2, ok, f"t_0={float(ts[0])}, t_29={float(ts[29])}, Heun NFE={heun_nfe} "
                   f"(=59), CM NFE={cm_nfes} (=[1, 2, 4])")


# -- 3: end-to-end causality ---------------------------------------------------

def test_criterion_03_end_to_end_causality():
    n = 8
    cases = []
    for clip_seed in range(20):
        model, projector, frames = make_setup(n_frames=n, seed=clip_seed)
        cfg = scfg(cm_schedule=())  # 1 NFE keeps the sweep fast
        base = generate(model, frames, projector, cfg, seed=clip_seed)
        rng = np.random.default_rng(1000 + clip_seed)
        for j in (2, n // 2, n - 1):  # 1-based index of the first corrupted frame
            noisy = frames.copy()
            noisy[j - 1:] = rng.random(noisy[j - 1:].shape)
            out = generate(model, noisy, projector, cfg, seed=clip_seed)
            cases.append(bool((out.latents_std[:j - 1] == base.latents_std[:j - 1]).all()))
    ok = all(cases)
    _report(3, ok, f"prefix bit-identical in {sum(cases)}/{len(cases)} "
                   f"(20 clips x j in {{2, n/2, n-1}})")


# -- 4: KV-cache / full-context equivalence at 481 positions --------------------

def test_criterion_04_kv_cache_full_context_481():
    torch.manual_seed(4)
    bb = Backbone(BackboneConfig(depth=2, d_model=32, heads=2, c_x=8, c_v=16))
    n = 240  # 2n + 1 = 481 positions
    g = torch.Generator().manual_seed(4)
    audio = torch.randn(2, n, 8, generator=g)
    # row 0: conditional stream; row 1: null stream, as the CFG sampler builds it
    vision = torch.stack([torch.randn(n, 16, generator=g),
                          bb.null_embed.detach().expand(n, -1)])
    rope = RoPEConfig(n_train=481, n_target=481)
    with torch.no_grad():
        full = bb.forward_full(audio, vision, rope)
        cache = bb.new_cache()
        outs = [bb.forward_step(2, "bos", cache, rope)]
        for i in range(n):
            outs.append(bb.forward_step(vision[:, i], "vision", cache, rope))
            outs.append(bb.forward_step(audio[:, i], "audio", cache, rope))
    stepped = torch.stack(outs, dim=1)
    worst = float((full - stepped).abs().max())
    _report(4, worst <= 1e-5,
            f"max |full - stepped| = {worst:.2e} over 481 positions, both streams")


# -- 5: gradient checks --------------------------------------------------------

def test_criterion_05_gradient_checks():
    torch.manual_seed(5)
    cfg = tiny_config()
    model = FrameModel(cfg).double()
    n_params = sum(p.numel() for p in model.parameters())
    latents, cond, t, eps, null = tiny_batch(cfg)
    worst1 = _fd_check(lambda: stage1_loss(model, latents, cond, t, eps, null),
                       model, n_dirs=20)
    student = FrameModel(cfg).double()
    teacher = FrameModel(cfg).double()
    latents, cond, t, eps, null = tiny_batch(cfg, seed=1)
    fn = lambda: stage2_loss(student, teacher, latents, cond, t, eps, null,
                             iters=500, map_cfg=ECTMapCfg.cf(1000))
    worst2 = _fd_check(fn, student, n_dirs=20, seed=1)
    ok = n_params <= 2000 and worst1 <= 1e-3 and worst2 <= 1e-3
    _report(5, ok, f"{n_params} params (<=2000); rel err stage1 {worst1:.2e}, "
                   f"stage2 {worst2:.2e} (<=1e-3, 20 directions each)")


# -- 6: consistency-tuning noise mapping ----------------------------------------

def test_criterion_06_ect_mapping():
    checks = []
    t = torch.logspace(-3, 1, 41, dtype=torch.float64)  # strict r < t testable range
    for preset in ("CF", "IN"):
        mc = ECTMapCfg.preset(preset, 8000)
        prev_gap = None
        for iters in (0, 1000, 2000, 4000, 8000, 16000):
            r = ect_map(t, iters, mc)
            checks.append(bool((r >= 0).all() and (r < t).all()))
            gap = (t - r).max()
            if prev_gap is not None:
                checks.append(bool(gap <= prev_gap + 1e-12))
            prev_gap = gap
        checks.append(bool(torch.allclose(ect_map(t, 10**9, mc), t, rtol=1e-6)))
    raw = float((1.0 - 8.0 * torch.sigmoid(torch.tensor(-1.0, dtype=torch.float64))))
    clamped = float(ect_map(torch.tensor(1.0, dtype=torch.float64), 0, ECTMapCfg.cf(8000)))
    checks.append(abs(raw - (-1.1515313709599608)) < 1e-12 and clamped == 0.0)
    _report(6, all(checks), f"CF/IN presets: r in [0, t), gap anneals, r(t, inf)=t; "
                            f"clamp case raw {raw:.10f} -> {clamped}")


# -- 7: toy-task quality after stage 1 ------------------------------------------

def _cached_generation(desk, tag, model, sampler_cfg, clips, n_frames=None):
    """Generate latents for the given clips, cached as an npz next to the
    checkpoints. Returns raw latents of shape (len(clips), n, c_x)."""
    path = desk.root / f"gen_{tag}.npz"
    if path.exists():
        return np.load(path)["latents"]
    out = []
    for k, clip in enumerate(clips):
        frames, _ = frames_for_clip(desk.ds, clip, n_frames)
        res = generate(model, frames, desk.ds.projector, sampler_cfg,
                       seed=10_000 + k, codec_stats=desk.ds.stats)
        out.append(res.latents_raw)
    arr = np.stack(out)
    np.savez_compressed(path, latents=arr)
    return arr


def test_criterion_07_toy_task_quality(desk):
    model = sampling_model(desk.stage1, "ema")
    heun_cfg = sampler_config(desk.cfg, mode="diffusion")
    sigma_n = desk.cfg.sigma_n
    mean_err, cov_err = conditional_match(model, desk.ds, heun_cfg,
                                          n_contexts=100, n_samples=256, seed=7)

    # synchronization and panning on generated clips
    eval_cfg = sampler_config(desk.cfg, mode="diffusion", omega=1.0)
    clips = desk.ds.split("test")[:64]
    gen = _cached_generation(desk, "heun59_w1_64", model, eval_cfg, clips)
    lags, ratios_gen, ratios_real = [], [], []
    half = desk.cfg.c_x // 2
    for clip, lat in zip(clips, gen):
        proc = toy_process_for(clip.spec, desk.cfg.c_x)
        for j in range(clip.events.shape[1]):
            if clip.events[:, j].sum() >= 5:
                lags.append(event_lag(lat, clip.events[:, j], proc.patterns[j]))
        ratios_gen.append((lat[:, half:] ** 2).mean() / (lat[:, :half] ** 2).mean())
        ratios_real.append((clip.latents[:, half:] ** 2).mean()
                           / (clip.latents[:, :half] ** 2).mean())
    med_lag = float(np.median(lags))
    pan_gen, pan_real = float(np.mean(ratios_gen)), float(np.mean(ratios_real))
    pan_rel = abs(pan_gen - pan_real) / pan_real

    ok = (mean_err <= 0.1 * sigma_n and cov_err <= 0.20
          and abs(med_lag) <= 1 and pan_rel <= 0.20)
    _report(7, ok,
            f"mean err {mean_err:.4f} (<= {0.1 * sigma_n}), cov err {cov_err:.3f} "
            f"(<= 0.20), median lag {med_lag:.1f} (|.| <= 1), pan ratio gen/real "
            f"{pan_gen:.3f}/{pan_real:.3f} rel {pan_rel:.3f} (<= 0.20)")


# -- 8: few-step consistency sampling vs full solver -----------------------------

def test_criterion_08_fewstep_vs_solver_mmd(desk):
    clips = desk.ds.split("test")
    assert len(clips) >= 512
    clips = clips[:512]
    real = np.concatenate([c.latents for c in clips])

    diff_model = sampling_model(desk.stage1, "ema")
    ect_model = sampling_model(desk.stage2, "teacher")
    settings = {
        "diff59": (diff_model, sampler_config(desk.cfg, mode="diffusion", omega=1.0)),
        "ect4": (ect_model, sampler_config(desk.cfg, mode="ect", nfe=4, omega=1.0)),
        "ect1": (ect_model, sampler_config(desk.cfg, mode="ect", nfe=1, omega=1.0)),
    }
    mmd = {}
    for tag, (model, cfg_s) in settings.items():
        arr = _cached_generation(desk, f"{tag}_512", model, cfg_s, clips)
        flat = arr.reshape(-1, desk.cfg.c_x)
        # the pass/fail ratio uses the full U-statistic over all 16384 points;
        # the reported p-value runs the permutation test on a seeded subsample
        full = rbf_mmd(flat, real)
        _, pval = mmd_permutation_pvalue(flat, real, n_perm=100,
                                         rng=np.random.default_rng(8),
                                         max_points=2048)
        mmd[tag] = (full, pval)
    ok = (mmd["ect4"][0] <= 1.25 * mmd["diff59"][0]
          and mmd["ect1"][0] <= 2.0 * mmd["diff59"][0])
    detail = ", ".join(f"{k}: mmd2 {v[0]:.5f} (p={v[1]:.3f})" for k, v in mmd.items())
    _report(8, ok, f"{detail}; ect4 <= 1.25x diff59 and ect1 <= 2x diff59")


# -- 9: latency ordering over NFE -----------------------------------------------

def test_criterion_09_latency_ordering(desk):
    model = sampling_model(desk.stage2, "teacher")
    clips = []
    for k, clip in enumerate(desk.ds.split("test")[:53]):
        frames, _ = frames_for_clip(desk.ds, clip, 6)
        clips.append(frames)
    means = []
    per_clip_ok = []
    for mode, nfe in (("ect", 1), ("ect", 2), ("ect", 4), ("diffusion", 59)):
        cfg_s = sampler_config(desk.cfg, mode=mode, nfe=nfe)
        rep = measure(model, desk.ds.projector, clips, cfg_s, desk.ds.stats,
                      warmup=3, seed=9)
        assert rep.nfe == nfe and rep.n_clips_measured == 50
        means.append(rep.token_level.mean_ms)
        per_clip_ok.append(all(w >= t for t, w in zip(rep.per_clip_token_ms,
                                                      rep.per_clip_waveform_ms)))
    increasing = all(a < b for a, b in zip(means, means[1:]))
    ok = increasing and all(per_clip_ok)
    _report(9, ok, f"token-level means over NFE [1, 2, 4, 59]: "
                   f"{[round(m, 2) for m in means]} ms, strictly increasing: "
                   f"{increasing}; waveform >= token per clip: {all(per_clip_ok)}")


# -- 10: context extension on the periodic scene ---------------------------------

def test_criterion_10_context_extension(desk):
    model = sampling_model(desk.stage1, "ema")
    n2 = 2 * desk.cfg.n_frames  # twice the training window
    period = float(desk.cfg.periodic_period)
    clips = [c for c in desk.ds.split("test")
             if any(e.period is not None for e in c.spec.emitters)][:48]
    assert len(clips) == 48

    results = {}
    for rope_mode in ("ntk", "pi"):
        cfg_s = sampler_config(desk.cfg, mode="diffusion", omega=1.0,
                               target_frames=n2, rope_mode=rope_mode)
        arr = _cached_generation(desk, f"{rope_mode}_2x_48", model, cfg_s, clips,
                                 n_frames=n2)
        errs = []
        halves = {"first": [], "second": []}
        reals = {"first": [], "second": []}
        for clip, lat in zip(clips, arr):
            spec = clip.spec
            j = next(i for i, e in enumerate(spec.emitters) if e.period is not None)
            proc = toy_process_for(spec, desk.cfg.c_x)
            env = lat[n2 // 2:] @ proc.patterns[j]
            errs.append(abs(period_estimate(env) - period) / period)
            from dataclasses import replace
            _, _, real_lat = render(replace(spec, n_frames=n2), c_x=desk.cfg.c_x)
            halves["first"].append(lat[:n2 // 2])
            halves["second"].append(lat[n2 // 2:])
            reals["first"].append(real_lat[:n2 // 2])
            reals["second"].append(real_lat[n2 // 2:])
        mmd_halves = {
            k: mmd_permutation_pvalue(np.concatenate(halves[k]),
                                      np.concatenate(reals[k]), n_perm=20,
                                      rng=np.random.default_rng(10),
                                      max_points=1536)[0]
            for k in halves
        }
        results[rope_mode] = (float(np.median(errs)), mmd_halves)

    ntk_err, ntk_mmd = results["ntk"]
    pi_err, _ = results["pi"]
    ok = (ntk_err <= 0.10 and pi_err > ntk_err
          and ntk_mmd["second"] <= 1.25 * max(ntk_mmd["first"], 1e-6))
    _report(10, ok,
            f"period rel err: ntk {ntk_err:.3f} (<= 0.10), pi {pi_err:.3f} (> ntk); "
            f"ntk mmd2 first/second {ntk_mmd['first']:.5f}/{ntk_mmd['second']:.5f} "
            f"(second <= 1.25x first)")


# -- 11: guidance algebra ---------------------------------------------------------

def test_criterion_11_guidance_algebra():
    model, projector, frames = make_setup(seed=11)
    a = generate(model, frames, projector, scfg(omega=1.0), seed=0)
    with torch.no_grad():
        model.backbone.null_embed.add_(torch.randn_like(model.backbone.null_embed) * 10)
    b = generate(model, frames, projector, scfg(omega=1.0), seed=0)
    omega1_exact = bool((a.latents_std == b.latents_std).all())

    other = np.random.default_rng(5).random(frames.shape)
    c = generate(model, frames, projector, scfg(omega=0.0), seed=0)
    d = generate(model, other, projector, scfg(omega=0.0), seed=0)
    omega0_blind = bool((c.latents_std == d.latents_std).all())

    out = generate(model, frames, projector,
                   scfg(head_cfg=True, omega=3.0, cm_schedule=(2.5,)), seed=0)
    doubled = out.nfe_per_frame == [4] * len(frames)
    ok = omega1_exact and omega0_blind and doubled
    _report(11, ok, f"omega=1 ignores null stream bit-exact: {omega1_exact}; "
                    f"omega=0 vision-independent bit-exact: {omega0_blind}; "
                    f"head-guidance NFE doubled 2->4: {doubled}")


# -- 12: codec -------------------------------------------------------------------

def test_criterion_12_codec():
    rng = np.random.default_rng(12)
    hop, channels, n = 16, 2, 240
    stats = CodecStats(mean=rng.standard_normal(hop * channels), scale=0.8,
                       hop=hop, channels=channels, sample_rate=480)
    w = Waveform(samples=rng.standard_normal((channels, n * hop)),
                 sample_rate=480)
    lat = encode(w, stats)
    back = decode(lat, stats)
    rt = float(np.abs(back.samples - w.samples).max())

    unstd = stats.destandardize(lat.latents)
    parseval = abs(np.linalg.norm(unstd) - np.linalg.norm(w.samples)) \
        / np.linalg.norm(w.samples)

    state = DecoderState(stats)
    pieces = []
    for x in lat.latents:
        piece, state = decode_incremental(x, state)
        pieces.append(piece)
    inc = np.concatenate(pieces, axis=-1)
    bit_exact = bool((inc == back.samples).all())
    ok = rt <= 1e-6 and parseval <= 1e-6 and bit_exact
    _report(12, ok, f"round trip {rt:.2e} (<=1e-6), Parseval rel {parseval:.2e} "
                    f"(<=1e-6), incremental == batch bit-exact: {bit_exact}")
