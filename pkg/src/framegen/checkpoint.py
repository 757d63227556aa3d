"""Binary checkpoint container.

Layout: magic "FRCKPT1", u32 entry count, then entries of
{u16 name length, name bytes, u8 dtype code (0 = f32), u8 rank,
u64 dims[rank], little-endian payload}. Stores the student, sampling-EMA,
and (for Stage 2) ECT-teacher parameter groups, optimizer moments, train
state scalars, the model configuration, and the run config hash. Round
trips are byte-exact; loading verifies the embedded config hash.
"""

from __future__ import annotations

import struct

import numpy as np
import torch

from .errors import ConfigError, DataError
from .model import FrameModel, ModelConfig
from .training import TrainConfig, TrainState

MAGIC = b"FRCKPT1"
DTYPE_F32 = 0
DTYPE_U8 = 1
DTYPE_F64 = 2


def _write_entry(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode("utf-8")
    if arr.dtype == np.uint8:
        code, payload = DTYPE_U8, arr.tobytes()
    elif arr.dtype == np.float64:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        code, payload = DTYPE_F64, arr.tobytes()
    else:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        code, payload = DTYPE_F32, arr.tobytes()
    buf.append(struct.pack("<H", len(nb)))
    buf.append(nb)
    buf.append(struct.pack("<BB", code, arr.ndim))
    buf.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    buf.append(payload)


def write_entries(path, entries: dict[str, np.ndarray]) -> None:
    names = list(entries)
    if len(set(names)) != len(names):
        raise DataError("duplicate entry names in checkpoint")
    buf = [MAGIC, struct.pack("<I", len(names))]
    for name in names:
        _write_entry(buf, name, np.asarray(entries[name]))
    with open(path, "wb") as f:
        f.write(b"".join(buf))


def read_entries(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:7] != MAGIC:
        raise DataError(f"bad checkpoint magic {data[:7]!r}")
    (count,) = struct.unpack_from("<I", data, 7)
    off = 11
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        code, rank = struct.unpack_from("<BB", data, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}Q", data, off) if rank else ()
        off += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        if code == DTYPE_F32:
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
        elif code == DTYPE_U8:
            arr = np.frombuffer(data, dtype=np.uint8, count=size, offset=off).reshape(dims)
            off += size
        elif code == DTYPE_F64:
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
        else:
            raise DataError(f"unknown dtype code {code} for entry {name!r}")
        if name in out:
            raise DataError(f"duplicate entry name {name!r}")
        out[name] = arr.copy()
    return out


def _module_entries(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_module(prefix: str, module: torch.nn.Module, entries: dict) -> None:
    sd = {}
    for k, v in module.state_dict().items():
        key = f"{prefix}/{k}"
        if key not in entries:
            raise DataError(f"checkpoint is missing entry {key!r}")
        sd[k] = torch.as_tensor(entries[key], dtype=v.dtype).reshape(v.shape)
    module.load_state_dict(sd)


def save_checkpoint(path, state: TrainState, config_hash: str = "") -> None:
    entries: dict[str, np.ndarray] = {}
    entries.update(_module_entries("student", state.model))
    entries.update(_module_entries("ema", state.ema))
    if state.teacher is not None:
        entries.update(_module_entries("teacher", state.teacher))
    # optimizer moments, keyed by parameter name
    name_of = {id(p): n for n, p in state.model.named_parameters()}
    for p, pstate in state.opt.state.items():
        pname = name_of[id(p)]
        entries[f"opt/{pname}/exp_avg"] = pstate["exp_avg"].detach().cpu().numpy()
        entries[f"opt/{pname}/exp_avg_sq"] = pstate["exp_avg_sq"].detach().cpu().numpy()
        entries[f"opt/{pname}/step"] = np.float64(float(pstate["step"]))
    entries["state/iteration"] = np.float64(state.iteration)
    entries["state/stage"] = np.float64(state.cfg.stage)
    entries["state/rng"] = state.rng.get_state().numpy().astype(np.uint8)
    # train/model config scalars go in as f64 so values round-trip exactly
    for key, val in state.cfg.__dict__.items():
        if key in ("stage",):
            continue
        if key == "ect_preset":
            entries["tcfg/ect_preset_in"] = np.float64(val.upper() == "IN")
        elif key == "betas":
            entries["tcfg/beta1"] = np.float64(val[0])
            entries["tcfg/beta2"] = np.float64(val[1])
        else:
            entries[f"tcfg/{key}"] = np.float64(val)
    for key, val in state.model.cfg.to_dict().items():
        entries[f"mcfg/{key}"] = np.float64(val)
    entries["meta/config_hash"] = np.frombuffer(config_hash.encode("utf-8"), dtype=np.uint8)
    write_entries(path, entries)


def _scalar(arr: np.ndarray) -> float:
    return float(np.asarray(arr).reshape(-1)[0])


def load_checkpoint(path, expected_config_hash: str | None = None) -> TrainState:
    entries = read_entries(path)
    stored_hash = entries["meta/config_hash"].tobytes().decode("utf-8")
    if expected_config_hash is not None and stored_hash != expected_config_hash:
        raise ConfigError(f"checkpoint config hash {stored_hash} does not match "
                          f"expected {expected_config_hash}")
    mcfg_keys = {k.split("/", 1)[1]: _scalar(v) for k, v in entries.items()
                 if k.startswith("mcfg/")}
    int_fields = {"c_x", "c_v", "c_p", "grid_h", "grid_w", "d_model", "depth", "heads",
                  "agg_heads", "head_width", "head_blocks", "n_train"}
    mcfg = ModelConfig(**{k: (int(v) if k in int_fields else v) for k, v in mcfg_keys.items()})
    tcfg = TrainConfig(
        stage=int(_scalar(entries["state/stage"])),
        total_iter=int(_scalar(entries["tcfg/total_iter"])),
        batch_size=int(_scalar(entries["tcfg/batch_size"])),
        n_t_draws=int(_scalar(entries["tcfg/n_t_draws"])),
        lr=_scalar(entries["tcfg/lr"]),
        weight_decay=_scalar(entries["tcfg/weight_decay"]),
        betas=(_scalar(entries["tcfg/beta1"]), _scalar(entries["tcfg/beta2"])),
        grad_clip=_scalar(entries["tcfg/grad_clip"]),
        ema_rate=_scalar(entries["tcfg/ema_rate"]),
        p_uncond=_scalar(entries["tcfg/p_uncond"]),
        nu=_scalar(entries["tcfg/nu"]),
        ect_preset="IN" if _scalar(entries["tcfg/ect_preset_in"]) else "CF",
        head_only=bool(_scalar(entries["tcfg/head_only"])),
        dropout=_scalar(entries["tcfg/dropout"]),
        warmup_iter=int(_scalar(entries["tcfg/warmup_iter"])),
        final_lr_frac=_scalar(entries["tcfg/final_lr_frac"]),
    )
    model = FrameModel(mcfg)
    state = TrainState(model, tcfg, seed=0)
    _load_module("student", state.model, entries)
    _load_module("ema", state.ema, entries)
    if state.teacher is not None:
        _load_module("teacher", state.teacher, entries)
    state.iteration = int(_scalar(entries["state/iteration"]))
    state.rng.set_state(torch.as_tensor(entries["state/rng"]))
    # restore optimizer moments
    params = dict(state.model.named_parameters())
    for pname, p in params.items():
        key = f"opt/{pname}/exp_avg"
        if key in entries:
            state.opt.state[p] = {
                "step": torch.tensor(_scalar(entries[f"opt/{pname}/step"])),
                "exp_avg": torch.as_tensor(entries[key], dtype=p.dtype).reshape(p.shape),
                "exp_avg_sq": torch.as_tensor(
                    entries[f"opt/{pname}/exp_avg_sq"], dtype=p.dtype).reshape(p.shape),
            }
    state.config_hash = stored_hash
    return state
