"""Frame-level online conditional audio-latent generation on a toy task.

An interleaved autoregressive transformer emits a per-frame condition
vector; a small diffusion head samples the continuous audio latent for that
frame. Training is two-stage (denoising score matching, then consistency
tuning for few-step sampling). The conditioning video comes from an
analytic toy scene whose latent law is known in closed form, so every
pipeline stage can be checked against an oracle.
"""

from .codec import (AudioLatentSeq, CodecStats, DecoderState, Waveform, decode,
                    decode_incremental, encode, fit_stats, read_waveform,
                    write_waveform)
from .config import RunConfig, config_hash, dump_config, load_config, parse_config
from .dataset import Clip, Dataset, generate_dataset, load_dataset, save_dataset
from .errors import ConfigError, DataError, FramegenError, NumericalError
from .backbone import Backbone, BackboneConfig, KVCacheSet, RoPEConfig
from .head import DiffusionHead, HeadConfig, cm_sample, heun_sample, precondition
from .model import FrameModel, ModelConfig
from .sampler import GenerationSession, SamplerConfig, continue_generation, generate
from .scene import Emitter, EventTrack, SceneSpec, render
from .toyprocess import ToyProcess, event_pattern
from .training import TrainConfig, TrainState, dsm_step, ect_step
from .vision import PCAProjector, extract_grid, fit_pca

__version__ = "0.1.0"

__all__ = [
    "AudioLatentSeq", "Backbone", "BackboneConfig", "Clip", "CodecStats",
    "ConfigError", "DataError", "Dataset", "DecoderState", "DiffusionHead",
    "Emitter", "EventTrack", "FrameModel", "FramegenError", "GenerationSession",
    "HeadConfig", "KVCacheSet", "ModelConfig", "NumericalError", "PCAProjector",
    "RoPEConfig", "RunConfig", "SamplerConfig", "SceneSpec", "ToyProcess",
    "TrainConfig", "TrainState", "Waveform", "cm_sample", "config_hash",
    "continue_generation", "decode", "decode_incremental", "dsm_step",
    "dump_config", "ect_step", "encode", "event_pattern", "extract_grid",
    "fit_pca", "fit_stats", "generate", "generate_dataset", "heun_sample",
    "load_config", "load_dataset", "parse_config", "precondition",
    "read_waveform", "render", "save_dataset", "write_waveform",
]
