"""Exactly-invertible frame codec between waveforms and per-frame latents.

Each frame of ``hop`` samples per channel is mapped through an orthonormal
type-II DCT; channel coefficient blocks are concatenated into one latent
vector per frame. The transform is strictly frame-local, so batch and
incremental decoding agree bit-for-bit and latents are causal by
construction. Latents are globally standardized to zero mean and a target
standard deviation of 0.5.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

TARGET_STD = 0.5

WAVEFORM_MAGIC = b"FRWAV1\x00\x00"


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix (rows are basis functions)."""
    k = np.arange(n)[:, None].astype(np.float64)
    m = np.arange(n)[None, :].astype(np.float64)
    mat = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * m + 1) * k / (2 * n))
    mat[0] /= np.sqrt(2.0)
    return mat


@dataclass
class Waveform:
    """Multi-channel signal, shape (channels, T)."""

    samples: np.ndarray
    sample_rate: int = 480

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise DataError(f"waveform must be 2-D (channels, T), got shape {self.samples.shape}")
        if not np.isfinite(self.samples).all():
            raise DataError("waveform contains non-finite samples")

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]


@dataclass
class AudioLatentSeq:
    """Per-frame latents, shape (n, c_x); standardized scale by default."""

    latents: np.ndarray
    frame_rate: float = 30.0

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.latents.ndim != 2:
            raise DataError(f"latents must be 2-D (n, c_x), got shape {self.latents.shape}")
        if not np.isfinite(self.latents).all():
            raise DataError("latents contain non-finite values")

    @property
    def n(self) -> int:
        return self.latents.shape[0]

    @property
    def c_x(self) -> int:
        return self.latents.shape[1]


@dataclass
class CodecStats:
    """Global standardization: x_std = (x - mean) * scale, scale = 0.5 / raw_std."""

    mean: np.ndarray
    scale: float
    hop: int = 16
    channels: int = 2
    sample_rate: int = 480

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        if self.scale <= 0:
            raise DataError(f"scale must be positive, got {self.scale}")

    @property
    def c_x(self) -> int:
        return self.hop * self.channels

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    @classmethod
    def identity(cls, hop: int = 16, channels: int = 2, sample_rate: int = 480) -> "CodecStats":
        return cls(mean=np.zeros(hop * channels), scale=1.0, hop=hop,
                   channels=channels, sample_rate=sample_rate)

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) * self.scale

    def destandardize(self, std: np.ndarray) -> np.ndarray:
        return std / self.scale + self.mean


def frame_transform(w: Waveform, hop: int) -> np.ndarray:
    """Waveform -> unstandardized per-frame DCT coefficients, shape (n, channels*hop)."""
    c, t = w.samples.shape
    if t % hop != 0:
        raise DataError(
            f"waveform length {t} not divisible by hop {hop}; "
            f"last complete frame boundary is at sample {t - t % hop}"
        )
    n = t // hop
    frames = w.samples.reshape(c, n, hop)
    basis = dct_matrix(hop)
    coeffs = np.einsum("kh,cnh->cnk", basis, frames)
    # channel blocks concatenated: dims [0, hop) are channel 0, etc.
    return coeffs.transpose(1, 0, 2).reshape(n, c * hop)


def inverse_frame_transform(coeffs: np.ndarray, hop: int, channels: int) -> np.ndarray:
    """Per-frame coefficients -> waveform samples, shape (channels, n*hop)."""
    n = coeffs.shape[0]
    blocks = coeffs.reshape(n, channels, hop).transpose(1, 0, 2)
    basis = dct_matrix(hop)
    frames = np.einsum("kh,cnk->cnh", basis, blocks)
    return frames.reshape(channels, n * hop)


def encode(w: Waveform, stats: CodecStats) -> AudioLatentSeq:
    """Waveform -> standardized per-frame latents."""
    if w.channels != stats.channels:
        raise DataError(f"waveform has {w.channels} channels, stats expect {stats.channels}")
    raw = frame_transform(w, stats.hop)
    return AudioLatentSeq(stats.standardize(raw), frame_rate=stats.frame_rate)


def decode(l: AudioLatentSeq, stats: CodecStats) -> Waveform:
    """Standardized latents -> waveform; exact inverse of :func:`encode`."""
    if l.c_x != stats.c_x:
        raise DataError(f"latents have c_x={l.c_x}, stats expect {stats.c_x}")
    raw = stats.destandardize(l.latents)
    samples = inverse_frame_transform(raw, stats.hop, stats.channels)
    return Waveform(samples, sample_rate=stats.sample_rate)


@dataclass
class DecoderState:
    """Streaming decode position; one frame consumed per call."""

    stats: CodecStats
    frame_index: int = 0

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(struct.pack("<III", self.stats.hop, self.stats.channels, self.stats.sample_rate))
        buf.write(struct.pack("<d", self.stats.scale))
        buf.write(struct.pack("<I", self.stats.mean.size))
        buf.write(self.stats.mean.astype("<f8").tobytes())
        buf.write(struct.pack("<Q", self.frame_index))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DecoderState":
        buf = io.BytesIO(data)
        hop, channels, sr = struct.unpack("<III", buf.read(12))
        (scale,) = struct.unpack("<d", buf.read(8))
        (msize,) = struct.unpack("<I", buf.read(4))
        mean = np.frombuffer(buf.read(8 * msize), dtype="<f8").copy()
        (idx,) = struct.unpack("<Q", buf.read(8))
        stats = CodecStats(mean=mean, scale=scale, hop=hop, channels=channels, sample_rate=sr)
        return cls(stats=stats, frame_index=idx)


def decode_incremental(x_i: np.ndarray, state: DecoderState) -> tuple[np.ndarray, DecoderState]:
    """Decode one latent frame; concatenated outputs equal batch decode exactly.

    Returns (frame_samples of shape (channels, hop), advanced state).
    """
    x_i = np.asarray(x_i, dtype=np.float64)
    if x_i.shape != (state.stats.c_x,):
        raise DataError(f"latent frame has shape {x_i.shape}, expected ({state.stats.c_x},)")
    raw = state.stats.destandardize(x_i)
    samples = inverse_frame_transform(raw[None, :], state.stats.hop, state.stats.channels)
    return samples, DecoderState(stats=state.stats, frame_index=state.frame_index + 1)


def fit_stats(corpus: np.ndarray, hop: int = 16, channels: int = 2,
              sample_rate: int = 480) -> CodecStats:
    """Fit global standardization over raw latents, shape (num_frames, c_x).

    Mean is per latent dimension; scale is a single scalar chosen so the
    standardized corpus has global standard deviation 0.5.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.size == 0:
        raise DataError("cannot fit codec stats on an empty corpus")
    if corpus.ndim != 2:
        raise DataError(f"corpus must be 2-D (frames, c_x), got shape {corpus.shape}")
    mean = corpus.mean(axis=0)
    raw_std = float((corpus - mean).std())
    if raw_std == 0.0:
        raise DataError("corpus is constant; standardization scale undefined")
    return CodecStats(mean=mean, scale=TARGET_STD / raw_std, hop=hop,
                      channels=channels, sample_rate=sample_rate)


def write_waveform(path, w: Waveform) -> None:
    """Raw little-endian f32, channel-interleaved, 16-byte header."""
    with open(path, "wb") as f:
        f.write(WAVEFORM_MAGIC)
        f.write(struct.pack("<II", w.channels, w.sample_rate))
        interleaved = w.samples.T.astype("<f4")  # (T, channels)
        f.write(interleaved.tobytes())


def read_waveform(path) -> Waveform:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != WAVEFORM_MAGIC:
            raise DataError(f"bad waveform magic {magic!r}")
        channels, sample_rate = struct.unpack("<II", f.read(8))
        payload = np.frombuffer(f.read(), dtype="<f4")
    if payload.size % channels != 0:
        raise DataError("waveform payload not divisible by channel count")
    samples = payload.reshape(-1, channels).T.astype(np.float64)
    return Waveform(samples, sample_rate=sample_rate)
