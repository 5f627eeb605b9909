"""
Spectrogram features for emomine
Radix-2 FFT, Hann-windowed STFT and log-spaced band pooling, plus the .feat cache format
"""

import logging
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from corpus import AudioBuffer
from emomine_errors import DataError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"EMOF"
FEATURE_VERSION = 1
FEATURE_HEADER = struct.Struct("<4sIII")
FEATURE_SUFFIX = ".feat"
PARSEVAL_TOLERANCE = 1e-6


class LengthMismatch(DataError):
    """Frame length is not the configured power of two"""


class TooShort(DataError):
    """Audio shorter than one analysis window"""


class CorruptCache(DataError):
    """Feature cache file is unreadable"""


class UnsupportedSampleRate(DataError):
    """Audio sample rate cannot carry the configured band range"""


class StftConfig(BaseModel):
    """Framing and band layout of the spectrogram"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    window_len: int = Field(default=1024, ge=2)
    hop: int = Field(default=512, ge=1)
    fmin_hz: float = Field(default=60.0, gt=0)
    fmax_hz: float = Field(default=8000.0, gt=0)
    n_bands: int = Field(default=128, ge=2)
    max_frames: int = Field(default=515, ge=1)
    log_bands: bool = Field(default=True, description="Geometric band edges; linear when false")
    log_compress: bool = Field(default=True, description="Apply ln(1 + v) to band values")

    @model_validator(mode="after")
    def check_layout(self):
        if self.window_len & (self.window_len - 1):
            raise ValueError(f"window_len {self.window_len} is not a power of two")
        if self.hop > self.window_len:
            raise ValueError("hop must not exceed window_len")
        if self.fmin_hz >= self.fmax_hz:
            raise ValueError("fmin_hz must be below fmax_hz")
        return self


@dataclass(frozen=True, eq=False)
class Spectrogram:
    """T x B band matrix; only the first valid_frames rows are real data"""
    values: np.ndarray
    valid_frames: int

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("spectrogram values must be a 2-D matrix")
        if not 1 <= self.valid_frames <= self.values.shape[0]:
            raise ValueError(f"valid_frames {self.valid_frames} outside 1..{self.values.shape[0]}")

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]

    @property
    def frames(self) -> np.ndarray:
        return self.values[: self.valid_frames]


@lru_cache(maxsize=16)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    indices = np.arange(n)
    reversed_indices = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        reversed_indices |= ((indices >> b) & 1) << (bits - 1 - b)
    return reversed_indices


def fft_radix2(frames: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time Cooley-Tukey FFT over the last axis"""
    frames = np.asarray(frames)
    n = frames.shape[-1]
    if n < 1 or n & (n - 1):
        raise LengthMismatch(f"FFT length {n} is not a power of two")
    lead = frames.shape[:-1]
    data = frames.reshape(-1, n)[:, _bit_reversal(n)].astype(np.complex128)

    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = data.reshape(data.shape[0], n // size, size)
        even = blocks[..., :half]
        odd = blocks[..., half:] * twiddle
        data = np.concatenate([even + odd, even - odd], axis=-1).reshape(-1, n)
        size *= 2
    return data.reshape(*lead, n)


def dft(frame, window_len: int = 1024) -> np.ndarray:
    """One-sided DFT of a real frame: coefficients k = 0..window_len/2"""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 1 or frame.shape[0] != window_len:
        raise LengthMismatch(f"frame has shape {frame.shape}, expected ({window_len},)")
    return fft_radix2(frame)[: window_len // 2 + 1]


def frame_energy_check(frame, coefficients) -> bool:
    """Parseval: sum |x|^2 == (1/N) sum over the full two-sided spectrum, within 1e-6 relative"""
    frame = np.asarray(frame, dtype=np.float64)
    coefficients = np.asarray(coefficients)
    n = frame.shape[0]
    if coefficients.shape[0] != n // 2 + 1:
        return False
    power = np.abs(coefficients) ** 2
    # Bins 1..N/2-1 appear twice (as k and N-k) in the full spectrum
    spectral = (power[0] + power[-1] + 2.0 * power[1:-1].sum()) / n
    temporal = float(np.sum(frame ** 2))
    return abs(temporal - spectral) <= PARSEVAL_TOLERANCE * max(temporal, spectral)


def band_edges(cfg: StftConfig) -> np.ndarray:
    """n_bands + 1 increasing edges between fmin_hz and fmax_hz"""
    if cfg.log_bands:
        return np.geomspace(cfg.fmin_hz, cfg.fmax_hz, cfg.n_bands + 1)
    return np.linspace(cfg.fmin_hz, cfg.fmax_hz, cfg.n_bands + 1)


def band_layout(cfg: StftConfig, sample_rate_hz: int) -> Tuple[np.ndarray, np.ndarray]:
    """Kept FFT bin indices and the (bins x bands) averaging matrix

    A band without bins takes the bins of its nearest lower non-empty band,
    or of the nearest higher one when nothing lies below.
    """
    n_coeffs = cfg.window_len // 2 + 1
    freqs = np.arange(n_coeffs) * sample_rate_hz / cfg.window_len
    bins = np.nonzero((freqs >= cfg.fmin_hz) & (freqs <= cfg.fmax_hz))[0]
    if bins.size == 0:
        raise UnsupportedSampleRate(f"no FFT bin at {sample_rate_hz} Hz falls between fmin_hz and fmax_hz")

    edges = band_edges(cfg)
    owner = np.clip(np.searchsorted(edges, freqs[bins], side="right") - 1, 0, cfg.n_bands - 1)
    filled = np.unique(owner)

    averaging = np.zeros((bins.size, cfg.n_bands))
    for band in range(cfg.n_bands):
        lower = filled[filled <= band]
        source = lower[-1] if lower.size else filled[0]
        members = owner == source
        averaging[members, band] = 1.0 / members.sum()
    return bins, averaging


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    """min(max_frames, floor((N - window_len) / hop) + 1)"""
    if n_samples < cfg.window_len:
        return 0
    return min(cfg.max_frames, (n_samples - cfg.window_len) // cfg.hop + 1)


def band_magnitudes(audio: AudioBuffer, cfg: StftConfig) -> np.ndarray:
    """Linear band magnitudes, T x n_bands, before any compression"""
    fs = audio.sample_rate_hz
    if fs < 2 * cfg.fmax_hz:
        raise UnsupportedSampleRate(f"sample rate {fs} Hz cannot represent fmax_hz {cfg.fmax_hz}")
    n_frames = frame_count(len(audio.samples), cfg)
    if n_frames == 0:
        raise TooShort(f"{len(audio.samples)} samples is shorter than one {cfg.window_len}-point window")

    windows = np.lib.stride_tricks.sliding_window_view(audio.samples, cfg.window_len)
    frames = windows[:: cfg.hop][:n_frames] * np.hanning(cfg.window_len)
    spectrum = fft_radix2(frames)[:, : cfg.window_len // 2 + 1]

    bins, averaging = band_layout(cfg, fs)
    return np.abs(spectrum[:, bins]) @ averaging


def stft_bands(audio: AudioBuffer, cfg: StftConfig) -> Spectrogram:
    """Hann-windowed STFT pooled into log-spaced bands and log compressed"""
    values = band_magnitudes(audio, cfg)
    if cfg.log_compress:
        values = np.log1p(values)
    return Spectrogram(values=values, valid_frames=values.shape[0])


def feature_path_for(wav_path) -> Path:
    return Path(wav_path).with_suffix(FEATURE_SUFFIX)


def write_feature_cache(path, spec: Spectrogram):
    """EMOF header then T*B little-endian float32, row-major"""
    frames = np.ascontiguousarray(spec.frames, dtype="<f4")
    with open(path, "wb") as f:
        f.write(FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, frames.shape[0], frames.shape[1]))
        f.write(frames.tobytes())


def read_feature_cache(path) -> Spectrogram:
    """Load a .feat file, upcast to float64"""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CorruptCache(f"{path}: {e}") from e
    if len(raw) < FEATURE_HEADER.size:
        raise CorruptCache(f"{path}: truncated header")
    magic, version, t, b = FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC or version != FEATURE_VERSION:
        raise CorruptCache(f"{path}: bad magic or version")
    payload = raw[FEATURE_HEADER.size:]
    if t < 1 or b < 1 or len(payload) != 4 * t * b:
        raise CorruptCache(f"{path}: payload does not match {t}x{b}")
    values = np.frombuffer(payload, dtype="<f4").reshape(t, b).astype(np.float64)
    return Spectrogram(values=values, valid_frames=t)
