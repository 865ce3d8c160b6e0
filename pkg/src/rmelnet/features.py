"""Audio to low-resolution log-mel grids, and back out to the vocoder rate.

Pipeline: 16-bit WAV -> Hann STFT magnitude -> 256 HTK mel bands -> log
-> fixed 448 frames -> strided decimation to (112, 32) -> per-bin
normalization. For vocoder handoff the (112, 32) grid is linearly
interpolated per bin back to 448 frames.
"""
from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

LOG_FLOOR = 1e-5
STD_FLOOR = 1e-5
TIME_STRIDE = 4
FREQ_STRIDE = 8
FULL_SHAPE = (448, 256)
TIER1_SHAPE = (112, 32)

RMG_MAGIC = b"RMG1"
RMG_VERSION = 1
_RMG_HEADER = struct.Struct("<4sIIIBB6x")
_RESOLUTIONS = ("full", "tier1")


class GridFormatError(ValueError):
    """Malformed RMG1 file; the message names the offending header field."""


@dataclass(frozen=True)
class AudioConfig:
    sample_rate: int = 22050
    window_length: int = 1200
    hop: int = 200
    n_mels: int = 256
    target_frames: int = 448
    fmin: float = 0.0
    fmax: float = 11025.0

    def __post_init__(self):
        if self.window_length != 6 * self.hop:
            raise ValueError("window_length must be 6 x hop")


@dataclass
class MelGrid:
    values: np.ndarray
    resolution: str = "full"
    normalized: bool = False

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError(f"grid must be 2-D (frames, bins), got shape {self.values.shape}")
        if self.resolution not in _RESOLUTIONS:
            raise ValueError(f"unknown resolution {self.resolution!r}")
        if not np.isfinite(self.values).all():
            raise ValueError("grid contains non-finite values")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    data_min: float
    data_max: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean and std must be vectors of equal length")
        if (self.std <= 0).any():
            raise ValueError("std must be strictly positive")
        if not self.data_min <= self.data_max:
            raise ValueError("data_min must not exceed data_max")

    @property
    def n_mels(self) -> int:
        return len(self.mean)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(),
                "data_min": float(self.data_min), "data_max": float(self.data_max),
                "n_mels": self.n_mels}

    @classmethod
    def from_json(cls, obj: dict) -> "NormStats":
        stats = cls(obj["mean"], obj["std"], obj["data_min"], obj["data_max"])
        if "n_mels" in obj and obj["n_mels"] != stats.n_mels:
            raise ValueError(f"n_mels={obj['n_mels']} but mean has {stats.n_mels} entries")
        return stats

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- WAV -------------------------------------------------------------------

def load_wav(path, sample_rate: int = 22050) -> np.ndarray:
    """Read 16-bit mono PCM at ``sample_rate`` into floats in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate, n = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if channels != 1:
                raise ValueError(f"{path}: channels={channels}, expected 1 (mono)")
            if width != 2:
                raise ValueError(f"{path}: sample width={8 * width} bits, expected 16")
            if rate != sample_rate:
                raise ValueError(f"{path}: sample rate={rate}, expected {sample_rate}")
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: unreadable WAV ({exc})") from exc
    if len(raw) != 2 * n:
        raise ValueError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int = 22050) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


# --- log-mel -----------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: AudioConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, window_length // 2 + 1)."""
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, cfg.window_length // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs - lower) / (center - lower)
    falling = (upper - fft_freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def frame_count(n_samples: int, cfg: AudioConfig) -> int:
    return 1 + (n_samples - cfg.window_length) // cfg.hop


def extract_logmel(waveform: np.ndarray, cfg: AudioConfig = AudioConfig()) -> MelGrid:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or len(x) < cfg.window_length:
        raise ValueError(f"waveform needs at least {cfg.window_length} samples, got {len(x)}")
    n = frame_count(len(x), cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)[:: cfg.hop][:n]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(cfg.window_length) / cfg.window_length)
    mag = np.abs(np.fft.rfft(frames * window, axis=-1))
    logmel = np.log(mag @ mel_filterbank(cfg).T + LOG_FLOOR)

    out = np.full((cfg.target_frames, cfg.n_mels), math.log(LOG_FLOOR))
    keep = min(n, cfg.target_frames)
    out[:keep] = logmel[:keep]
    return MelGrid(out, "full", False)


def downsample_tier1(mel: MelGrid) -> MelGrid:
    if mel.shape != FULL_SHAPE:
        raise ValueError(f"expected a {FULL_SHAPE} grid, got {mel.shape}")
    return MelGrid(mel.values[::TIME_STRIDE, ::FREQ_STRIDE], "tier1", mel.normalized)


# --- normalization ----------------------------------------------------------

def compute_norm_stats(grids: Sequence[MelGrid], valid_frames: Sequence[int] | None = None) -> NormStats:
    """Per-bin mean/std pooled over every frame of every grid, in order.

    ``valid_frames`` optionally limits each grid to its first n frames so
    padding does not leak into the statistics.
    """
    grids = list(grids)
    if not grids:
        raise ValueError("cannot compute statistics of an empty collection")
    if any(g.resolution != "tier1" or g.normalized for g in grids):
        raise ValueError("statistics require unnormalized tier1 grids")
    if valid_frames is None:
        valid_frames = [g.frames for g in grids]
    pooled = np.concatenate([g.values[:n].astype(np.float64) for g, n in zip(grids, valid_frames)])
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), STD_FLOOR)
    normed = (pooled - mean) / std
    return NormStats(mean, std, float(normed.min()), float(normed.max()))


def normalize(mel: MelGrid, stats: NormStats) -> MelGrid:
    if mel.normalized:
        raise ValueError("grid is already normalized")
    if mel.bins != stats.n_mels:
        raise ValueError(f"grid has {mel.bins} bins, stats cover {stats.n_mels}")
    return MelGrid((mel.values - stats.mean) / stats.std, mel.resolution, True)


def denormalize(mel: MelGrid, stats: NormStats) -> MelGrid:
    if not mel.normalized:
        raise ValueError("grid is not normalized")
    if mel.bins != stats.n_mels:
        raise ValueError(f"grid has {mel.bins} bins, stats cover {stats.n_mels}")
    return MelGrid(mel.values * stats.std + stats.mean, mel.resolution, False)


def interpolate_time(mel: MelGrid, factor: int = TIME_STRIDE) -> MelGrid:
    """Per-bin linear interpolation with input frame t placed at output 4t.

    Frames after the last knot repeat the last input frame.
    """
    if mel.resolution != "tier1":
        raise ValueError(f"expected a tier1 grid, got resolution {mel.resolution!r}")
    T = mel.frames
    pos = np.arange(T * factor) / factor
    lo = np.minimum(np.floor(pos).astype(int), T - 1)
    hi = np.minimum(lo + 1, T - 1)
    frac = (pos - lo)[:, None]
    v = mel.values.astype(np.float64)
    out = v[lo] * (1 - frac) + v[hi] * frac
    return MelGrid(out, "full", mel.normalized)


# --- RMG1 ----------------------------------------------------------------------

def grid_to_bytes(mel: MelGrid) -> bytes:
    T, F = mel.shape
    header = _RMG_HEADER.pack(RMG_MAGIC, RMG_VERSION, T, F,
                              _RESOLUTIONS.index(mel.resolution), int(mel.normalized))
    return header + mel.values.astype("<f4").tobytes()


def grid_from_bytes(data: bytes) -> MelGrid:
    if len(data) < _RMG_HEADER.size:
        raise GridFormatError(f"header: file has {len(data)} bytes, RMG1 header needs {_RMG_HEADER.size}")
    magic, version, T, F, res, norm = _RMG_HEADER.unpack_from(data)
    if magic != RMG_MAGIC:
        raise GridFormatError(f"magic: expected b'RMG1', found {magic!r}")
    if version != RMG_VERSION:
        raise GridFormatError(f"version: expected {RMG_VERSION}, found {version}")
    if res >= len(_RESOLUTIONS):
        raise GridFormatError(f"resolution: expected 0 or 1, found {res}")
    if norm > 1:
        raise GridFormatError(f"normalized: expected 0 or 1, found {norm}")
    if data[18:24] != bytes(6):
        raise GridFormatError("reserved: bytes 18-23 must be zero")
    payload = data[_RMG_HEADER.size:]
    if len(payload) != 4 * T * F:
        raise GridFormatError(f"shape: header says T={T}, F={F} ({4 * T * F} bytes) "
                              f"but payload has {len(payload)} bytes")
    values = np.frombuffer(payload, dtype="<f4").reshape(T, F)
    return MelGrid(values, _RESOLUTIONS[res], bool(norm))


def save_grid(path, mel: MelGrid) -> None:
    Path(path).write_bytes(grid_to_bytes(mel))


def load_grid(path) -> MelGrid:
    return grid_from_bytes(Path(path).read_bytes())
