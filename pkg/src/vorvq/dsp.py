"""STFT magnitudes and an HTK mel filterbank, differentiable through gradcore.

The transforms are written as gathers and matrix products so that the same
code evaluates plain arrays and records onto a tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import gradcore as gc

DEFAULT_RESOLUTIONS = ((256, 64), (512, 128), (1024, 256))


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    hop: int = 128
    n_mels: int = 40
    f_min: float = 0.0
    f_max: float = 8000.0

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError("n_fft must be a power of two")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError("hop must be in (0, n_fft]")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("need 0 <= f_min < f_max <= sample_rate / 2")
        if self.n_mels < 1:
            raise ValueError("n_mels must be positive")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@lru_cache(maxsize=16)
def _dft_bases(n_fft: int) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(n_fft)[:, None]
    k = np.arange(n_fft // 2 + 1)[None, :]
    angle = 2.0 * np.pi * ((n * k) % n_fft) / n_fft
    window = hann_window(n_fft)[:, None]
    cos = window * np.cos(angle)
    sin = -window * np.sin(angle)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def _frame_index(length: int, n_fft: int, hop: int) -> np.ndarray:
    """Sample indices of centered, reflect-padded frames (n_frames x n_fft)."""
    pad = n_fft // 2
    padded = np.arange(-pad, length + pad)
    padded = np.abs(padded)
    over = padded > length - 1
    padded[over] = 2 * (length - 1) - padded[over]
    n_frames = 1 + length // hop
    starts = np.arange(n_frames) * hop
    return padded[starts[:, None] + np.arange(n_fft)[None, :]]


def stft_magnitude(wave, n_fft: int, hop: int):
    """Hann-windowed STFT magnitude, shape ``(n_fft // 2 + 1, n_frames)``."""
    length = gc.value_of(wave).shape[-1]
    if gc.value_of(wave).ndim != 1:
        raise ValueError("wave must be one-dimensional")
    if length < n_fft:
        raise ValueError(f"wave of {length} samples is shorter than n_fft={n_fft}")
    frames = gc.take(wave, _frame_index(length, n_fft, hop))
    cos, sin = _dft_bases(n_fft)
    mag = gc.magnitude(gc.matmul(frames, cos), gc.matmul(frames, sin))
    return gc.transpose(mag)


@lru_cache(maxsize=16)
def _filterbank(cfg: MelConfig) -> np.ndarray:
    n_bins = cfg.n_fft // 2 + 1
    freqs = np.arange(n_bins) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(f"mel filters {empty.tolist()} cover no FFT bin; lower n_mels or raise n_fft")
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft // 2 + 1)``."""
    return _filterbank(cfg).copy()


def mel_magnitude(wave, cfg: MelConfig):
    return gc.matmul(_filterbank(cfg), stft_magnitude(wave, cfg.n_fft, cfg.hop))


def mel_l2_loss(wave_a, wave_b, cfg: MelConfig = MelConfig()):
    """Mean squared difference between mel magnitude spectrograms."""
    if gc.value_of(wave_a).shape != gc.value_of(wave_b).shape:
        raise ValueError("waveforms must have equal length")
    diff = gc.sub(mel_magnitude(wave_a, cfg), mel_magnitude(wave_b, cfg))
    return gc.mean(gc.square(diff))
