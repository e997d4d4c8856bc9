"""Seeded two-source generators with a known clean:noise variance ratio."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# recorded in run outputs so a stream can be reproduced elsewhere
RNG_NAME = f"numpy.random.PCG64/numpy-{np.__version__}"


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class TwoSourceBatch:
    clean: np.ndarray
    noise: np.ndarray
    mixture: np.ndarray
    variance_ratio: float
    seed: int

    def empirical_ratio(self) -> float:
        clean_var = np.trace(np.atleast_2d(np.cov(self.clean, rowvar=False)))
        noise_var = np.trace(np.atleast_2d(np.cov(self.noise, rowvar=False)))
        return float(clean_var / noise_var)


# Both sources are snapped to multiples of 2**-40.  Sums of such values below
# 2**12 in magnitude are exact in double precision, so mixture - clean == noise
# holds bit for bit.
_GRID = 2.0**40


def _on_grid(x: np.ndarray) -> np.ndarray:
    if np.max(np.abs(x), initial=0.0) >= 2.0**12:
        raise ValueError("sample magnitude too large for exact mixing")
    return np.round(x * _GRID) / _GRID


def clean_loading(d: int, rank_clean: int, structure_seed) -> np.ndarray:
    """Fixed ``rank_clean x d`` loading with ``||L||_F^2 = d`` (unit mean variance per dim)."""
    loading = make_rng(structure_seed).standard_normal((rank_clean, d))
    return loading * math.sqrt(d / np.sum(loading**2))


def gen_two_source(
    t: int,
    d: int,
    rank_clean: int | None = None,
    variance_ratio: float = 4.0,
    seed: int = 0,
    *,
    structure_seed: int | None = None,
) -> TwoSourceBatch:
    """Low-rank Gaussian "speech" plus isotropic Gaussian noise.

    The clean part is ``factors @ loading`` with a fixed random loading (drawn
    from ``structure_seed``, defaulting to ``seed``) whose expected total
    variance is ``d``.  Noise has per-dimension variance ``1 / variance_ratio``,
    so the expected total-variance ratio is exactly ``variance_ratio``.  Pass
    ``math.inf`` for a noiseless batch.
    """
    rank_clean = max(1, d // 4) if rank_clean is None else rank_clean
    if t < 1 or d < 1:
        raise ValueError("t and d must be positive")
    if not 1 <= rank_clean <= d:
        raise ValueError(f"rank_clean must be in [1, {d}]")
    if not variance_ratio > 0:
        raise ValueError("variance_ratio must be positive")
    loading = clean_loading(d, rank_clean, seed if structure_seed is None else structure_seed)
    rng = make_rng(seed)
    clean = _on_grid(rng.standard_normal((t, rank_clean)) @ loading)
    noise = _on_grid(rng.standard_normal((t, d)) * math.sqrt(1.0 / variance_ratio))
    return TwoSourceBatch(clean=clean, noise=noise, mixture=clean + noise, variance_ratio=variance_ratio, seed=seed)


def gen_noisy_waveform(duration_s: float, sample_rate: int = 16000, snr_db: float = 10.0, seed: int = 0):
    """Three random sinusoids plus white noise rescaled to hit ``snr_db`` exactly.

    Returns ``(clean_wave, noisy_wave)``.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    n = int(round(duration_s * sample_rate))
    if n < 1:
        raise ValueError("duration too short for one sample")
    rng = make_rng(seed)
    freqs = rng.uniform(80.0, 0.4 * sample_rate, size=3)
    amps = rng.uniform(0.2, 1.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    t = np.arange(n) / sample_rate
    clean = np.sum(amps[:, None] * np.sin(2.0 * np.pi * freqs[:, None] * t[None, :] + phases[:, None]), axis=0)
    white = rng.standard_normal(n)
    if math.isinf(snr_db) and snr_db > 0:
        return clean, clean.copy()
    target_power = np.mean(clean**2) / 10.0 ** (snr_db / 10.0)
    noise = white * math.sqrt(target_power / np.mean(white**2))
    return clean, clean + noise
