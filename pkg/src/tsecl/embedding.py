"""Frozen spectral-statistics speaker encoder.

Log energies of a mel-spaced triangular filterbank are mean-removed over the
whole utterance, then summarised by per-band mean and standard deviation.
The mean removal makes the embedding exactly invariant to input gain. The
band-mean profile has its linear spectral tilt removed and the standard
deviations are centred, so that cosine similarity reflects speaker-specific
spectral shape rather than the tilt every voiced signal shares.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import dsp


@dataclass(frozen=True)
class EmbedConfig:
    n_bands: int = 16
    fmin: float = 50.0
    fmax: float | None = None
    sample_rate: int = dsp.DEFAULT_SAMPLE_RATE
    stft: dsp.StftConfig = dsp.StftConfig()

    @property
    def dim(self) -> int:
        return 2 * self.n_bands


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def triangular_filterbank(cfg: EmbedConfig) -> np.ndarray:
    """``(n_bands, F)`` mel-spaced triangular weights."""
    fmax = cfg.fmax or cfg.sample_rate / 2
    edges = _mel_to_hz(np.linspace(_hz_to_mel(cfg.fmin), _hz_to_mel(fmax), cfg.n_bands + 2))
    freqs = np.arange(cfg.stft.n_bins) * cfg.sample_rate / cfg.stft.fft_len
    fb = np.zeros((cfg.n_bands, freqs.size))
    for b in range(cfg.n_bands):
        lo, mid, hi = edges[b:b + 3]
        rise = (freqs - lo) / (mid - lo)
        fall = (hi - freqs) / (hi - mid)
        fb[b] = np.clip(np.minimum(rise, fall), 0.0, None)
    fb.setflags(write=False)
    return fb


def embed(w, cfg: EmbedConfig = EmbedConfig()) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < cfg.stft.window_len:
        raise ValueError(f"need at least {cfg.stft.window_len} samples to embed")
    power = np.abs(dsp.stft(w, cfg.stft).frames) ** 2
    band = power @ triangular_filterbank(cfg).T
    peak = band.max()
    if peak <= 0.0:
        raise ValueError("cannot embed a silent waveform")
    # relative floor keeps the log scale-covariant, so mean removal cancels gain
    logs = np.log(band + 1e-10 * peak)
    logs -= logs.mean()
    means, stds = logs.mean(axis=0), logs.std(axis=0)
    idx = np.arange(cfg.n_bands)
    means = means - np.polyval(np.polyfit(idx, means, 1), idx)
    vec = np.concatenate([means, stds - stds.mean()])
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ValueError("degenerate spectrum: embedding has zero norm")
    return vec / norm
