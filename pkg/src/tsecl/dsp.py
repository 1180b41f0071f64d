"""STFT analysis/synthesis with an exact adjoint of the synthesis map.

All transforms run in float64. Frames are stored as a ``(T, F)`` complex
array with ``F = fft_len // 2 + 1``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop: int = 128
    fft_len: int = 512

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len <= self.fft_len):
            raise ValueError(
                f"need 0 < hop <= window_len <= fft_len, got "
                f"{self.hop}/{self.window_len}/{self.fft_len}"
            )
        if self.window_len % self.hop:
            raise ValueError("hop must divide window_len")

    @classmethod
    def from_ms(cls, window_ms: float, hop_ms: float, fft_len: int,
                sample_rate: int = DEFAULT_SAMPLE_RATE) -> "StftConfig":
        return cls(round(window_ms * sample_rate / 1000),
                   round(hop_ms * sample_rate / 1000), fft_len)

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return periodic_hann(self.window_len)

    @property
    def pad(self) -> int:
        return self.window_len // 2

    def n_frames(self, length: int) -> int:
        padded = length + 2 * self.pad
        return 1 + -(-(padded - self.window_len) // self.hop)

    def padded_length(self, length: int) -> int:
        return (self.n_frames(length) - 1) * self.hop + self.window_len


@dataclass
class Spectrogram:
    """Complex ``(T, F)`` frames plus what is needed to invert them."""

    frames: np.ndarray
    config: StftConfig
    length: int | None = None
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.frames.shape


def _check_waveform(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("expected a mono 1-D waveform")
    if w.size == 0:
        raise ValueError("empty waveform")
    if not np.all(np.isfinite(w)):
        raise ValueError("waveform contains non-finite values")
    return w


def _frame_starts(n_frames: int, hop: int) -> np.ndarray:
    return np.arange(n_frames) * hop


def analyze(w: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Framing and FFT core of :func:`stft` on ``(..., N)`` arrays."""
    n = w.shape[-1]
    n_frames = cfg.n_frames(n)
    total = cfg.padded_length(n)
    lead = [(0, 0)] * (w.ndim - 1)
    padded = np.pad(w, lead + [(cfg.pad, cfg.pad)], mode="reflect")
    padded = np.pad(padded, lead + [(0, total - padded.shape[-1])])
    idx = _frame_starts(n_frames, cfg.hop)[:, None] + np.arange(cfg.window_len)
    return np.fft.rfft(padded[..., idx] * cfg.window, n=cfg.fft_len, axis=-1)


def stft(w, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Reflect-pad by ``window_len // 2``, zero-pad the tail to whole frames,
    then take one-sided FFTs of Hann-windowed frames."""
    w = _check_waveform(w)
    return Spectrogram(analyze(w, cfg), cfg, w.size)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Sum ``(..., T, W)`` frames spaced ``hop`` apart; ``hop`` divides ``W``."""
    *lead, n_frames, width = frames.shape
    r = width // hop
    chunks = frames.reshape(*lead, n_frames, r, hop)
    out = np.zeros((*lead, n_frames + r - 1, hop))
    for k in range(r):
        out[..., k:k + n_frames, :] += chunks[..., :, k, :]
    return out.reshape(*lead, (n_frames + r - 1) * hop)


def _inverse_norm(cfg: StftConfig, n_frames: int) -> np.ndarray:
    win2 = np.broadcast_to(cfg.window ** 2, (n_frames, cfg.window_len))
    wsum = _overlap_add(win2, cfg.hop)
    inv = np.zeros_like(wsum)
    nz = wsum > 1e-10
    inv[nz] = 1.0 / wsum[nz]
    return inv


def synthesize(frames: np.ndarray, cfg: StftConfig, length: int) -> np.ndarray:
    """Overlap-add core of :func:`istft` on ``(..., T, F)`` arrays."""
    n_frames = frames.shape[-2]
    time_frames = np.fft.irfft(frames, n=cfg.fft_len, axis=-1)[..., :cfg.window_len]
    out = _overlap_add(time_frames * cfg.window, cfg.hop)
    out *= _inverse_norm(cfg, n_frames)
    return out[..., cfg.pad:cfg.pad + length]


def synthesize_adjoint(g: np.ndarray, cfg: StftConfig, n_frames: int) -> np.ndarray:
    """Adjoint of :func:`synthesize` for ``(..., N)`` gradients."""
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    n = g.shape[-1]
    full = np.zeros((*g.shape[:-1], total))
    full[..., cfg.pad:cfg.pad + n] = g
    full *= _inverse_norm(cfg, n_frames)
    idx = _frame_starts(n_frames, cfg.hop)[:, None] + np.arange(cfg.window_len)
    out = np.fft.rfft(full[..., idx] * cfg.window, n=cfg.fft_len, axis=-1)
    # irfft counts interior bins twice and ignores imag at DC/Nyquist
    scale = np.full(cfg.n_bins, 2.0 / cfg.fft_len)
    scale[0] = 1.0 / cfg.fft_len
    if cfg.fft_len % 2 == 0:
        scale[-1] = 1.0 / cfg.fft_len
    out *= scale
    out[..., 0] = out[..., 0].real
    if cfg.fft_len % 2 == 0:
        out[..., -1] = out[..., -1].real
    return out


def istft(spec: Spectrogram, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Output is trimmed to ``length`` (or ``spec.length`` when known); otherwise
    the full de-padded length is returned.
    """
    cfg = spec.config
    frames = np.asarray(spec.frames)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ValueError("spectrogram has no frames")
    if frames.shape[1] != cfg.n_bins:
        raise ValueError(f"expected {cfg.n_bins} bins, got {frames.shape[1]}")
    if not np.all(np.isfinite(frames)):
        raise ValueError("spectrogram contains non-finite values")
    total = (frames.shape[0] - 1) * cfg.hop + cfg.window_len
    if length is None:
        length = spec.length if spec.length is not None else total - 2 * cfg.pad
    return synthesize(frames, cfg, length)


def istft_adjoint(g, cfg: StftConfig, n_frames: int | None = None) -> Spectrogram:
    """Adjoint of ``S -> istft(S, len(g))`` under the real inner product
    ``<S, R> = sum(Re S * Re R + Im S * Im R)``."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("expected a nonempty 1-D gradient")
    if n_frames is None:
        n_frames = cfg.n_frames(g.size)
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    if g.size > total - cfg.pad:
        raise ValueError(
            f"gradient length {g.size} incompatible with {n_frames} frames"
        )
    return Spectrogram(synthesize_adjoint(g, cfg, n_frames), cfg, g.size)


def real_inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a.real * b.real) + np.sum(a.imag * b.imag))


# --- waveform I/O ------------------------------------------------------------

def write_wav(path, w, sample_rate: int = DEFAULT_SAMPLE_RATE, pcm16: bool = False):
    w = _check_waveform(w)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if pcm16:
        data = np.clip(np.round(w * 32767.0), -32768, 32767).astype(np.int16)
    else:
        data = w.astype(np.float32)
    wavfile.write(path, sample_rate, data)


def read_wav(path) -> tuple[np.ndarray, int]:
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32767.0, sr
    return data.astype(np.float64), sr


def write_raw(path, w, sample_rate: int = DEFAULT_SAMPLE_RATE):
    """Raw little-endian float32 samples plus a ``.json`` sidecar."""
    w = _check_waveform(w)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    w.astype("<f4").tofile(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"sample_rate": sample_rate, "dtype": "float32",
                                   "num_samples": int(w.size)}))


def read_raw(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.fromfile(path, dtype="<f4").astype(np.float64), int(meta["sample_rate"])
