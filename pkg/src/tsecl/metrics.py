"""Signal-quality measures in dB and embedding similarity.

Every dB quantity is clipped to ``[-DB_CLIP, DB_CLIP]``. SDR and SNR are global
energy ratios over the whole utterance; a frame-averaged variant is available
through ``mode="framewise"``.
"""
from __future__ import annotations

import numpy as np

from .dsp import StftConfig

DB_CLIP = 100.0
_LOG_SCALE = 10.0 / np.log(10.0)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def clip_db(value: float) -> float:
    return float(np.clip(value, -DB_CLIP, DB_CLIP))


def ratio_db(num_energy: float, den_energy: float) -> float:
    """``10 log10(num / den)`` with the clipping rules for zero energies."""
    if num_energy <= 0.0:
        return -DB_CLIP if den_energy > 0.0 else 0.0
    if den_energy <= 0.0:
        return DB_CLIP
    return clip_db(10.0 * np.log10(num_energy / den_energy))


def _framewise_db(num: np.ndarray, den: np.ndarray, frame: StftConfig) -> float:
    # frames of window_len spaced by hop; frames with a silent numerator are skipped
    n = num.size
    starts = range(0, max(n - frame.window_len, 0) + 1, frame.hop)
    vals = []
    for s in starts:
        en = float(np.dot(num[s:s + frame.window_len], num[s:s + frame.window_len]))
        ed = float(np.dot(den[s:s + frame.window_len], den[s:s + frame.window_len]))
        if en > 0.0:
            vals.append(ratio_db(en, ed))
    if not vals:
        raise ValueError("no frame with nonzero numerator energy")
    return clip_db(float(np.mean(vals)))


def energy_ratio_db(numerator, denominator, mode: str = "global",
                    frame: StftConfig | None = None) -> float:
    num, den = _pair(numerator, denominator)
    if mode == "framewise":
        return _framewise_db(num, den, frame or StftConfig())
    if mode != "global":
        raise ValueError(f"unknown mode {mode!r}")
    e_num = float(np.dot(num, num))
    if e_num <= 0.0:
        raise ValueError("numerator has zero energy")
    return ratio_db(e_num, float(np.dot(den, den)))


def mixture_sdr(target, interferer, **kw) -> float:
    """SDR of the target against the interfering signal in a mixture."""
    return energy_ratio_db(target, interferer, **kw)


def snr_db(target, estimate, **kw) -> float:
    """Target energy over residual ``estimate - target`` energy."""
    s, w = _pair(target, estimate)
    return energy_ratio_db(s, w - s, **kw)


def si_sdr_db(estimate, target) -> float:
    est, s = _pair(estimate, target)
    e_s = float(np.dot(s, s))
    if e_s <= 0.0:
        raise ValueError("target has zero energy")
    proj = (float(np.dot(est, s)) / e_s) * s
    return ratio_db(float(np.dot(proj, proj)), float(np.sum((est - proj) ** 2)))


def isdr_db(mixture, estimate, target, **kw) -> float:
    """SDR improvement of ``estimate`` over the unprocessed ``mixture``."""
    return snr_db(target, estimate, **kw) - snr_db(target, mixture, **kw)


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))
