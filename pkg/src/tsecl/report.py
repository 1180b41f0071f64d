"""Evaluation of a trained extractor and report tables (iSDR rows, CDFs, sweeps)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .model import Model, apply_mask, forward_batch, oracle_mask


@dataclass
class EvalResult:
    rows: list = field(default_factory=list)

    @property
    def isdr(self) -> np.ndarray:
        return np.array([r["isdr_db"] for r in self.rows])

    def aggregates(self) -> dict:
        v = self.isdr
        return {"count": int(v.size),
                "mean_isdr_db": float(np.mean(v)) if v.size else float("nan"),
                "median_isdr_db": float(np.median(v)) if v.size else float("nan"),
                "mean_snr_db": float(np.mean([r["snr_db"] for r in self.rows])) if v.size else float("nan")}

    @property
    def mean_isdr(self) -> float:
        return self.aggregates()["mean_isdr_db"]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.rows)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path) -> "EvalResult":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


def _row(record, mixture, estimate, target) -> dict:
    return {"sample_id": record.sample_id,
            "mix_sdr": metrics.snr_db(target, mixture),
            "isdr_db": metrics.isdr_db(mixture, estimate, target),
            "snr_db": metrics.snr_db(target, estimate)}


def evaluate(model: Model, manifest, data, batch_size: int = 16) -> EvalResult:
    """Per-record iSDR of ``model`` on ``manifest``.

    ``data`` maps a record to ``(mixture, reference_embedding, target)``;
    see :class:`tsecl.trainer.PreparedData`.
    """
    rows = []
    records = list(manifest)
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        triples = [data[r] for r in chunk]
        lengths = {t[0].shape[0] for t in triples}
        if len(lengths) == 1:
            est, _ = forward_batch(model, np.stack([t[0] for t in triples]),
                                   np.stack([t[1] for t in triples]))
        else:
            est = [forward_batch(model, t[0][None], t[1][None])[0][0] for t in triples]
        for r, (m, _, s), w in zip(chunk, triples, est):
            rows.append(_row(r, m, w, s))
    return EvalResult(rows)


def evaluate_oracle(manifest, data, stft_cfg, max_magnitude: float = 10.0) -> EvalResult:
    """Upper bound: apply the ideal complex ratio mask from the clean target."""
    rows = []
    for r in manifest:
        m, _, s = data[r]
        est = apply_mask(m, oracle_mask(m, s, stft_cfg, max_magnitude), stft_cfg)
        rows.append(_row(r, m, est, s))
    return EvalResult(rows)


# --- CDFs ------------------------------------------------------------------------

@dataclass
class CdfCurve:
    values: np.ndarray
    probs: np.ndarray

    def __call__(self, x) -> np.ndarray:
        """Right-continuous step function ``P(X <= x)``."""
        idx = np.searchsorted(self.values, np.asarray(x, dtype=np.float64), side="right")
        return np.where(idx > 0, self.probs[np.maximum(idx - 1, 0)], 0.0)


def ecdf(values) -> CdfCurve:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("ecdf of an empty sample")
    uniq, counts = np.unique(v, return_counts=True)
    return CdfCurve(uniq, np.cumsum(counts) / v.size)


def smoothed_cdf(values, grid, bandwidth: float) -> np.ndarray:
    """Gaussian-kernel smoothed CDF on ``grid`` (optional display aid)."""
    from scipy.stats import norm
    v = np.asarray(values, dtype=np.float64)[None, :]
    g = np.asarray(grid, dtype=np.float64)[:, None]
    return norm.cdf((g - v) / bandwidth).mean(axis=1)


def cdf_table(curves: dict, grid=None, bandwidth: float | None = None) -> str:
    """CSV with one column per named sample of iSDR values, on a shared grid."""
    if grid is None:
        allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in curves.values()])
        grid = np.unique(allv)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["isdr_db", *curves])
    cols = []
    for v in curves.values():
        cols.append(smoothed_cdf(v, grid, bandwidth) if bandwidth else ecdf(v)(grid))
    for i, x in enumerate(grid):
        writer.writerow([repr(float(x)), *(repr(float(c[i])) for c in cols)])
    return buf.getvalue()


def sweep_table(rows: list) -> str:
    """CSV of a threshold sweep: one row per threshold."""
    buf = io.StringIO()
    fields = ["measure", "tau", "used_fraction", "phase1_dev_isdr", "phase2_dev_isdr"]
    writer = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    return buf.getvalue()
