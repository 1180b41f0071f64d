"""Difficulty measures, easy-subset selection and training schedules.

Four predefined measures score each record once before training:

* ``gender``     0 for a different-gender pair, 1 for same gender
* ``similarity`` cosine similarity of the clean target and interferer stems
* ``sdr``        mixture SDR of the target against the interferer
* ``snr``        SNR a seed model reaches on the record

``self_paced`` is scored on the fly from the model being trained.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import datagen, metrics
from .embedding import EmbedConfig, embed

log = logging.getLogger(__name__)

MEASURES = ("gender", "similarity", "sdr", "snr", "self_paced")
# measures whose easy side is the high-score side
_EASY_HIGH = {"sdr": True, "snr": True, "similarity": False, "gender": False}
SCHEDULE_VERSION = 1


class EmptySelectionError(RuntimeError):
    """An easy-subset rule selected no training records."""


@dataclass(frozen=True)
class DifficultyMeasure:
    kind: str
    threshold: Optional[float] = None
    seed_checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.kind not in MEASURES:
            raise ValueError(f"unknown measure {self.kind!r}; choose from {MEASURES}")
        if self.kind in ("similarity", "sdr", "snr") and self.threshold is None:
            raise ValueError(f"measure {self.kind!r} needs a threshold")

    @property
    def easy_high(self) -> bool:
        return _EASY_HIGH[self.kind]

    def with_threshold(self, tau: float) -> "DifficultyMeasure":
        return DifficultyMeasure(self.kind, tau, self.seed_checkpoint)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "threshold": self.threshold,
                "seed_checkpoint": self.seed_checkpoint}

    @classmethod
    def from_dict(cls, d: dict) -> "DifficultyMeasure":
        return cls(d["kind"], d.get("threshold"), d.get("seed_checkpoint"))


# --- scoring --------------------------------------------------------------------

@dataclass
class ScoringContext:
    """What scoring needs beyond the record itself.

    ``audio`` resolves a record to its signals; ``seed_model`` is only needed
    for the ``snr`` measure. Stem embeddings are memoised per record.
    """

    audio: Callable = datagen.load_audio
    embed_config: EmbedConfig = EmbedConfig()
    seed_model: object = None
    _stem_embeddings: dict = field(default_factory=dict, repr=False)
    _reference_embeddings: dict = field(default_factory=dict, repr=False)

    def stem_embeddings(self, r: datagen.SampleRecord):
        key = r.sample_id
        if key not in self._stem_embeddings:
            a = self.audio(r)
            self._stem_embeddings[key] = (embed(a.target, self.embed_config),
                                          embed(a.interferer, self.embed_config))
        return self._stem_embeddings[key]

    def reference_embedding(self, r: datagen.SampleRecord) -> np.ndarray:
        if r.sample_id not in self._reference_embeddings:
            self._reference_embeddings[r.sample_id] = embed(self.audio(r).reference,
                                                            self.embed_config)
        return self._reference_embeddings[r.sample_id]


def score_sample(r: datagen.SampleRecord, measure: DifficultyMeasure,
                 ctx: ScoringContext | None = None) -> float:
    kind = measure.kind
    if kind == "gender":
        return 1.0 if r.same_gender else 0.0
    if kind == "self_paced":
        raise ValueError("self-paced difficulty is computed during training, not pre-scored")
    if ctx is None:
        raise ValueError(f"measure {kind!r} needs a scoring context")
    if kind == "similarity":
        e_t, e_i = ctx.stem_embeddings(r)
        return metrics.cosine_similarity(e_t, e_i)
    if kind == "sdr":
        a = ctx.audio(r)
        return metrics.mixture_sdr(a.target, a.interferer)
    if ctx.seed_model is None:
        raise ValueError("the snr measure needs a seed model in the scoring context")
    from .model import forward
    a = ctx.audio(r)
    est, _ = forward(ctx.seed_model, a.mixture, ctx.reference_embedding(r))
    return metrics.snr_db(a.target, est)


def score_manifest(manifest: datagen.Manifest, measure: DifficultyMeasure,
                   ctx: ScoringContext | None = None) -> datagen.Manifest:
    """Copy of ``manifest`` with ``difficulty[measure.kind]`` filled in."""
    records = []
    for r in manifest:
        score = score_sample(r, measure, ctx)
        difficulty = dict(r.difficulty)
        difficulty[measure.kind] = score
        records.append(dataclasses.replace(r, difficulty=difficulty))
    return manifest.subset(records)


def is_easy(score: float, measure: DifficultyMeasure) -> bool:
    if measure.kind == "gender":
        return score == 0.0
    if measure.easy_high:
        return score >= measure.threshold
    return score < measure.threshold


def select_easy(manifest: datagen.Manifest, measure: DifficultyMeasure) -> datagen.Manifest:
    """Records on the easy side of ``measure``, in manifest order.

    Scores must already be in each record's ``difficulty`` map. An empty
    selection is returned as-is and logged.
    """
    if measure.kind == "self_paced":
        raise ValueError("self-paced selection happens per batch")
    chosen = []
    for r in manifest:
        if measure.kind not in r.difficulty:
            raise KeyError(f"{r.sample_id}: no {measure.kind!r} score; run scoring first")
        if is_easy(r.difficulty[measure.kind], measure):
            chosen.append(r)
    if not chosen:
        log.warning("easy subset for %s (tau=%s) is empty", measure.kind, measure.threshold)
    return manifest.subset(chosen)


def used_fraction(manifest: datagen.Manifest, measure: DifficultyMeasure) -> float:
    return len(select_easy(manifest, measure)) / max(len(manifest), 1)


def score_summary(manifest: datagen.Manifest, kind: str) -> str:
    vals = np.array([r.difficulty[kind] for r in manifest if kind in r.difficulty])
    if vals.size == 0:
        return f"no {kind!r} scores"
    q = np.percentile(vals, [0, 25, 50, 75, 100])
    return (f"{kind} scores n={vals.size} min={q[0]:.3f} q25={q[1]:.3f} "
            f"median={q[2]:.3f} q75={q[3]:.3f} max={q[4]:.3f}")


def self_paced_keep_mask(per_sample_snr_db, tau_sp: float) -> list[bool]:
    """Keep samples whose SNR is at least ``tau_sp``; ``-inf`` keeps all."""
    snr = np.asarray(per_sample_snr_db, dtype=np.float64)
    if not np.all(np.isfinite(snr)):
        raise ValueError("per-sample SNRs must be finite")
    return [bool(v >= tau_sp) for v in snr]


# --- schedules --------------------------------------------------------------------

@dataclass(frozen=True)
class Phase:
    """Epochs ``[start_epoch, end_epoch)`` trained on one data selection.

    ``selection`` of ``None`` means the full training set. ``tau_sp`` turns
    on self-paced gradient masking for the phase.
    """

    start_epoch: int
    end_epoch: int
    selection: Optional[DifficultyMeasure] = None
    tau_sp: Optional[float] = None
    name: str = ""

    @property
    def epochs(self) -> int:
        return self.end_epoch - self.start_epoch

    @property
    def full_data(self) -> bool:
        return self.selection is None

    def to_dict(self) -> dict:
        return {"name": self.name, "start_epoch": self.start_epoch, "end_epoch": self.end_epoch,
                "selection": self.selection.to_dict() if self.selection else None,
                "tau_sp": self.tau_sp}

    @classmethod
    def from_dict(cls, d: dict) -> "Phase":
        sel = d.get("selection")
        return cls(int(d["start_epoch"]), int(d["end_epoch"]),
                   DifficultyMeasure.from_dict(sel) if sel else None,
                   d.get("tau_sp"), d.get("name", ""))


@dataclass(frozen=True)
class Schedule:
    phases: tuple
    kind: str = "custom"

    def __post_init__(self):
        if not self.phases:
            raise ValueError("schedule has no phases")
        expected = 0
        for ph in self.phases:
            if ph.start_epoch != expected or ph.end_epoch <= ph.start_epoch:
                raise ValueError(f"phase {ph.name or ph}: epochs must be contiguous and increasing")
            expected = ph.end_epoch
        last = self.phases[-1]
        if not last.full_data or last.tau_sp is not None:
            raise ValueError("the last phase must train on the full training set")

    @property
    def total_epochs(self) -> int:
        return self.phases[-1].end_epoch

    def phase_index(self, epoch: int) -> int:
        for i, ph in enumerate(self.phases):
            if ph.start_epoch <= epoch < ph.end_epoch:
                return i
        raise IndexError(f"epoch {epoch} outside schedule of {self.total_epochs} epochs")

    def phase_at(self, epoch: int) -> Phase:
        return self.phases[self.phase_index(epoch)]

    def to_dict(self) -> dict:
        return {"version": SCHEDULE_VERSION, "kind": self.kind,
                "phases": [ph.to_dict() for ph in self.phases]}

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        if d.get("version", SCHEDULE_VERSION) != SCHEDULE_VERSION:
            raise ValueError(f"unsupported schedule version {d.get('version')}")
        return cls(tuple(Phase.from_dict(p) for p in d["phases"]), d.get("kind", "custom"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Schedule":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan_random(epochs: int) -> Schedule:
    """Baseline: every epoch on the full, randomly batched training set."""
    if epochs <= 0:
        raise ValueError("epochs must be positive")
    return Schedule((Phase(0, epochs, name="full"),), "random")


def plan_two_phase(measure: DifficultyMeasure, phase1_epochs: int, phase2_epochs: int) -> Schedule:
    if phase1_epochs <= 0 or phase2_epochs <= 0:
        raise ValueError("epoch counts must be positive")
    if measure.kind == "self_paced":
        raise ValueError("use plan_self_paced for the self-paced measure")
    return Schedule((Phase(0, phase1_epochs, measure, name="easy"),
                     Phase(phase1_epochs, phase1_epochs + phase2_epochs, name="full")),
                    "two_phase")


def plan_multi_stage(measure: DifficultyMeasure, thresholds, epochs_per_stage: int,
                     final_epochs: int) -> Schedule:
    """Repeated merging: each stage relaxes the threshold so the next subset
    joins the training portion, ending on the full set. ``thresholds`` run
    from strictest to most relaxed."""
    if not thresholds:
        return plan_random(final_epochs)
    phases, epoch = [], 0
    for k, tau in enumerate(thresholds):
        phases.append(Phase(epoch, epoch + epochs_per_stage, measure.with_threshold(tau),
                            name=f"stage{k}"))
        epoch += epochs_per_stage
    phases.append(Phase(epoch, epoch + final_epochs, name="full"))
    return Schedule(tuple(phases), "multi_stage")


def plan_self_paced(triples, warmup_epochs: int, final_epochs: int) -> Schedule:
    """Self-paced schedule from half-open, zero-based ``(start, end, tau_sp)``
    triples, bracketed by full-data warmup and final phases."""
    if warmup_epochs <= 0 or final_epochs <= 0:
        raise ValueError("warmup and final epochs must be positive")
    triples = [(int(a), int(b), float(t)) for a, b, t in triples]
    phases = [Phase(0, warmup_epochs, name="warmup")]
    expected = warmup_epochs
    for k, (start, end, tau) in enumerate(triples):
        if start != expected or end <= start:
            raise ValueError(f"triple {k} ({start}, {end}) is not contiguous with epoch {expected}")
        phases.append(Phase(start, end, tau_sp=tau, name=f"sp{k}"))
        expected = end
    phases.append(Phase(expected, expected + final_epochs, name="final"))
    return Schedule(tuple(phases), "self_paced")


# Paper-scale self-paced configuration: one warmup epoch, thresholds of 10, 5
# and 0 dB up to epoch 80, then 20 full-data epochs (100 in total).
PAPER_SELF_PACED_TRIPLES = ((1, 30, 10.0), (30, 60, 5.0), (60, 80, 0.0))
DESK_SELF_PACED_TRIPLES = ((1, 3, 10.0), (3, 5, 5.0), (5, 7, 0.0))


def phase_selection(phase: Phase, manifest: datagen.Manifest) -> datagen.Manifest:
    if phase.full_data:
        return manifest
    return select_easy(manifest, phase.selection)


def resolve_phases(schedule: Schedule, manifest: datagen.Manifest) -> list:
    """Selection per phase; raises with the score distribution if one is empty."""
    out = []
    for ph in schedule.phases:
        sel = phase_selection(ph, manifest)
        if len(sel) == 0:
            raise EmptySelectionError(
                f"phase {ph.name!r}: {ph.selection.kind} threshold {ph.selection.threshold} "
                f"selects no records; {score_summary(manifest, ph.selection.kind)}")
        out.append(sel)
    return out
