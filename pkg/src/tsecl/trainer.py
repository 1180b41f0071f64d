"""Schedule execution: seeded mini-batching, Adam, warmup/decay LR, checkpoints."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import curriculum, datagen, metrics
from .embedding import EmbedConfig, embed
from .model import (MaskNetConfig, Model, forward_batch, gradient_from_forward, init, loss,
                    save_checkpoint)

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# --- learning rate and optimiser ----------------------------------------------------

@dataclass(frozen=True)
class LrSchedule:
    peak_lr: float = 1e-3
    warmup_batches: int = 100
    floor_lr: float = 1e-5

    def __post_init__(self):
        if self.warmup_batches < 1:
            raise ValueError("warmup_batches must be >= 1")
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ValueError("need 0 < floor_lr <= peak_lr")


def lr_at(batch_index: int, s: LrSchedule = LrSchedule()) -> float:
    """Linear warmup to ``peak_lr``, inverse-square-root decay, floored."""
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    if batch_index <= s.warmup_batches:
        return s.peak_lr * batch_index / s.warmup_batches
    return max(s.peak_lr * np.sqrt(s.warmup_batches / batch_index), s.floor_lr)


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_model(cls, model: Model) -> "OptimState":
        return cls(model.zeros_like(), model.zeros_like())


def adam_step(model: Model, grads: dict, opt: OptimState, lr: float):
    """In-place bias-corrected Adam update; returns ``(model, opt)``."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} has shape {g.shape}, expected {p.shape}")
        opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        p -= lr * (opt.m[name] / c1) / (np.sqrt(opt.v[name] / c2) + opt.eps)
    model.version += 1
    return model, opt


# --- data -------------------------------------------------------------------------

class PreparedData:
    """Memoised ``record -> (mixture, reference_embedding, target)``."""

    def __init__(self, embed_config: EmbedConfig = EmbedConfig(),
                 audio: Callable = datagen.load_audio, embeddings: Optional[dict] = None):
        self.embed_config = embed_config
        self.audio = audio
        self.embeddings = embeddings or {}
        self._cache = {}

    def __getitem__(self, r: datagen.SampleRecord):
        hit = self._cache.get(r.sample_id)
        if hit is None:
            a = self.audio(r)
            e = self.embeddings.get(r.sample_id)
            if e is None:
                e = embed(a.reference, self.embed_config)
            hit = (a.mixture, np.asarray(e, dtype=np.float64), a.target)
            self._cache[r.sample_id] = hit
        return hit


# --- training loop -------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 8
    seed: int = 0
    loss_kind: str = "negSNR"
    lr: LrSchedule = LrSchedule()
    checkpoint_dir: Optional[str] = None
    eval_dev: bool = True
    probe_size: int = 64
    log_batches: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("lr"), dict):
            d["lr"] = LrSchedule(**d["lr"])
        return cls(**d)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    probe_loss: list = field(default_factory=list)
    dev_loss: list = field(default_factory=list)
    epoch_phase: list = field(default_factory=list)
    phase_boundaries: list = field(default_factory=list)
    kept_fraction: list = field(default_factory=list)   # (epoch, phase, fraction)
    lr_trace: list = field(default_factory=list)
    batch_ids: list = field(default_factory=list)       # (epoch, [ids]) when logged
    skipped_batches: int = 0
    wall_clock: float = 0.0
    phase_metrics: list = field(default_factory=list)

    def phase_kept_fraction(self) -> dict:
        out = {}
        for _, ph, frac in self.kept_fraction:
            out.setdefault(ph, []).append(frac)
        return {ph: float(np.mean(v)) for ph, v in out.items()}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_csv(self) -> str:
        lines = ["epoch,phase,train_loss,probe_loss,dev_loss"]
        for i, ph in enumerate(self.epoch_phase):
            dev = repr(self.dev_loss[i]) if i < len(self.dev_loss) else ""
            lines.append(f"{i},{ph},{self.epoch_loss[i]!r},{self.probe_loss[i]!r},{dev}")
        return "\n".join(lines) + "\n"


def _stack(data: PreparedData, records):
    triples = [data[r] for r in records]
    return (np.stack([t[0] for t in triples]), np.stack([t[1] for t in triples]),
            np.stack([t[2] for t in triples]))


def mean_loss(model: Model, records, data: PreparedData, kind: str, batch_size: int = 16) -> float:
    vals = []
    for start in range(0, len(records), batch_size):
        m, e, s = _stack(data, records[start:start + batch_size])
        est, _ = forward_batch(model, m, e)
        vals.extend(loss(est[i], s[i], kind) for i in range(len(est)))
    return float(np.mean(vals))


def _probe(manifest: datagen.Manifest, size: int, seed: int) -> list:
    rng = np.random.default_rng([seed, 7919])
    records = list(manifest)
    if len(records) <= size:
        return records
    idx = np.sort(rng.choice(len(records), size=size, replace=False))
    return [records[i] for i in idx]


def run_schedule(schedule: curriculum.Schedule, train_manifest: datagen.Manifest,
                 dev_manifest: Optional[datagen.Manifest], model: Model, cfg: TrainConfig,
                 data: Optional[PreparedData] = None, opt: Optional[OptimState] = None,
                 on_phase_end: Optional[Callable] = None):
    """Train ``model`` in place through every phase of ``schedule``.

    The sampler for phase ``i`` is seeded from ``(cfg.seed, i)``. Optimiser
    state carries across phases. Self-paced phases drop samples whose SNR is
    below the phase threshold from the gradient average, and skip the update
    when nothing is kept.
    """
    data = data or PreparedData()
    opt = opt or OptimState.for_model(model)
    selections = curriculum.resolve_phases(schedule, train_manifest)
    history = TrainHistory()
    probe = _probe(train_manifest, cfg.probe_size, cfg.seed)
    dev_records = list(dev_manifest) if (dev_manifest is not None and cfg.eval_dev) else []
    ckpt_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    t0 = time.perf_counter()

    for i, (phase, selection) in enumerate(zip(schedule.phases, selections)):
        rng = np.random.default_rng([cfg.seed, i])
        records = list(selection)
        if i > 0:
            history.phase_boundaries.append(phase.start_epoch)
        for epoch in range(phase.start_epoch, phase.end_epoch):
            order = rng.permutation(len(records))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [records[k] for k in order[start:start + cfg.batch_size]]
                if cfg.log_batches:
                    history.batch_ids.append((epoch, [r.sample_id for r in batch]))
                m, e, s = _stack(data, batch)
                est, cache = forward_batch(model, m, e)
                batch_losses = np.array([loss(est[k], s[k], cfg.loss_kind) for k in range(len(batch))])
                if not np.all(np.isfinite(batch_losses)):
                    _abort(model, opt, ckpt_dir, "non-finite loss")
                losses.extend(batch_losses)
                if phase.tau_sp is not None:
                    snrs = [metrics.snr_db(s[k], est[k]) for k in range(len(batch))]
                    keep = np.array(curriculum.self_paced_keep_mask(snrs, phase.tau_sp))
                    history.kept_fraction.append((epoch, i, float(keep.mean())))
                else:
                    keep = np.ones(len(batch), dtype=bool)
                bg = gradient_from_forward(model, cache, est, s, batch_losses, keep, cfg.loss_kind)
                if bg.skipped:
                    history.skipped_batches += 1
                    continue
                if not all(np.all(np.isfinite(g)) for g in bg.grads.values()):
                    _abort(model, opt, ckpt_dir, "non-finite gradient")
                lr = lr_at(opt.step + 1, cfg.lr)
                adam_step(model, bg.grads, opt, lr)
                history.lr_trace.append(lr)
            history.epoch_loss.append(float(np.mean(losses)))
            history.epoch_phase.append(i)
            history.probe_loss.append(mean_loss(model, probe, data, cfg.loss_kind))
            if dev_records:
                history.dev_loss.append(mean_loss(model, dev_records, data, cfg.loss_kind))
            log.info("epoch %d phase %s loss %.3f probe %.3f", epoch, phase.name,
                     history.epoch_loss[-1], history.probe_loss[-1])
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"phase{i}.npz", model, opt.step, cfg.seed,
                            {"phase": i, "epoch": phase.end_epoch})
        if on_phase_end is not None:
            result = on_phase_end(i, model)
            if result is not None:
                history.phase_metrics.append(result)
    history.wall_clock = time.perf_counter() - t0
    return model, history


def _abort(model, opt, ckpt_dir, reason):
    if ckpt_dir is not None:
        save_checkpoint(ckpt_dir / "last_good.npz", model, opt.step, extra={"abort": reason})
    raise NumericalAbort(reason)


# --- whole experiments -----------------------------------------------------------------

@dataclass
class MethodConfig:
    """Which curriculum to run.

    ``kind`` is ``random``, ``two_phase``, ``multi_stage`` or ``self_paced``.
    """

    kind: str = "random"
    measure: str = "similarity"
    tau: Optional[float] = None
    phase1_epochs: int = 10
    phase2_epochs: int = 5
    stage_thresholds: tuple = ()
    triples: tuple = curriculum.DESK_SELF_PACED_TRIPLES
    warmup_epochs: int = 1
    final_epochs: int = 2

    def schedule(self) -> curriculum.Schedule:
        if self.kind == "random":
            return curriculum.plan_random(self.phase1_epochs)
        if self.kind == "self_paced":
            return curriculum.plan_self_paced(self.triples, self.warmup_epochs, self.final_epochs)
        measure = curriculum.DifficultyMeasure(self.measure, self.tau)
        if self.kind == "two_phase":
            return curriculum.plan_two_phase(measure, self.phase1_epochs, self.phase2_epochs)
        if self.kind == "multi_stage":
            return curriculum.plan_multi_stage(measure, list(self.stage_thresholds),
                                               self.phase1_epochs, self.phase2_epochs)
        raise ValueError(f"unknown method kind {self.kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        d = dict(d)
        if "triples" in d:
            d["triples"] = tuple(tuple(t) for t in d["triples"])
        if "stage_thresholds" in d:
            d["stage_thresholds"] = tuple(d["stage_thresholds"])
        return cls(**d)


@dataclass
class ExperimentConfig:
    dataset: datagen.DatasetConfig = field(default_factory=datagen.DatasetConfig)
    model: MaskNetConfig = field(default_factory=MaskNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    seed_model: Optional[str] = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(dataset=datagen.DatasetConfig.from_dict(d.get("dataset", {})),
                   model=MaskNetConfig.from_dict(d.get("model", {})),
                   train=TrainConfig.from_dict(d.get("train", {})),
                   method=MethodConfig.from_dict(d.get("method", {})),
                   seed_model=d.get("seed_model"))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ExperimentResult:
    seed: int
    model: Model
    history: TrainHistory
    test: object
    dev: object
    phase_dev_isdr: list
    used_fraction: float


def score_for_method(manifest, method: MethodConfig, ctx: curriculum.ScoringContext):
    if method.kind in ("two_phase", "multi_stage"):
        # scores do not depend on the threshold
        measure = curriculum.DifficultyMeasure(method.measure, 0.0)
        return curriculum.score_manifest(manifest, measure, ctx)
    return manifest


def run_experiment(cfg: ExperimentConfig, seed: int, splits=None, data=None,
                   ctx: Optional[curriculum.ScoringContext] = None,
                   seed_model: Optional[Model] = None) -> ExperimentResult:
    """Dataset -> scoring -> schedule -> training -> dev/test evaluation."""
    from .model import load_checkpoint
    from .report import evaluate
    if seed_model is None and cfg.seed_model:
        seed_model, _ = load_checkpoint(cfg.seed_model)
    splits = splits or datagen.build_dataset(cfg.dataset)
    data = data or PreparedData()
    ctx = ctx or curriculum.ScoringContext(seed_model=seed_model)
    if seed_model is not None:
        ctx.seed_model = seed_model
    train = score_for_method(splits["train"], cfg.method, ctx)
    schedule = cfg.method.schedule()
    first = schedule.phases[0]
    used = len(curriculum.phase_selection(first, train)) / len(train)
    train_cfg = dataclasses.replace(cfg.train, seed=seed, loss_kind=cfg.model.loss_kind)
    model = init(cfg.model, seed)
    phase_dev = []

    def on_phase_end(i, m):
        res = evaluate(m, splits["dev"], data).mean_isdr
        phase_dev.append(res)
        return {"phase": i, "dev_isdr": res}

    model, history = run_schedule(schedule, train, splits["dev"], model, train_cfg, data,
                                  on_phase_end=on_phase_end)
    return ExperimentResult(seed, model, history, evaluate(model, splits["test"], data),
                            evaluate(model, splits["dev"], data), phase_dev, used)


def run_seeded_replicates(cfg: ExperimentConfig, n_seeds: int = 3, seeds=None, **kw) -> dict:
    """Repeat :func:`run_experiment` over seeds; mean and spread of iSDR."""
    if n_seeds < 1:
        raise ValueError("need at least one seed")
    seeds = list(seeds) if seeds is not None else list(range(n_seeds))
    if "splits" not in kw:
        kw["splits"] = datagen.build_dataset(cfg.dataset)
    if "data" not in kw:
        kw["data"] = PreparedData()
    results = [run_experiment(cfg, s, **kw) for s in seeds]
    test = np.array([r.test.mean_isdr for r in results])
    dev = np.array([r.dev.mean_isdr for r in results])
    phases = np.array([r.phase_dev_isdr for r in results])
    return {"seeds": seeds,
            "test_isdr": test.tolist(), "dev_isdr": dev.tolist(),
            "test_isdr_mean": float(test.mean()), "test_isdr_std": float(test.std()),
            "dev_isdr_mean": float(dev.mean()), "dev_isdr_std": float(dev.std()),
            "phase_dev_isdr_mean": phases.mean(axis=0).tolist(),
            "used_fraction": results[0].used_fraction,
            "results": results}
