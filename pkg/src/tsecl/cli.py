"""Command-line entry point: ``tsecl <command> ...``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import curriculum, datagen
from .model import load_checkpoint, save_checkpoint
from .report import EvalResult, cdf_table, evaluate, sweep_table
from .trainer import (ExperimentConfig, NumericalAbort, PreparedData, run_experiment,
                      run_schedule)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("tsecl")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
SPLITS = ("train", "dev", "test")


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# --- config handling ----------------------------------------------------------------

def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides=()) -> dict:
    raw = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            if path.suffix == ".toml":
                raw = tomllib.loads(path.read_text())
            else:
                raw = json.loads(path.read_text())
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    return raw


def experiment_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _update_run_json(run_dir: Path, **fields) -> None:
    path = run_dir / "run.json"
    current = json.loads(path.read_text()) if path.exists() else {}
    current.update(fields)
    _write_json(path, current)


# --- data directory helpers ------------------------------------------------------------

def _manifest_path(data_dir: Path, split: str) -> Path:
    return Path(data_dir) / f"{split}.jsonl"


def load_split(data_dir, split: str) -> datagen.Manifest:
    path = _manifest_path(Path(data_dir), split)
    if not path.exists():
        raise DataError(f"manifest {path} not found; run gen-data first")
    try:
        return datagen.Manifest.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc


def load_embeddings(data_dir) -> dict:
    path = Path(data_dir) / "embeddings.npz"
    if not path.exists():
        return {}
    with np.load(path) as z:
        return {k.rsplit("/", 1)[0]: z[k].astype(np.float64) for k in z.files}


def prepared(data_dir) -> PreparedData:
    return PreparedData(embeddings=load_embeddings(data_dir))


# --- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = experiment_config(load_config(args.config, args.set))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = datagen.build_dataset(cfg.dataset)
    for name, man in splits.items():
        if args.audio == "wav":
            man = datagen.materialize_audio(man, out / "audio", pcm16=args.pcm16)
        man.save(_manifest_path(out, name))
    _write_json(out / "dataset.json", dataclasses.asdict(cfg.dataset))
    _update_run_json(out, command="gen-data", dataset=dataclasses.asdict(cfg.dataset),
                     sizes={k: len(v) for k, v in splits.items()})
    print(json.dumps({k: len(v) for k, v in splits.items()}))
    return 0


def cmd_embed(args) -> int:
    data_dir = Path(args.data)
    arrays = {}
    prep = PreparedData()
    for split in SPLITS:
        for r in load_split(data_dir, split):
            arrays[f"{r.sample_id}/reference"] = prep[r][1].astype(np.float32)
    with open(data_dir / "embeddings.npz", "wb") as fh:
        np.savez(fh, **arrays)
    print(f"wrote {len(arrays)} reference embeddings")
    return 0


def cmd_score(args) -> int:
    data_dir = Path(args.data)
    seed_model = None
    if args.measure == "snr":
        if not args.seed_model:
            raise ConfigError("--seed-model is required for the snr measure")
        seed_model, _ = load_checkpoint(args.seed_model)
    ctx = curriculum.ScoringContext(seed_model=seed_model)
    measure = curriculum.DifficultyMeasure(args.measure, 0.0)
    for split in args.splits:
        man = curriculum.score_manifest(load_split(data_dir, split), measure, ctx)
        man.save(_manifest_path(data_dir, split))
        print(f"{split}: {curriculum.score_summary(man, args.measure)}")
    return 0


def _parse_triples(text: str):
    triples = []
    for chunk in text.split(";"):
        if chunk.strip():
            a, b, t = chunk.split(",")
            triples.append((int(a), int(b), float(t)))
    return triples


def build_schedule(args) -> curriculum.Schedule:
    if args.method == "random":
        return curriculum.plan_random(args.epochs)
    if args.method == "self_paced":
        triples = _parse_triples(args.triples) if args.triples else curriculum.DESK_SELF_PACED_TRIPLES
        return curriculum.plan_self_paced(triples, args.warmup, args.final)
    if args.measure is None:
        raise ConfigError("--measure is required")
    measure = curriculum.DifficultyMeasure(args.measure, args.tau)
    if args.method == "two_phase":
        return curriculum.plan_two_phase(measure, args.phase1, args.phase2)
    thresholds = [float(x) for x in args.stages.split(",")] if args.stages else []
    return curriculum.plan_multi_stage(measure, thresholds, args.phase1, args.phase2)


def cmd_plan(args) -> int:
    try:
        schedule = build_schedule(args)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    schedule.save(args.out)
    print(json.dumps(schedule.to_dict(), sort_keys=True))
    return 0


def cmd_train(args) -> int:
    raw = load_config(args.config, args.set)
    cfg = experiment_config(raw)
    run_dir = Path(args.run)
    run_dir.mkdir(parents=True, exist_ok=True)
    try:
        schedule = curriculum.Schedule.load(args.schedule) if args.schedule else cfg.method.schedule()
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"schedule: {exc}") from exc
    seed = args.seed if args.seed is not None else cfg.train.seed
    train_cfg = dataclasses.replace(cfg.train, seed=seed, loss_kind=cfg.model.loss_kind,
                                    checkpoint_dir=str(run_dir / "checkpoints"))
    train = load_split(args.data, "train")
    dev = load_split(args.data, "dev")
    from .model import init
    model = init(cfg.model, seed)
    _write_json(run_dir / "config.json", raw)
    schedule.save(run_dir / "schedule.json")
    model, history = run_schedule(schedule, train, dev, model, train_cfg, prepared(args.data))
    save_checkpoint(run_dir / "checkpoints" / "final.npz", model, len(history.lr_trace), seed)
    (run_dir / "history.csv").write_text(history.to_csv())
    _write_json(run_dir / "history.json", history.to_dict())
    _update_run_json(run_dir, command="train", seed=seed, data=str(Path(args.data).resolve()),
                     schedule=schedule.to_dict(), checkpoint="checkpoints/final.npz",
                     epochs=schedule.total_epochs, final_train_loss=history.epoch_loss[-1],
                     phase_kept_fraction=history.phase_kept_fraction())
    print(f"trained {schedule.total_epochs} epochs; final loss {history.epoch_loss[-1]:.3f}")
    return 0


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else run_dir / "checkpoints" / "final.npz"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found")
    model, _ = load_checkpoint(ckpt)
    data_dir = args.data or json.loads((run_dir / "run.json").read_text()).get("data")
    if not data_dir:
        raise ConfigError("--data is required")
    result = evaluate(model, load_split(data_dir, args.split), prepared(data_dir))
    result.save(run_dir / "eval.jsonl")
    (run_dir / "cdf.csv").write_text(cdf_table({run_dir.name: result.isdr}))
    agg = result.aggregates()
    _update_run_json(run_dir, eval_split=args.split, **agg)
    print(json.dumps(agg, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    curves, summary = {}, {}
    for run in args.cdf:
        path = Path(run) / "eval.jsonl"
        if not path.exists():
            raise DataError(f"{path} not found; run eval first")
        res = EvalResult.load(path)
        name = Path(run).name
        curves[name] = res.isdr
        summary[name] = res.aggregates()
    grid = np.linspace(args.grid_min, args.grid_max, args.grid_points) if args.grid_points else None
    table = cdf_table(curves, grid, args.bandwidth)
    if args.out:
        Path(args.out).write_text(table)
        _write_json(Path(args.out).with_suffix(".json"), summary)
    else:
        sys.stdout.write(table)
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    raw = load_config(args.config, args.set)
    taus = [float(x) for x in args.taus.split(",")]
    if not taus:
        raise ConfigError("empty threshold grid")
    data_dir = Path(args.data)
    splits = {s: load_split(data_dir, s) for s in SPLITS}
    data = prepared(data_dir)
    seed_model = load_checkpoint(args.seed_model)[0] if args.seed_model else None
    ctx = curriculum.ScoringContext(seed_model=seed_model)
    rows = []
    for tau in taus:
        raw_tau = json.loads(json.dumps(raw))
        raw_tau.setdefault("method", {}).update(kind="two_phase", measure=args.measure, tau=tau)
        cfg = experiment_config(raw_tau)
        res = run_experiment(cfg, cfg.train.seed, splits=splits, data=data, ctx=ctx,
                             seed_model=seed_model)
        rows.append({"measure": args.measure, "tau": tau, "used_fraction": res.used_fraction,
                     "phase1_dev_isdr": res.phase_dev_isdr[0],
                     "phase2_dev_isdr": res.phase_dev_isdr[-1]})
        print(json.dumps(rows[-1]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(sweep_table(rows))
    key = "phase2_dev_isdr" if args.select == "phase2" else "phase1_dev_isdr"
    best = max(rows, key=lambda r: r[key])
    _write_json(out.with_suffix(".json"), {"rows": rows, "best_tau": best["tau"], "selected_by": key})
    return 0


# --- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsecl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="TOML or JSON experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.batch_size=4")

    sp = sub.add_parser("gen-data", help="synthesise train/dev/test manifests")
    with_config(sp)
    sp.add_argument("--out", required=True, help="data directory")
    sp.add_argument("--audio", choices=("inline", "wav"), default="inline",
                    help="inline: regenerate audio from seeds; wav: write WAV files")
    sp.add_argument("--pcm16", action="store_true", help="16-bit PCM instead of float WAV")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("embed", help="cache reference embeddings for every record")
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("score", help="write difficulty scores into manifests")
    sp.add_argument("--data", required=True)
    sp.add_argument("--measure", required=True, choices=[m for m in curriculum.MEASURES
                                                         if m != "self_paced"])
    sp.add_argument("--seed-model", help="checkpoint for the snr measure")
    sp.add_argument("--splits", nargs="+", default=["train"], choices=SPLITS)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("plan", help="write a schedule JSON file")
    sp.add_argument("--method", required=True,
                    choices=("random", "two_phase", "multi_stage", "self_paced"))
    sp.add_argument("--measure", choices=[m for m in curriculum.MEASURES if m != "self_paced"])
    sp.add_argument("--tau", type=float)
    sp.add_argument("--phase1", type=int, default=10, help="easy-phase (or per-stage) epochs")
    sp.add_argument("--phase2", type=int, default=5, help="full-data epochs")
    sp.add_argument("--stages", help="comma-separated thresholds, strictest first")
    sp.add_argument("--epochs", type=int, default=10, help="epochs for the random baseline")
    sp.add_argument("--triples", help="self-paced 'start,end,tau;...' (zero-based, half-open)")
    sp.add_argument("--warmup", type=int, default=1)
    sp.add_argument("--final", type=int, default=2)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("train", help="run a schedule")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--schedule", help="schedule JSON (default: from the config's method)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--run", required=True, help="run directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-sample iSDR of a trained run")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data")
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="CDF table comparing evaluated runs")
    sp.add_argument("--cdf", nargs="+", required=True, metavar="RUN")
    sp.add_argument("--out")
    sp.add_argument("--bandwidth", type=float, help="Gaussian smoothing (off by default)")
    sp.add_argument("--grid-min", type=float, default=-10.0)
    sp.add_argument("--grid-max", type=float, default=30.0)
    sp.add_argument("--grid-points", type=int, default=0,
                    help="evaluate on a regular grid instead of the pooled sample points")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sweep", help="two-phase threshold sweep on the dev set")
    with_config(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--measure", required=True, choices=("similarity", "sdr", "snr"))
    sp.add_argument("--taus", required=True, help="comma-separated thresholds")
    sp.add_argument("--seed-model")
    sp.add_argument("--select", choices=("phase1", "phase2"), default="phase2")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, curriculum.EmptySelectionError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
