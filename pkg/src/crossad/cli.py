"""Command-line entry point wiring the modules into reproducible runs.

Subcommands: ``segment``, ``ingest``, ``synth``, ``pretrain``, ``finetune``,
``average``, ``predict``, ``evaluate``, ``run-all``.  A JSON run-config file
(``--config``) carries paths and hyperparameters; command-line flags
override file values.  Every command that writes artifacts also writes the
fully resolved configuration next to them as an audit trail.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import data as data_mod
from . import pipeline as pipe
from .audio import segment_file
from .data import GREEK, Dataset, SynthConfig, ingest_dataset, make_synthetic
from .errors import ConfigError, CrossadError, DataError, NumericalError
from .net import ad_config, load_checkpoint, save_checkpoint
from .optim import TrainConfig
from .rng import derive_seed
from .pipeline import (
    AdPrediction,
    Checkpoint,
    MmsePrediction,
    evaluate,
    finetune,
    partition_greek_pool,
    predict_ad,
    predict_mmse,
    pretrain,
    run_all,
    swap_and_average,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

TRAIN_KEYS = ("base_lr", "warmup_steps", "weight_decay", "beta1", "beta2",
              "epsilon", "batch_size", "epochs", "seed", "decay_norm_and_bias")


# ---------------------------------------------------------------------------
# Run-config handling
# ---------------------------------------------------------------------------

def default_run_config() -> dict:
    return {
        "task": "ad",
        "output_dir": "runs/out",
        "datasets": {
            "english": {"metadata": None, "features": None},
            "greek_pool": {"metadata": None, "features": None},
            "greek_test": {"metadata": None, "features": None},
        },
        "model": {"dropout_rate": 0.3},
        "train": TrainConfig().to_dict(),
        "seeds": [101, 102, 103, 104, 105],
        "train_fraction": 0.8,
        "parallel_seeds": False,
        "repeats": 1,
    }


def load_run_config(path: str | None) -> dict:
    config = default_run_config()
    if path is None:
        return config
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for key, value in doc.items():
        if key == "datasets":
            for role, entry in value.items():
                if role not in config["datasets"]:
                    raise ConfigError(f"unknown dataset role {role!r}")
                config["datasets"][role].update(entry)
        elif key in ("model", "train"):
            config[key].update(value)
        elif key in config:
            config[key] = value
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return config


def apply_overrides(config: dict, args: argparse.Namespace) -> dict:
    if getattr(args, "output", None):
        config["output_dir"] = args.output
    if getattr(args, "task", None):
        config["task"] = args.task
    if getattr(args, "seeds", None):
        config["seeds"] = args.seeds
    if getattr(args, "epochs", None) is not None:
        config["train"]["epochs"] = args.epochs
    if getattr(args, "batch_size", None) is not None:
        config["train"]["batch_size"] = args.batch_size
    if getattr(args, "parallel_seeds", False):
        config["parallel_seeds"] = True
    if getattr(args, "repeats", None) is not None:
        config["repeats"] = args.repeats
    for role in ("english", "greek_pool", "greek_test"):
        flag = getattr(args, f"{role}_dir", None)
        if flag:
            config["datasets"][role] = {
                "metadata": str(Path(flag) / "metadata.csv"),
                "features": str(Path(flag) / "features"),
            }
    return config


def train_config_from(config: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict({k: config["train"][k] for k in TRAIN_KEYS})
    except KeyError as exc:
        raise ConfigError(f"train config missing key {exc}") from exc


def write_resolved_config(outdir: Path, config: dict, command: str) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, **config}
    (outdir / "resolved_config.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_role_dataset(config: dict, role: str, prepare: bool = False) -> Dataset:
    entry = config["datasets"].get(role) or {}
    metadata, features = entry.get("metadata"), entry.get("features")
    if not metadata or not features:
        raise ConfigError(f"config must set datasets.{role}.metadata and .features")
    return ingest_dataset(metadata, features, prepare=prepare)


# ---------------------------------------------------------------------------
# Artifact writers/readers
# ---------------------------------------------------------------------------

def write_run_log(path: Path, curve) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["epoch,train_loss,val_loss"]
    for epoch, train_loss, val_loss in curve:
        lines.append(f"{epoch},{train_loss!r},{val_loss!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_pipeline_checkpoint(path: Path, ck: Checkpoint) -> None:
    save_checkpoint(path, ck.params, ck.model_config,
                    seed_info={"seed": ck.seed},
                    selection={"epoch": ck.epoch, "val_loss": ck.val_loss})


def load_pipeline_checkpoint(path: str | Path) -> Checkpoint:
    params, config, meta = load_checkpoint(path)
    sel = meta.get("selection") or {}
    return Checkpoint(params=params, model_config=config,
                      seed=int(meta.get("rng", {}).get("seed", 0)),
                      epoch=int(sel.get("epoch", 0)),
                      val_loss=float(sel.get("val_loss", 0.0)))


def write_predictions_csv(path: Path, ad_preds: list[AdPrediction],
                          mmse_preds: list[MmsePrediction] | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    scores = {p.id: p.score for p in mmse_preds} if mmse_preds else None
    header = "id,ad_probability,ad_label" + (",mmse_pred" if scores else "")
    lines = [header]
    for p in ad_preds:
        row = f"{p.id},{p.probability!r},{p.label}"
        if scores is not None:
            row += f",{scores[p.id]!r}"
        lines.append(row)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_predictions_csv(path: str | Path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"predictions file not found: {path}")
    ad_preds: list[AdPrediction] = []
    mmse_preds: list[MmsePrediction] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"id", "ad_probability", "ad_label"}
        if not required.issubset(reader.fieldnames or ()):
            raise DataError(f"{path}: header must include {sorted(required)}")
        for i, row in enumerate(reader, start=2):
            try:
                ad_preds.append(AdPrediction(id=row["id"],
                                             probability=float(row["ad_probability"]),
                                             label=int(row["ad_label"])))
                if row.get("mmse_pred") not in (None, ""):
                    mmse_preds.append(MmsePrediction(id=row["id"],
                                                     score=float(row["mmse_pred"])))
            except ValueError as exc:
                raise DataError(f"{path} row {i}: {exc}") from exc
    return ad_preds, (mmse_preds or None)


def write_report(path: Path, report) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def print_report(report) -> None:
    def pct(x):
        return "n/a" if x is None else f"{100.0 * x:.1f}%"

    print(f"n={report.n} tp={report.tp} fp={report.fp} "
          f"tn={report.tn} fn={report.fn}")
    print(f"accuracy {pct(report.accuracy)}  specificity {pct(report.specificity)}  "
          f"precision {pct(report.precision)}  sensitivity {pct(report.sensitivity)}  "
          f"F1 {pct(report.f1)}")
    if report.rmse_mmse is not None:
        print(f"rmse_mmse {report.rmse_mmse:.3f}")


def _write_stage_artifacts(outdir: Path, stage: pipe.StageResult, tag: str) -> None:
    stage_dir = outdir / tag
    for run in stage.pretrain.runs:
        write_run_log(stage_dir / f"pretrain_seed_{run.seed}.csv", run.curve)
    (stage_dir / "selection.json").write_text(json.dumps({
        "rationale": stage.pretrain.rationale,
        "selected_seed": stage.pretrain.selected.seed,
        "selected_epoch": stage.pretrain.selected.epoch,
        "selected_val_loss": stage.pretrain.selected.val_loss,
        "failed_runs": [r.seed for r in stage.pretrain.runs if r.failed],
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    save_pipeline_checkpoint(stage_dir / "pretrained.json", stage.pretrain.selected)
    save_pipeline_checkpoint(stage_dir / "finetune_a.json",
                             stage.swap_info["finetune_a"])
    save_pipeline_checkpoint(stage_dir / "finetune_b.json",
                             stage.swap_info["finetune_b"])
    save_pipeline_checkpoint(stage_dir / "averaged.json", stage.averaged)
    (stage_dir / "quartets.json").write_text(json.dumps({
        "quartet_a": stage.swap_info["quartet_a"],
        "quartet_b": stage.swap_info["quartet_b"],
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_segment(args) -> int:
    outdir = Path(args.output)
    wavs = [Path(w) for w in args.wav]
    for w in wavs:
        if not w.is_file():
            raise DataError(f"input file not found: {w}")
    write_resolved_config(outdir, {"inputs": [str(w) for w in wavs]}, "segment")
    for w in wavs:
        written = segment_file(w, outdir)
        print(f"{w} -> {written[0].parent} ({len(written)} segments)")
    return EXIT_OK


def cmd_ingest(args) -> int:
    dataset = ingest_dataset(args.metadata, args.features, prepare=args.prepare)
    out = Path(args.output)
    write_resolved_config(out.parent if out.suffix else out, {
        "metadata": args.metadata, "features": args.features,
        "prepare": args.prepare,
    }, "ingest")
    target = out if out.suffix else out / "dataset.json"
    data_mod.save_dataset_json(target, dataset)
    n_ad = sum(1 for s in dataset if s.diagnosis == data_mod.AD)
    print(f"ingested {len(dataset)} samples ({n_ad} AD) -> {target}")
    for line in dataset.provenance.get("prep_log", []):
        print(f"  {line}")
    return EXIT_OK


def cmd_synth(args) -> int:
    outdir = Path(args.output)
    settings = {
        "seed": args.seed,
        "n_per_class": args.n,
        "greek_pool_per_class": 4,
        "greek_test_ad": args.greek_test_ad,
        "greek_test_control": args.greek_test_control,
        "language_shift": args.language_shift,
        "class_shift": args.class_shift,
        "noise": args.noise,
    }
    write_resolved_config(outdir, settings, "synth")
    sets = {
        "english": make_synthetic(SynthConfig(
            n_per_class=args.n, seed=args.seed, class_shift=args.class_shift,
            noise=args.noise, id_prefix="en")),
        "greek_pool": make_synthetic(SynthConfig(
            n_per_class=4, seed=args.seed, language=GREEK,
            language_shift=args.language_shift, class_shift=args.class_shift,
            noise=args.noise, id_prefix="grp")),
        "greek_test": make_synthetic(SynthConfig(
            n_per_class=0, n_ad=args.greek_test_ad,
            n_control=args.greek_test_control, seed=args.seed, language=GREEK,
            language_shift=args.language_shift, class_shift=args.class_shift,
            noise=args.noise, id_prefix="grt")),
    }
    for role, ds in sets.items():
        data_mod.write_metadata_csv(outdir / role / "metadata.csv", ds)
        data_mod.write_feature_csvs(outdir / role / "features", ds)
        print(f"{role}: {len(ds)} samples -> {outdir / role}")
    return EXIT_OK


def _require_five_seeds(config: dict) -> list[int]:
    seeds = config["seeds"]
    if len(seeds) != 5 or len(set(seeds)) != 5:
        raise ConfigError(
            f"pre-training requires exactly 5 distinct seeds, got {seeds}")
    return seeds


def cmd_pretrain(args) -> int:
    config = apply_overrides(load_run_config(args.config), args)
    seeds = _require_five_seeds(config)
    outdir = Path(config["output_dir"])
    write_resolved_config(outdir, config, "pretrain")
    task = config["task"]
    tconf = train_config_from(config)
    en = load_role_dataset(config, "english", prepare=True)
    pool = load_role_dataset(config, "greek_pool")
    en_train, _ = data_mod.split_train_val(
        en, config["train_fraction"], derive_seed(tconf.seed, "split", task, 0))
    if task == "mmse":
        raise ConfigError("standalone pretrain supports task 'ad'; "
                          "the regression stage needs probabilities from run-all")
    artifacts = pretrain(en_train, pool, tconf, seeds, task=task,
                         model_config=ad_config(config["model"]["dropout_rate"]),
                         parallel=config["parallel_seeds"])
    for run in artifacts.runs:
        write_run_log(outdir / f"pretrain_seed_{run.seed}.csv", run.curve)
    save_pipeline_checkpoint(outdir / "pretrained.json", artifacts.selected)
    print(artifacts.rationale)
    print(f"checkpoint -> {outdir / 'pretrained.json'}")
    return EXIT_OK


def _transfer_inputs(config: dict, task: str):
    tconf = train_config_from(config)
    en = load_role_dataset(config, "english", prepare=True)
    pool = load_role_dataset(config, "greek_pool")
    en_train, en_val = data_mod.split_train_val(
        en, config["train_fraction"], derive_seed(tconf.seed, "split", task, 0))
    return tconf, en_train, en_val, pool


def cmd_finetune(args) -> int:
    config = apply_overrides(load_run_config(args.config), args)
    outdir = Path(config["output_dir"])
    write_resolved_config(outdir, config, "finetune")
    task = config["task"]
    if task != "ad":
        raise ConfigError("standalone finetune supports task 'ad'")
    pre = load_pipeline_checkpoint(args.pretrained)
    tconf, en_train, en_val, pool = _transfer_inputs(config, task)
    quartet_a, quartet_b = partition_greek_pool(list(pool))
    gr_train, gr_val = (quartet_b, quartet_a) if args.swap else (quartet_a, quartet_b)
    ck = finetune(pre.params, en_train, en_val, gr_train, gr_val, tconf,
                  task=task, model_config=pre.model_config)
    out = outdir / ("finetune_b.json" if args.swap else "finetune_a.json")
    save_pipeline_checkpoint(out, ck)
    print(f"best epoch {ck.epoch} val_loss {ck.val_loss!r} -> {out}")
    return EXIT_OK


def cmd_average(args) -> int:
    config = apply_overrides(load_run_config(args.config), args)
    outdir = Path(config["output_dir"])
    write_resolved_config(outdir, config, "average")
    task = config["task"]
    if task != "ad":
        raise ConfigError("standalone average supports task 'ad'")
    pre = load_pipeline_checkpoint(args.pretrained)
    tconf, en_train, en_val, pool = _transfer_inputs(config, task)
    averaged, info = swap_and_average(pre.params, en_train, en_val, list(pool),
                                      tconf, task=task,
                                      model_config=pre.model_config)
    ck = Checkpoint(params=averaged, model_config=pre.model_config,
                    seed=pre.seed, epoch=pre.epoch, val_loss=pre.val_loss)
    save_pipeline_checkpoint(outdir / "finetune_a.json", info["finetune_a"])
    save_pipeline_checkpoint(outdir / "finetune_b.json", info["finetune_b"])
    save_pipeline_checkpoint(outdir / "averaged.json", ck)
    print(f"averaged checkpoint -> {outdir / 'averaged.json'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    models = [load_pipeline_checkpoint(p) for p in args.checkpoint]
    dataset = ingest_dataset(args.metadata, args.features)
    out = Path(args.output)
    write_resolved_config(out.parent, {
        "checkpoints": list(args.checkpoint), "metadata": args.metadata,
        "features": args.features, "task": args.task,
    }, "predict")
    ad_preds = None
    mmse_preds = None
    if args.task == "ad":
        ad_preds = predict_ad(models, dataset)
    else:
        if len(models) != 1:
            raise ConfigError("mmse prediction uses exactly one checkpoint")
        if not args.ad_predictions:
            raise ConfigError("mmse prediction needs --ad-predictions")
        base_preds, _ = read_predictions_csv(args.ad_predictions)
        probs = {p.id: p.probability for p in base_preds}
        mmse_preds = predict_mmse(models[0], dataset, probs)
        ad_preds = base_preds
        order = {s.id: i for i, s in enumerate(dataset)}
        ad_preds = sorted((p for p in ad_preds if p.id in order),
                          key=lambda p: order[p.id])
    write_predictions_csv(out, ad_preds, mmse_preds)
    print(f"{len(ad_preds)} predictions -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ad_preds, mmse_preds = read_predictions_csv(args.predictions)
    truth = ingest_dataset(args.metadata, args.features)
    report = evaluate(ad_preds, truth, mmse_preds)
    out = Path(args.output) if args.output else None
    if out:
        write_resolved_config(out.parent, {
            "predictions": args.predictions, "metadata": args.metadata,
        }, "evaluate")
        write_report(out, report)
    print_report(report)
    return EXIT_OK


def cmd_run_all(args) -> int:
    config = apply_overrides(load_run_config(args.config), args)
    seeds = _require_five_seeds(config)
    outdir = Path(config["output_dir"])
    write_resolved_config(outdir, config, "run-all")
    tconf = train_config_from(config)
    en = load_role_dataset(config, "english", prepare=True)
    pool = load_role_dataset(config, "greek_pool")
    test = load_role_dataset(config, "greek_test")
    for role, ds in (("english", en), ("greek_pool", pool), ("greek_test", test)):
        data_mod.save_dataset_json(outdir / "datasets" / f"{role}.json", ds)
    result = run_all(en, pool, test, tconf, seeds, task=config["task"],
                     dropout_rate=config["model"]["dropout_rate"],
                     repeats=config["repeats"], parallel=config["parallel_seeds"])
    for k, stage in enumerate(result.ad_stages):
        _write_stage_artifacts(outdir, stage, f"ad_repeat_{k}")
    for k, stage in enumerate(result.mmse_stages):
        _write_stage_artifacts(outdir, stage, f"mmse_repeat_{k}")
    write_predictions_csv(outdir / "predictions.csv", result.ad_predictions,
                          result.mmse_predictions)
    if result.report is not None:
        write_report(outdir / "report.json", result.report)
        print_report(result.report)
    else:
        print("test labels absent; wrote predictions only")
    print(f"artifacts -> {outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossad",
        description="Deterministic cross-lingual speech screening toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="split WAV recordings into ten segments")
    p.add_argument("wav", nargs="+", help="input .wav files (PCM 16-bit mono)")
    p.add_argument("--output", required=True, help="output directory")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("ingest", help="load and validate a metadata+features pair")
    p.add_argument("--metadata", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--output", required=True, help="dataset JSON path or directory")
    p.add_argument("--prepare", action="store_true",
                   help="apply training-split preparation rules")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic three-way corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True, help="English samples per class")
    p.add_argument("--greek-test-ad", type=int, default=22)
    p.add_argument("--greek-test-control", type=int, default=24)
    p.add_argument("--language-shift", type=float, default=2.0)
    p.add_argument("--class-shift", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_synth)

    def add_run_opts(p, with_repeats=False):
        p.add_argument("--config", help="run-config JSON")
        p.add_argument("--output", help="override output_dir")
        p.add_argument("--task", choices=["ad", "mmse"])
        p.add_argument("--seeds", type=int, nargs="+")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--parallel-seeds", action="store_true")
        p.add_argument("--english-dir", help="directory with metadata.csv + features/")
        p.add_argument("--greek-pool-dir")
        p.add_argument("--greek-test-dir")
        if with_repeats:
            p.add_argument("--repeats", type=int)

    p = sub.add_parser("pretrain", help="five-seed pre-training")
    add_run_opts(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="one mixed-batch fine-tuning run")
    add_run_opts(p)
    p.add_argument("--pretrained", required=True, help="pre-trained checkpoint")
    p.add_argument("--swap", action="store_true",
                   help="use the swapped quartet roles")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("average", help="swap fine-tuning and parameter averaging")
    add_run_opts(p)
    p.add_argument("--pretrained", required=True)
    p.set_defaults(func=cmd_average)

    p = sub.add_parser("predict", help="predict with 1..5 checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--task", choices=["ad", "mmse"], default="ad")
    p.add_argument("--ad-predictions",
                   help="predictions CSV supplying probabilities (mmse task)")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against reference labels")
    p.add_argument("--predictions", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run-all", help="full procedure end to end")
    add_run_opts(p, with_repeats=True)
    p.set_defaults(func=cmd_run_all)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: numerical: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CrossadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
