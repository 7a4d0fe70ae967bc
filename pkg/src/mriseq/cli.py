"""Command-line interface exposing the experiment protocols.

Subcommands: synth, preprocess, train, predict, eval, mcnemar, gradcam,
sweep, seeds, report. Exit codes: 0 success, 2 usage error, 3 data error,
4 numeric failure. Every command that produces an output directory writes
its fully resolved configuration to config.json there before doing work.
The default seed comes from --seed, then the MRISEQ_SEED environment
variable, then 0.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .errors import DataError, MriseqError, NumericError, UsageError
from .gradcam import export_overlay, gradcam
from .inference import (Prediction, predict_proba, predict_study,
                        write_predictions_csv)
from .metrics import compute_report, mcnemar, write_report
from .models import EnsembleModel, ModelConfig
from .phantom import DomainProfile, PhantomConfig, generate_dataset
from .preprocess import (TOY_TARGET_DIMS, PreprocessConfig,
                         preprocess_pipeline)
from .training import TrainConfig, train_cv
from .volume import (CANONICAL_ORIENTATION, LABELS, SeriesLabel, Volume3D,
                     load_manifest, read_volume, save_manifest, write_volume)


class _Parser(argparse.ArgumentParser):
    """argparse that raises UsageError instead of calling sys.exit."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("MRISEQ_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"MRISEQ_SEED must be an integer, got {env!r}") from None


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} does not exist")
    try:
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    return data


def _merged(args: argparse.Namespace, file_cfg: dict, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags (flags win when not None)."""
    out = dict(defaults)
    for key, value in file_cfg.items():
        if key not in defaults:
            raise UsageError(f"unknown config key {key!r}; expected one of "
                             + ", ".join(sorted(defaults)))
        out[key] = value
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    return out


def _echo_config(out_dir: str | Path, config: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _triple(values, cast, what: str):
    if values is None:
        return None
    vals = tuple(cast(v) for v in values)
    if len(vals) != 3:
        raise UsageError(f"{what} needs exactly 3 values")
    return vals


def _preprocess_config(args, file_cfg: dict) -> PreprocessConfig:
    defaults = asdict(PreprocessConfig())
    if getattr(args, "toy", False):
        defaults["target_dims"] = TOY_TARGET_DIMS
    merged = _merged(
        argparse.Namespace(
            target_spacing=_triple(getattr(args, "target_spacing", None), float,
                                   "--target-spacing"),
            target_dims=_triple(getattr(args, "target_dims", None), int,
                                "--target-dims"),
            clip_percentiles=None,
            rescale_to_unit=None,
        ),
        {k: v for k, v in file_cfg.get("preprocess", {}).items()},
        defaults,
    )
    clip = getattr(args, "clip", None)
    if clip is not None:
        merged["clip_percentiles"] = (float(clip[0]), float(clip[1]))
    if getattr(args, "no_rescale", False):
        merged["rescale_to_unit"] = False
    merged["target_spacing"] = tuple(merged["target_spacing"])
    merged["target_dims"] = tuple(merged["target_dims"])
    merged["clip_percentiles"] = tuple(merged["clip_percentiles"])
    try:
        return PreprocessConfig(**merged)
    except (DataError, TypeError) as exc:
        raise UsageError(f"bad preprocess options: {exc}") from None


def _model_config(args, file_cfg: dict) -> ModelConfig:
    arch = getattr(args, "arch", None) or file_cfg.get("model", {}).get("arch")
    if getattr(args, "toy", False):
        if arch in (None, "densenet", "densenet3d"):
            return ModelConfig.toy_densenet()
        return ModelConfig.toy_resnet()
    model_cfg = dict(file_cfg.get("model", {}))
    if arch is not None:
        model_cfg["arch"] = {"densenet": "densenet3d",
                             "resnet": "resnet3d"}.get(arch, arch)
    for key in ("block_layers", "res_blocks"):
        if key in model_cfg:
            model_cfg[key] = tuple(model_cfg[key])
    return ModelConfig(**model_cfg)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    defaults = {
        "epochs": 25, "batch_size": 2, "learning_rate": 1e-4, "folds": 5,
        "val_ratio": 0.12, "data_fraction": 1.0, "mode": "scratch",
        "base_checkpoint": None, "seed": None,
    }
    merged = _merged(args, {k: v for k, v in file_cfg.items()
                            if k in defaults}, defaults)
    merged["seed"] = _resolve_seed(merged["seed"])
    if getattr(args, "finetune", None):
        merged["mode"] = "finetune"
        merged["base_checkpoint"] = args.finetune
    try:
        return TrainConfig(preprocess=_preprocess_config(args, file_cfg),
                           model=_model_config(args, file_cfg), **merged)
    except (DataError, TypeError) as exc:
        raise UsageError(f"bad training options: {exc}") from None


def _load_labeled_manifest(path: str, check_paths: bool = True):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"manifest {path} does not exist")
    return load_manifest(p, check_paths=check_paths)


def _run_preprocess_config(run_dir: str) -> tuple[TrainConfig, Path]:
    run = Path(run_dir)
    cfg_path = run / "config.json"
    if not cfg_path.is_file():
        raise DataError(f"run directory {run_dir} has no config.json")
    with open(cfg_path, encoding="utf-8") as fh:
        data = json.load(fh)
    if "train" in data and isinstance(data["train"], dict):
        data = data["train"]
    try:
        cfg = TrainConfig.from_dict(data)
    except (TypeError, KeyError) as exc:
        raise DataError(
            f"{cfg_path} does not describe a training run: {exc}") from None
    return cfg, run


def _add_preprocess_flags(p: _Parser) -> None:
    p.add_argument("--target-spacing", nargs=3, metavar=("SX", "SY", "SZ"),
                   help="resample spacing in mm (default 1.5 1.5 7.8)")
    p.add_argument("--target-dims", nargs=3, metavar=("NX", "NY", "NZ"),
                   help="output dims after crop/pad (default 256 256 36)")
    p.add_argument("--clip", nargs=2, metavar=("LO", "HI"),
                   help="clip percentiles (default 1 99)")
    p.add_argument("--no-rescale", action="store_true",
                   help="skip the [0,1] rescale stage")


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--toy", action="store_true",
                   help="toy preset: small model and 32x32x8 inputs")
    p.add_argument("--arch", choices=["densenet", "resnet"],
                   help="model family (default densenet)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    p.add_argument("--folds", type=int)
    p.add_argument("--val-ratio", type=float, dest="val_ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--cache", help="directory for preprocessed-volume cache")
    p.add_argument("--jobs", type=int, default=1,
                   help="parallel fold processes (default 1, fully deterministic)")
    _add_preprocess_flags(p)


def build_parser() -> _Parser:
    parser = _Parser(prog="mriseq",
                     description="Series-type classification toolkit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset",
                       parents=[], description="Generate phantom volumes and "
                       "a manifest for the 8 series types.")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--studies", type=int, default=1,
                   help="studies per patient (default 1)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.add_argument("--dims", nargs=3, metavar=("NX", "NY", "NZ"))
    p.add_argument("--spacing", nargs=3, metavar=("SX", "SY", "SZ"))
    p.add_argument("--domain", choices=["A", "B"], default="A")
    p.add_argument("--gain", type=float)
    p.add_argument("--offset", type=float)
    p.add_argument("--extra-noise", type=float, dest="extra_noise")
    p.add_argument("--bias-amp", type=float, dest="bias_amp")
    p.add_argument("--config", help="JSON file with PhantomConfig fields")

    p = sub.add_parser("preprocess", help="cache preprocessed volumes")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--toy", action="store_true")
    _add_preprocess_flags(p)

    p = sub.add_parser("train", help="5-fold cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, dest="data_fraction",
                   help="train on this patient fraction of the pool")
    p.add_argument("--finetune", metavar="FROM",
                   help="checkpoint file or run dir to start from")
    p.add_argument("--mix", metavar="MANIFEST2",
                   help="union a second manifest into the training pool")
    _add_train_flags(p)

    p = sub.add_parser("predict", help="classify series with a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", help="manifest listing the series")
    p.add_argument("--study", help="directory of .vh volumes (one study)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a run against a labeled manifest")
    p.add_argument("--run", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resamples", type=int, default=1000)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("mcnemar", help="paired test between two runs")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")

    p = sub.add_parser("gradcam", help="saliency volume and slice overlay")
    p.add_argument("--run", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--target-class", dest="target_class",
                   help="class label (default: the predicted class)")
    p.add_argument("--layer", default="final")
    p.add_argument("--member", type=int, default=0,
                   help="ensemble member index (default 0)")
    p.add_argument("--axis", type=int, choices=[0, 1, 2], default=2)
    p.add_argument("--slice", type=int, dest="slice_index",
                   help="slice index (default: middle)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", help="grid over batch size and learning rate")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-sizes", default="1,2,4", dest="batch_sizes")
    p.add_argument("--learning-rates", default="1e-3,1e-4,1e-5",
                   dest="learning_rates")
    _add_train_flags(p)

    p = sub.add_parser("seeds", help="repeat train/eval over several seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", dest="seed_list")
    p.add_argument("--eval-manifest", dest="eval_manifest",
                   help="held-out labeled manifest for ensemble accuracy")
    _add_train_flags(p)

    p = sub.add_parser("report", help="summarize run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------
# handlers

def _cmd_synth(args) -> int:
    file_cfg = _load_config_file(args.config)
    profile_default = (DomainProfile.profile_b() if args.domain == "B"
                       else DomainProfile.profile_a())
    overrides = {
        "gain": args.gain, "offset": args.offset,
        "extra_noise_sigma": args.extra_noise,
        "bias_field_amp": args.bias_amp,
    }
    prof_dict = profile_default.to_dict()
    for key, val in overrides.items():
        if val is not None:
            prof_dict[key] = val
    defaults = {
        "n_patients": None, "dims": (64, 64, 16), "spacing": (0.75, 0.75, 3.9),
        "studies_per_patient": 1, "noise_sigma": 0.05, "seed": None,
    }
    merged = _merged(
        argparse.Namespace(
            n_patients=args.patients,
            dims=_triple(args.dims, int, "--dims"),
            spacing=_triple(args.spacing, float, "--spacing"),
            studies_per_patient=args.studies,
            noise_sigma=args.noise_sigma,
            seed=args.seed,
        ),
        {k: v for k, v in file_cfg.items() if k != "domain"},
        defaults,
    )
    merged["seed"] = _resolve_seed(merged["seed"])
    merged["dims"] = tuple(merged["dims"])
    merged["spacing"] = tuple(merged["spacing"])
    if "domain" in file_cfg:
        prof_dict.update(file_cfg["domain"])
    cfg = PhantomConfig(domain=DomainProfile.from_dict(prof_dict), **merged)
    _echo_config(args.out, cfg.to_dict())
    manifest = generate_dataset(cfg, args.out)
    print(f"wrote {len(manifest.records)} series for {cfg.n_patients} patients "
          f"to {args.out}")
    return 0


def _cmd_preprocess(args) -> int:
    pre = _preprocess_config(args, {})
    manifest = _load_labeled_manifest(args.manifest)
    out = Path(args.out)
    _echo_config(out, {"preprocess": asdict(pre), "manifest": args.manifest})
    from dataclasses import replace

    records = []
    for rec in manifest.records:
        vol = read_volume(manifest.resolve(rec))
        cooked = preprocess_pipeline(vol, pre)
        rel = Path("volumes") / rec.patient_id / rec.study_id / f"{rec.label.value}.vh"
        write_volume(cooked, out / rel)
        records.append(replace(rec, volume_path=str(rel)))
    from .volume import DatasetManifest

    save_manifest(DatasetManifest(records=tuple(records), root_dir=str(out)),
                  out / "manifest.csv")
    print(f"preprocessed {len(records)} volumes into {out}")
    return 0


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    cfg = _train_config(args, file_cfg)
    manifest = _load_labeled_manifest(args.manifest)
    if args.mix:
        manifest = manifest.union(_load_labeled_manifest(args.mix))
    train_cv(manifest, cfg, args.out, cache_dir=args.cache, jobs=args.jobs)
    best = _fold_best_accuracies(Path(args.out))
    mean_acc = sum(best) / len(best) if best else float("nan")
    print(f"trained {cfg.folds} folds; mean best val acc {mean_acc:.4f}; "
          f"run dir {args.out}")
    return 0


def _collect_prediction_paths(args) -> list[str]:
    if bool(args.manifest) == bool(args.study):
        raise UsageError("predict needs exactly one of --manifest or --study")
    if args.manifest:
        manifest = _load_labeled_manifest(args.manifest, check_paths=False)
        return [str(manifest.resolve(r)) for r in manifest.records]
    study = Path(args.study)
    if not study.is_dir():
        raise DataError(f"study directory {args.study} does not exist")
    return [str(p) for p in sorted(study.rglob("*.vh"))]


def _cmd_predict(args) -> int:
    cfg, run = _run_preprocess_config(args.run)
    ensemble = EnsembleModel.from_run_dir(run)
    paths = _collect_prediction_paths(args)
    out = Path(args.out)
    _echo_config(out, {"run": str(run), "preprocess": asdict(cfg.preprocess),
                       "inputs": len(paths)})
    results = predict_study(ensemble, paths, cfg.preprocess)
    write_predictions_csv(results, out / "predictions.csv")
    n_err = sum(1 for _, outcome in results if not isinstance(outcome, Prediction))
    print(f"predicted {len(results) - n_err} series ({n_err} errors) "
          f"-> {out / 'predictions.csv'}")
    return 0


def _predict_labeled(run_dir: str, manifest) -> tuple[list, list, np.ndarray]:
    cfg, run = _run_preprocess_config(run_dir)
    ensemble = EnsembleModel.from_run_dir(run)
    preds, probs = [], []
    for rec in manifest.records:
        vol = read_volume(manifest.resolve(rec))
        pr = predict_proba(ensemble, vol, cfg.preprocess)
        preds.append(pr)
        probs.append(pr.probabilities)
    truths = [rec.label for rec in manifest.records]
    return preds, truths, np.stack(probs)


def _cmd_eval(args) -> int:
    manifest = _load_labeled_manifest(args.manifest)
    out = Path(args.out)
    cfg, _ = _run_preprocess_config(args.run)
    seed = _resolve_seed(args.seed)
    _echo_config(out, {"command": "eval", "run": args.run,
                       "manifest": args.manifest,
                       "resamples": args.resamples, "seed": seed,
                       "train": cfg.to_dict()})
    preds, truths, probs = _predict_labeled(args.run, manifest)
    rows = [(str(manifest.resolve(r)), p) for r, p in zip(manifest.records, preds)]
    write_predictions_csv(rows, out / "predictions.csv")
    report = compute_report([p.label for p in preds], truths, probs,
                            resamples=args.resamples, seed=seed)
    write_report(report, out)
    acc = report.accuracy
    print(f"accuracy {acc.value:.4f} (95% CI {acc.ci_lo:.4f}-{acc.ci_hi:.4f}) "
          f"on {report.n} series -> {out / 'metrics.json'}")
    return 0


def _cmd_mcnemar(args) -> int:
    manifest = _load_labeled_manifest(args.manifest)
    preds_a, truths, _ = _predict_labeled(args.run_a, manifest)
    preds_b, _, _ = _predict_labeled(args.run_b, manifest)
    stat, p_value, b, c = mcnemar([p.label for p in preds_a],
                                  [p.label for p in preds_b], truths)
    print(f"b={b} c={c} statistic={stat:.4f} p={p_value:.4f}")
    if args.out:
        out = Path(args.out)
        _echo_config(out, {"run_a": args.run_a, "run_b": args.run_b,
                           "manifest": args.manifest})
        with open(out / "mcnemar.json", "w", encoding="utf-8") as fh:
            json.dump({"b": b, "c": c, "statistic": stat, "p_value": p_value},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_gradcam(args) -> int:
    cfg, run = _run_preprocess_config(args.run)
    ensemble = EnsembleModel.from_run_dir(run)
    if not 0 <= args.member < len(ensemble.members):
        raise UsageError(f"--member {args.member} out of range "
                         f"(0..{len(ensemble.members) - 1})")
    model = ensemble.members[args.member]
    vol = read_volume(args.volume)
    arr = preprocess_pipeline(vol, cfg.preprocess).array()
    if args.target_class is not None:
        target = SeriesLabel.parse(args.target_class)
    else:
        target = predict_proba(ensemble, vol, cfg.preprocess).label
    out = Path(args.out)
    slice_index = (args.slice_index if args.slice_index is not None
                   else arr.shape[args.axis] // 2)
    _echo_config(out, {"run": str(run), "volume": args.volume,
                       "target_class": target.value, "layer": args.layer,
                       "member": args.member, "axis": args.axis,
                       "slice": slice_index})
    sal = gradcam(model, arr, target, layer=args.layer)
    write_volume(Volume3D.from_array(sal.values, cfg.preprocess.target_spacing,
                                     CANONICAL_ORIENTATION),
                 out / "saliency.vh")
    ppm = out / f"overlay_axis{args.axis}_slice{slice_index}.ppm"
    export_overlay(arr, sal, args.axis, slice_index, ppm)
    print(f"gradcam for {target.value} at layer {sal.layer} -> {ppm}")
    return 0


def _fold_best_accuracies(run_dir: Path) -> list[float]:
    best = []
    for hist in sorted(run_dir.glob("fold*/history.csv"),
                       key=lambda p: int(p.parent.name[4:])):
        with open(hist, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            best.append(max(float(r["val_acc"]) for r in rows))
    return best


def _csv_floats(text: str, cast, what: str):
    try:
        values = [cast(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise UsageError(f"cannot parse {what} list {text!r}") from None
    if not values:
        raise UsageError(f"{what} list is empty")
    return values


def _cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    base = _train_config(args, file_cfg)
    manifest = _load_labeled_manifest(args.manifest)
    batch_sizes = _csv_floats(args.batch_sizes, int, "batch size")
    rates = _csv_floats(args.learning_rates, float, "learning rate")
    out = Path(args.out)
    _echo_config(out, {"base": base.to_dict(), "batch_sizes": batch_sizes,
                       "learning_rates": rates})
    rows = []
    for bs in batch_sizes:
        for lr in rates:
            from dataclasses import replace

            cfg = replace(base, batch_size=bs, learning_rate=lr)
            run = out / f"bs{bs}_lr{lr:g}"
            train_cv(manifest, cfg, run, cache_dir=args.cache, jobs=args.jobs)
            best = _fold_best_accuracies(run)
            mean_acc = sum(best) / len(best)
            rows.append({"batch_size": bs, "learning_rate": lr,
                         "mean_best_val_acc": mean_acc, "run_dir": str(run)})
            print(f"bs={bs} lr={lr:g}: mean best val acc {mean_acc:.4f}")
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["batch_size", "learning_rate",
                                                "mean_best_val_acc", "run_dir"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row,
                             "mean_best_val_acc": f"{row['mean_best_val_acc']:.6f}"})
    return 0


def _ensemble_accuracy(run_dir: Path, manifest) -> float:
    preds, truths, _ = _predict_labeled(str(run_dir), manifest)
    correct = sum(p.label is t for p, t in zip(preds, truths))
    return correct / len(truths)


def _cmd_seeds(args) -> int:
    file_cfg = _load_config_file(args.config)
    base = _train_config(args, file_cfg)
    manifest = _load_labeled_manifest(args.manifest)
    seed_values = _csv_floats(args.seed_list, int, "seed")
    eval_manifest = (_load_labeled_manifest(args.eval_manifest)
                     if args.eval_manifest else None)
    out = Path(args.out)
    _echo_config(out, {"base": base.to_dict(), "seeds": seed_values,
                       "eval_manifest": args.eval_manifest})
    rows = []
    for seed in seed_values:
        from dataclasses import replace

        cfg = replace(base, seed=seed)
        run = out / f"seed{seed}"
        train_cv(manifest, cfg, run, cache_dir=args.cache, jobs=args.jobs)
        best = _fold_best_accuracies(run)
        row = {"seed": seed, "mean_best_val_acc": sum(best) / len(best),
               "run_dir": str(run), "eval_acc": ""}
        if eval_manifest is not None:
            row["eval_acc"] = f"{_ensemble_accuracy(run, eval_manifest):.6f}"
        rows.append(row)
        print(f"seed {seed}: mean best val acc {row['mean_best_val_acc']:.4f}"
              + (f", eval acc {row['eval_acc']}" if row["eval_acc"] else ""))
    with open(out / "seeds.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["seed", "mean_best_val_acc",
                                                "eval_acc", "run_dir"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row,
                             "mean_best_val_acc": f"{row['mean_best_val_acc']:.6f}"})
    return 0


_REPORT_METRICS = ("accuracy", "precision", "sensitivity", "specificity",
                   "f1", "auc_macro")


def _cmd_report(args) -> int:
    out = Path(args.out)
    _echo_config(out, {"runs": list(args.runs)})
    rows = []
    for run in args.runs:
        run_path = Path(run)
        metrics_path = run_path / "metrics.json"
        if not metrics_path.is_file():
            raise DataError(f"run {run} has no metrics.json; run eval into it first")
        with open(metrics_path, encoding="utf-8") as fh:
            metrics = json.load(fh)
        cfg = {}
        cfg_path = run_path / "config.json"
        if cfg_path.is_file():
            with open(cfg_path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        if "train" in cfg and isinstance(cfg["train"], dict):
            cfg = cfg["train"]
        row = {"run": str(run_path),
               "data_fraction": cfg.get("data_fraction", ""),
               "seed": cfg.get("seed", "")}
        for name in _REPORT_METRICS:
            entry = metrics.get(name) or metrics.get("macro", {}).get(name)
            if entry is None:
                row[name] = row[f"{name}_lo"] = row[f"{name}_hi"] = ""
            else:
                row[name] = f"{entry['value']:.6f}"
                row[f"{name}_lo"] = f"{entry['ci95'][0]:.6f}"
                row[f"{name}_hi"] = f"{entry['ci95'][1]:.6f}"
        rows.append(row)
    fields = ["run", "data_fraction", "seed"]
    for name in _REPORT_METRICS:
        fields += [name, f"{name}_lo", f"{name}_hi"]
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    curve = sorted((r for r in rows if r["data_fraction"] != ""),
                   key=lambda r: float(r["data_fraction"]))
    with open(out / "fraction_curve.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["data_fraction", "accuracy", "run"])
        for r in curve:
            writer.writerow([r["data_fraction"], r["accuracy"], r["run"]])
    accs = [float(r["accuracy"]) for r in rows if r["accuracy"]]
    spread = max(accs) - min(accs) if accs else 0.0
    print(f"wrote summary for {len(rows)} runs (accuracy spread "
          f"{spread:.6f}) -> {out / 'summary.csv'}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "train": _cmd_train,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "mcnemar": _cmd_mcnemar,
    "gradcam": _cmd_gradcam,
    "sweep": _cmd_sweep,
    "seeds": _cmd_seeds,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except MriseqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
