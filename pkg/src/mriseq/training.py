"""Patient-level splits, fold training with best-epoch checkpointing, CV.

A run directory looks like::

    run/
      config.json          resolved TrainConfig
      fold0/best.ckpt      weights of the best-validation-accuracy epoch
      fold0/history.csv    epoch,train_loss,train_acc,val_loss,val_acc
      ...

Determinism: for a fixed seed and jobs=1 the produced checkpoints are
bitwise reproducible. All randomness flows through numpy SeedSequence
streams keyed by (seed, tag, fold, epoch); nothing depends on process
state or hash randomization.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .errors import DataError, NumericError
from .models import EnsembleModel, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .optim import Adam
from .preprocess import PreprocessConfig, preprocess_pipeline
from .volume import DatasetManifest, SeriesRecord, read_volume, write_volume

# Fixed spawn-key tags keep the independent RNG streams from colliding.
_SPLIT_TAG = 0x5B17
_SUBSET_TAG = 0x5F2A
_MODEL_TAG = 0
_EPOCH_TAG = 1

_EVAL_BATCH = 8


@dataclass(frozen=True)
class TrainConfig:
    """Resolved training hyperparameters, including nested sub-configs."""

    epochs: int = 25
    batch_size: int = 2
    learning_rate: float = 1e-4
    folds: int = 5
    val_ratio: float = 0.12
    data_fraction: float = 1.0
    mode: str = "scratch"
    base_checkpoint: str | None = None
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.folds < 1:
            raise DataError("folds must be >= 1")
        if not (0.0 < self.val_ratio < 1.0):
            raise DataError(f"val_ratio must be in (0,1), got {self.val_ratio}")
        if not (0.0 < self.data_fraction <= 1.0):
            raise DataError(f"data_fraction must be in (0,1], got {self.data_fraction}")
        if self.mode not in ("scratch", "finetune"):
            raise DataError(f"mode must be scratch or finetune, got {self.mode!r}")
        if self.mode == "finetune" and not self.base_checkpoint:
            raise DataError("finetune mode requires base_checkpoint")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "folds": self.folds,
            "val_ratio": self.val_ratio,
            "data_fraction": self.data_fraction,
            "mode": self.mode,
            "base_checkpoint": self.base_checkpoint,
            "seed": self.seed,
            "preprocess": asdict(self.preprocess),
            "model": asdict(self.model),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        pre = d.pop("preprocess", {})
        model = d.pop("model", {})
        if isinstance(pre, dict):
            pre = {k: tuple(v) if isinstance(v, list) else v for k, v in pre.items()}
            pre = PreprocessConfig(**pre)
        if isinstance(model, dict):
            model = ModelConfig(**model)
        return cls(preprocess=pre, model=model, **d)


@dataclass(frozen=True)
class FoldSplit:
    """One train/validation partition of the patient pool."""

    fold: int
    train_records: tuple[SeriesRecord, ...]
    val_records: tuple[SeriesRecord, ...]

    def __post_init__(self):
        if not self.train_records or not self.val_records:
            raise DataError(f"fold {self.fold}: both sides must be non-empty")
        overlap = self.train_patients() & self.val_patients()
        if overlap:
            raise DataError(f"fold {self.fold}: patient leakage {sorted(overlap)}")

    def train_patients(self) -> set[str]:
        return {r.patient_id for r in self.train_records}

    def val_patients(self) -> set[str]:
        return {r.patient_id for r in self.val_records}


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_patient_level(manifest: DatasetManifest, val_ratio: float,
                        folds: int, seed: int) -> list[FoldSplit]:
    """Independent per-fold shuffles, each holding out val_ratio of patients.

    All series of a patient land on the same side. The same seed always
    produces the same splits.
    """
    if not (0.0 < val_ratio < 1.0):
        raise DataError(f"val_ratio must be in (0,1), got {val_ratio}")
    patients = manifest.patients()
    if len(patients) < 2:
        raise DataError(f"need at least 2 patients to split, got {len(patients)}")
    n_val = min(max(1, _round_half_up(val_ratio * len(patients))), len(patients) - 1)
    splits = []
    for k in range(folds):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SPLIT_TAG, k)))
        order = [patients[i] for i in rng.permutation(len(patients))]
        val_set = set(order[:n_val])
        train = tuple(r for r in manifest.records if r.patient_id not in val_set)
        val = tuple(r for r in manifest.records if r.patient_id in val_set)
        splits.append(FoldSplit(fold=k, train_records=train, val_records=val))
    return splits


def subset_fraction(manifest: DatasetManifest, fraction: float,
                    seed: int) -> DatasetManifest:
    """Keep round(fraction * n_patients) patients, nested across fractions.

    One shuffle per seed; a fraction keeps a prefix of it, so the 20% subset
    is contained in the 60% subset and so on. fraction=1.0 is the identity.
    """
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"fraction must be in (0,1], got {fraction}")
    if fraction == 1.0:
        return manifest
    patients = manifest.patients()
    k = _round_half_up(fraction * len(patients))
    if k < 1:
        raise DataError(
            f"fraction {fraction} of {len(patients)} patients selects nobody")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SUBSET_TAG,)))
    order = [patients[i] for i in rng.permutation(len(patients))]
    return manifest.filter_patients(order[:k])


def _fold_model_seed(seed: int, fold: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(fold, _MODEL_TAG))
    return int(ss.generate_state(1, np.uint64)[0])


def _cache_name(abs_path: str, digest: str) -> str:
    h = hashlib.blake2s(f"{abs_path}|{digest}".encode("utf-8"), digest_size=10)
    return h.hexdigest() + ".vh"


def load_preprocessed(manifest: DatasetManifest, pre_cfg: PreprocessConfig,
                      cache_dir: str | None = None) -> dict[str, np.ndarray]:
    """Preprocess every series once, keyed by resolved path.

    With a cache directory, results are persisted as volumes and reused by
    later runs with the same PreprocessConfig (the key includes its digest).
    """
    store: dict[str, np.ndarray] = {}
    digest = pre_cfg.digest()
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    for rec in manifest.records:
        path = str(manifest.resolve(rec))
        if path in store:
            continue
        cached = os.path.join(cache_dir, _cache_name(path, digest)) if cache_dir else None
        if cached and os.path.exists(cached):
            arr = read_volume(cached).array()
        else:
            try:
                vol = read_volume(path)
            except DataError as exc:
                raise DataError(f"failed to load {rec.volume_path}: {exc}") from None
            arr = preprocess_pipeline(vol, pre_cfg).array()
            if cached:
                from .volume import Volume3D

                write_volume(Volume3D.from_array(arr, pre_cfg.target_spacing,
                                                 read_volume(path).orientation),
                             cached)
        store[path] = np.ascontiguousarray(arr, dtype=np.float32)
    return store


def _batch(store, manifest, records) -> tuple[np.ndarray, np.ndarray]:
    xs = [store[str(manifest.resolve(r))] for r in records]
    ys = [r.label.index for r in records]
    return np.stack(xs)[:, None], np.asarray(ys, dtype=np.int64)


def _evaluate(model, store, manifest, records) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    total_loss = 0.0
    correct = 0
    with no_grad():
        for i in range(0, len(records), _EVAL_BATCH):
            chunk = records[i:i + _EVAL_BATCH]
            x, y = _batch(store, manifest, chunk)
            logits = model(Tensor(x), training=False)
            loss = ad.cross_entropy(logits, y)
            total_loss += float(loss.data) * len(chunk)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = len(records)
    return total_loss / n, correct / n


def train_fold(split: FoldSplit, cfg: TrainConfig, manifest: DatasetManifest,
               store: dict[str, np.ndarray], fold_dir: str | Path) -> dict:
    """Train one fold; write best.ckpt and history.csv; return a summary.

    The checkpoint holds the weights of the epoch with the highest
    validation accuracy (ties keep the earlier epoch). train_loss/train_acc
    are running statistics over the update minibatches of that epoch;
    val_loss/val_acc are eval-mode passes over the held-out patients.
    """
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg.model, seed=_fold_model_seed(cfg.seed, split.fold))
    if cfg.mode == "finetune":
        base = _resolve_base_checkpoint(cfg.base_checkpoint, split.fold)
        loaded = load_checkpoint(base, expect_config=cfg.model)
        model.load_state_dict(loaded.state_dict())

    optimizer = Adam(model.parameters(), learning_rate=cfg.learning_rate)
    history: list[dict] = []
    best = {"epoch": 0, "val_acc": -1.0, "state": model.state_dict()}

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(
            np.random.SeedSequence(cfg.seed, spawn_key=(split.fold, _EPOCH_TAG, epoch)))
        order = rng.permutation(len(split.train_records))
        epoch_loss = 0.0
        epoch_correct = 0
        for i in range(0, len(order), cfg.batch_size):
            chunk = [split.train_records[j] for j in order[i:i + cfg.batch_size]]
            x, y = _batch(store, manifest, chunk)
            logits = model(Tensor(x), training=True)
            loss = ad.cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise NumericError(
                    f"non-finite loss at fold {split.fold} epoch {epoch} step {i}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.data) * len(chunk)
            epoch_correct += int((logits.data.argmax(axis=1) == y).sum())
        n_train = len(split.train_records)
        val_loss, val_acc = _evaluate(model, store, manifest, split.val_records)
        row = {
            "epoch": epoch,
            "train_loss": epoch_loss / n_train,
            "train_acc": epoch_correct / n_train,
            "val_loss": val_loss,
            "val_acc": val_acc,
        }
        history.append(row)
        if val_acc > best["val_acc"]:
            best = {"epoch": epoch, "val_acc": val_acc, "state": model.state_dict()}

    model.load_state_dict(best["state"])
    save_checkpoint(model, fold_dir / "best.ckpt")
    with open(fold_dir / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[k]:.6f}" for k in
                                              ("train_loss", "train_acc",
                                               "val_loss", "val_acc")])
    return {"fold": split.fold, "best_epoch": best["epoch"],
            "best_val_acc": best["val_acc"], "history": history}


def _resolve_base_checkpoint(base: str, fold: int) -> Path:
    """A file is shared by all folds; a run directory maps fold to fold."""
    p = Path(base)
    if p.is_dir():
        candidate = p / f"fold{fold}" / "best.ckpt"
        if not candidate.is_file():
            raise DataError(f"finetune base run {base} has no fold{fold}/best.ckpt")
        return candidate
    if not p.is_file():
        raise DataError(f"finetune base checkpoint {base} does not exist")
    return p


def _train_fold_entry(args):
    split, cfg, manifest, store, fold_dir = args
    return train_fold(split, cfg, manifest, store, fold_dir)


def train_cv(manifest: DatasetManifest, cfg: TrainConfig, out_dir: str | Path,
             cache_dir: str | None = None, jobs: int = 1) -> EnsembleModel:
    """Train all folds and return the resulting ensemble.

    Writes config.json before any work. With jobs > 1 the folds run in
    separate processes; jobs=1 is sequential and bitwise reproducible.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    if not manifest.records:
        raise DataError("empty manifest")
    if cfg.data_fraction < 1.0:
        manifest = subset_fraction(manifest, cfg.data_fraction, cfg.seed)
    splits = split_patient_level(manifest, cfg.val_ratio, cfg.folds, cfg.seed)
    store = load_preprocessed(manifest, cfg.preprocess, cache_dir)

    tasks = [(split, cfg, manifest, store, out_dir / f"fold{split.fold}")
             for split in splits]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_train_fold_entry, tasks))
    else:
        for task in tasks:
            _train_fold_entry(task)
    return EnsembleModel.from_run_dir(out_dir)
