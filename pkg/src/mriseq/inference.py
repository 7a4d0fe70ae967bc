"""Ensemble prediction: average fold softmax outputs, argmax the mean."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, softmax
from .errors import DataError
from .models import EnsembleModel
from .preprocess import PreprocessConfig, preprocess_pipeline
from .volume import LABELS, SeriesLabel, Volume3D, read_volume

PREDICTION_COLUMNS = ["volume_path", "pred_label"] + [f"p_{l.value}" for l in LABELS]


@dataclass(frozen=True)
class Prediction:
    """Ensemble class probabilities for one series."""

    probabilities: np.ndarray          # (num_classes,) mean over folds
    label: SeriesLabel
    per_fold_probabilities: np.ndarray  # (folds, num_classes)

    def __post_init__(self):
        p = self.probabilities
        if p.ndim != 1 or not np.isfinite(p).all():
            raise DataError(f"invalid probability vector {p}")
        if (p < -1e-9).any() or abs(float(p.sum()) - 1.0) > 1e-6:
            raise DataError(f"probabilities must be a distribution, got sum {p.sum()}")
        if self.label.index != int(np.argmax(p)):
            raise DataError("label must be the argmax of the probabilities")


def _ensemble_probs(ensemble: EnsembleModel, batch: np.ndarray) -> np.ndarray:
    """Per-fold softmax probabilities, shape (folds, n, num_classes)."""
    out = []
    with no_grad():
        for member in ensemble.members:
            logits = member(Tensor(batch), training=False)
            out.append(softmax(logits, axis=1).data)
    return np.stack(out)


def predict_proba(ensemble: EnsembleModel, vol: Volume3D,
                  preprocess: PreprocessConfig) -> Prediction:
    """Predict one series: preprocess, run every fold, average, argmax.

    Ties in the argmax go to the lowest class index.
    """
    arr = preprocess_pipeline(vol, preprocess).array().astype(np.float32)
    per_fold = _ensemble_probs(ensemble, arr[None, None])[:, 0]
    mean = per_fold.mean(axis=0)
    label = SeriesLabel.from_index(int(np.argmax(mean)))
    return Prediction(probabilities=mean, label=label,
                      per_fold_probabilities=per_fold)


def predict_study(ensemble: EnsembleModel, paths, preprocess: PreprocessConfig):
    """Predict every series of a study.

    Returns a list of (path, Prediction | error string) in input order; a
    failing series yields its error message instead of aborting the rest.
    """
    results = []
    for path in paths:
        try:
            vol = read_volume(path)
            results.append((str(path), predict_proba(ensemble, vol, preprocess)))
        except DataError as exc:
            results.append((str(path), f"ERROR: {exc}"))
    return results


def write_predictions_csv(results, path: str | Path) -> None:
    """CSV with one row per series; probabilities printed to 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for vol_path, outcome in results:
            if isinstance(outcome, Prediction):
                probs = [f"{p:.6f}" for p in outcome.probabilities]
                writer.writerow([vol_path, outcome.label.value] + probs)
            else:
                writer.writerow([vol_path, str(outcome)] + [""] * len(LABELS))


def read_predictions_csv(path: str | Path):
    """Parse rows back into (path, SeriesLabel | error string, probs | None)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing predictions file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != PREDICTION_COLUMNS:
            raise DataError(f"unexpected predictions header in {path}: {header}")
        rows = []
        for row in reader:
            if len(row) != len(PREDICTION_COLUMNS):
                raise DataError(f"malformed predictions row in {path}: {row}")
            vol_path, label_text = row[0], row[1]
            if label_text.startswith("ERROR"):
                rows.append((vol_path, label_text, None))
            else:
                probs = np.array([float(x) for x in row[2:]])
                rows.append((vol_path, SeriesLabel.parse(label_text), probs))
        return rows
