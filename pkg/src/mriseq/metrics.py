"""Confusion matrices, per-class metrics with bootstrap CIs, AUC, McNemar.

Conventions, chosen once and used everywhere:

- Confusion rows are true labels, columns are predictions, in canonical
  class order.
- Degenerate one-vs-rest rates: precision and sensitivity are 0 when their
  denominator is 0; specificity is 1 when there are no true negatives plus
  false positives (no negative class present).
- Aggregate ("macro") metrics are unweighted means over classes with
  nonzero support, so absent classes cannot drag averages to zero.
- Confidence intervals are nonparametric bootstrap percentile intervals
  (series-level resampling with replacement, default 1000 resamples),
  deterministic for a fixed seed.
- McNemar's test uses the continuity-corrected chi-square with 1 degree of
  freedom when b+c >= 25 and the exact two-sided binomial tail otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .volume import LABELS, NUM_CLASSES, SeriesLabel


def _as_indices(labels) -> np.ndarray:
    out = np.empty(len(labels), dtype=np.int64)
    for i, item in enumerate(labels):
        if isinstance(item, SeriesLabel):
            out[i] = item.index
        else:
            idx = int(item)
            if not 0 <= idx < NUM_CLASSES:
                raise DataError(f"class index {idx} out of range [0,{NUM_CLASSES})")
            out[i] = idx
    return out


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts of (true, predicted) pairs; rows true, columns predicted."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (NUM_CLASSES, NUM_CLASSES):
            raise DataError(f"confusion matrix must be {NUM_CLASSES}x{NUM_CLASSES}, "
                            f"got {c.shape}")
        if not np.issubdtype(c.dtype, np.integer) or (c < 0).any():
            raise DataError("confusion matrix entries must be non-negative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(preds, truths) -> ConfusionMatrix:
    """Tally an N-pair sample into the 8x8 matrix."""
    p = _as_indices(preds)
    t = _as_indices(truths)
    if p.shape != t.shape:
        raise DataError(f"length mismatch: {len(p)} predictions, {len(t)} truths")
    counts = np.bincount(t * NUM_CLASSES + p,
                         minlength=NUM_CLASSES * NUM_CLASSES)
    return ConfusionMatrix(counts.reshape(NUM_CLASSES, NUM_CLASSES))


def _cm_from_indices(p: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.bincount(t * NUM_CLASSES + p,
                       minlength=NUM_CLASSES * NUM_CLASSES).reshape(NUM_CLASSES,
                                                                    NUM_CLASSES)


def _rates(cm: np.ndarray) -> dict[str, np.ndarray]:
    """Per-class one-vs-rest precision/sensitivity/specificity/F1 arrays."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn

    def safe(num, den, degenerate):
        out = np.full(NUM_CLASSES, degenerate, dtype=np.float64)
        mask = den > 0
        out[mask] = num[mask] / den[mask]
        return out

    precision = safe(tp, tp + fp, 0.0)
    sensitivity = safe(tp, tp + fn, 0.0)
    specificity = safe(tn, tn + fp, 1.0)
    f1 = np.zeros(NUM_CLASSES)
    nz = tp > 0
    f1[nz] = 2 * precision[nz] * sensitivity[nz] / (precision[nz] + sensitivity[nz])
    return {"precision": precision, "sensitivity": sensitivity,
            "specificity": specificity, "f1": f1}


METRIC_NAMES = ("precision", "sensitivity", "specificity", "f1")


def per_class_metrics(cm: ConfusionMatrix) -> dict:
    """Point estimates: per-class rates, macro averages, overall accuracy."""
    if cm.total == 0:
        raise DataError("cannot compute metrics of an empty confusion matrix")
    rates = _rates(cm.counts)
    support = cm.counts.sum(axis=1)
    present = support > 0
    macro = {name: float(values[present].mean()) for name, values in rates.items()}
    return {
        "per_class": {
            label.value: {name: float(rates[name][i]) for name in METRIC_NAMES}
            | {"support": int(support[i])}
            for i, label in enumerate(LABELS)
        },
        "macro": macro,
        "accuracy": float(np.trace(cm.counts) / cm.total),
    }


def _rank_average(scores: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties sharing their average rank."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc_ovr(probabilities: np.ndarray, truths) -> float:
    """Macro one-vs-rest AUC by the rank (Mann-Whitney) formula with ties."""
    probs = np.asarray(probabilities, dtype=np.float64)
    t = _as_indices(truths)
    if probs.ndim != 2 or probs.shape != (len(t), NUM_CLASSES):
        raise DataError(f"probabilities must be (N,{NUM_CLASSES}), got {probs.shape}")
    aucs = []
    for c in range(NUM_CLASSES):
        pos = t == c
        n_pos = int(pos.sum())
        n_neg = len(t) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = _rank_average(probs[:, c])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        aucs.append(auc)
    if not aucs:
        raise DataError("AUC undefined: need at least one class with both "
                        "positive and negative examples")
    return float(np.mean(aucs))


def bootstrap_ci(metric, *arrays, resamples: int = 1000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile CI of metric(*arrays) under joint row resampling.

    ``metric`` is called on row-resampled copies of every array argument;
    all arrays must share their first dimension.
    """
    if not arrays:
        raise DataError("bootstrap_ci needs at least one data array")
    n = len(arrays[0])
    if n < 1:
        raise DataError("bootstrap_ci needs at least one sample")
    if any(len(a) != n for a in arrays):
        raise DataError("bootstrap_ci arrays must share their first dimension")
    arrays = [np.asarray(a) for a in arrays]
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    values = np.empty(resamples, dtype=np.float64)
    for r in range(resamples):
        idx = rng.integers(0, n, size=n)
        values[r] = metric(*(a[idx] for a in arrays))
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def chi2_sf_1df(x: float) -> float:
    """Survival function of the chi-square distribution with 1 df."""
    if x < 0:
        raise DataError(f"chi-square statistic must be non-negative, got {x}")
    return math.erfc(math.sqrt(x / 2.0))


def mcnemar(preds_a, preds_b, truths) -> tuple[float, float, int, int]:
    """Paired accuracy comparison; returns (statistic, p_value, b, c).

    b counts series A got right and B got wrong; c the reverse. With
    b+c >= 25 the continuity-corrected chi-square approximation is used;
    below that, the exact two-sided binomial test (statistic = min(b, c)).
    """
    a = _as_indices(preds_a)
    bb = _as_indices(preds_b)
    t = _as_indices(truths)
    if not (len(a) == len(bb) == len(t)):
        raise DataError(f"length mismatch: {len(a)}, {len(bb)}, {len(t)}")
    a_ok = a == t
    b_ok = bb == t
    b = int((a_ok & ~b_ok).sum())
    c = int((~a_ok & b_ok).sum())
    n = b + c
    if n == 0:
        return 0.0, 1.0, 0, 0
    if n >= 25:
        stat = (abs(b - c) - 1) ** 2 / n
        return float(stat), float(chi2_sf_1df(stat)), b, c
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0 ** n
    return float(k), float(min(1.0, 2.0 * tail)), b, c


@dataclass(frozen=True)
class MetricValue:
    """A point estimate with its 95% CI endpoints."""

    value: float
    ci_lo: float
    ci_hi: float

    def to_list(self) -> list[float]:
        return [self.value, self.ci_lo, self.ci_hi]


@dataclass(frozen=True)
class MetricReport:
    """Everything the eval command reports, with confidence intervals."""

    confusion_matrix: ConfusionMatrix
    accuracy: MetricValue
    macro: dict[str, MetricValue]
    per_class: dict[str, dict[str, MetricValue]]
    auc_macro: MetricValue | None
    n: int

    def to_dict(self) -> dict:
        def mv(m: MetricValue) -> dict:
            return {"value": m.value, "ci95": [m.ci_lo, m.ci_hi]}

        d = {
            "n": self.n,
            "accuracy": mv(self.accuracy),
            "macro": {k: mv(v) for k, v in self.macro.items()},
            "per_class": {
                label: {k: mv(v) for k, v in metrics.items()}
                for label, metrics in self.per_class.items()
            },
            "confusion": self.confusion_matrix.counts.tolist(),
        }
        if self.auc_macro is not None:
            d["auc_macro"] = mv(self.auc_macro)
        return d


def _point_values(p: np.ndarray, t: np.ndarray,
                  probs: np.ndarray | None) -> dict[str, float]:
    """Flat  name -> value map for one (re)sample."""
    cm = _cm_from_indices(p, t)
    rates = _rates(cm)
    support = cm.sum(axis=1)
    present = support > 0
    out = {"accuracy": float(np.trace(cm) / cm.sum())}
    for name in METRIC_NAMES:
        out[f"macro.{name}"] = float(rates[name][present].mean())
        for i, label in enumerate(LABELS):
            out[f"class.{label.value}.{name}"] = float(rates[name][i])
    if probs is not None:
        try:
            out["auc_macro"] = auc_ovr(probs, t)
        except DataError:
            out["auc_macro"] = math.nan
    return out


def compute_report(preds, truths, probabilities=None, resamples: int = 1000,
                   level: float = 0.95, seed: int = 0) -> MetricReport:
    """Point estimates plus bootstrap CIs for every reported metric.

    One bootstrap pass drives all intervals, so the whole report is
    consistent and costs a single resampling loop. CIs are clamped to
    contain the point estimate.
    """
    p = _as_indices(preds)
    t = _as_indices(truths)
    if p.shape != t.shape:
        raise DataError(f"length mismatch: {len(p)} predictions, {len(t)} truths")
    if len(p) == 0:
        raise DataError("cannot evaluate an empty prediction set")
    probs = None
    if probabilities is not None:
        probs = np.asarray(probabilities, dtype=np.float64)
        if probs.shape != (len(t), NUM_CLASSES):
            raise DataError(f"probabilities must be (N,{NUM_CLASSES}), "
                            f"got {probs.shape}")

    point = _point_values(p, t, probs)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples: dict[str, np.ndarray] = {k: np.empty(resamples) for k in point}
    for r in range(resamples):
        idx = rng.integers(0, len(p), size=len(p))
        vals = _point_values(p[idx], t[idx], None if probs is None else probs[idx])
        for k, v in vals.items():
            samples[k][r] = v

    alpha = (1.0 - level) / 2.0

    def interval(name: str) -> MetricValue:
        vals = samples[name]
        vals = vals[np.isfinite(vals)]
        v = point[name]
        if vals.size == 0 or not math.isfinite(v):
            return MetricValue(v, v, v)
        lo, hi = np.percentile(vals, [100 * alpha, 100 * (1 - alpha)])
        return MetricValue(v, min(float(lo), v), max(float(hi), v))

    report = MetricReport(
        confusion_matrix=ConfusionMatrix(_cm_from_indices(p, t)),
        accuracy=interval("accuracy"),
        macro={name: interval(f"macro.{name}") for name in METRIC_NAMES},
        per_class={
            label.value: {name: interval(f"class.{label.value}.{name}")
                          for name in METRIC_NAMES}
            for label in LABELS
        },
        auc_macro=interval("auc_macro") if probs is not None else None,
        n=len(p),
    )
    return report


def write_report(report: MetricReport, out_dir: str | Path) -> None:
    """Emit metrics.json and confusion.csv into a directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "confusion.csv", "w", newline="", encoding="utf-8") as fh:
        names = [l.value for l in LABELS]
        fh.write("label," + ",".join(names) + "\n")
        for i, name in enumerate(names):
            row = ",".join(str(int(x)) for x in report.confusion_matrix.counts[i])
            fh.write(f"{name},{row}\n")
