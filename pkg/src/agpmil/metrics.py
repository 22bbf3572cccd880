"""Bag-level metrics, uncertainty analysis and CSV/JSON export."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

HIST_BIN_WIDTH = 0.005
ATTENTION_HEADER = ["bag_id", "instance_index", "weight_mean", "weight_std"]
HIST_HEADER = ["bin_low", "correct_count", "incorrect_count"]


def _labels(true_labels, predicted_labels):
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"length mismatch: {t.size} true labels vs {p.size} predictions")
    return t, p


def confusion_matrix(true_labels, predicted_labels, k: int) -> np.ndarray:
    t, p = _labels(true_labels, predicted_labels)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def quadratic_kappa(true_labels, predicted_labels, k: int) -> float:
    """Cohen's kappa with quadratic weights (i - j)^2 / (k - 1)^2."""
    t, p = _labels(true_labels, predicted_labels)
    if t.size == 0:
        raise ValueError("quadratic_kappa needs at least one label")
    if k < 2:
        raise ValueError("quadratic_kappa needs at least two classes")
    if t.min() < 0 or p.min() < 0 or t.max() >= k or p.max() >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    observed = confusion_matrix(t, p, k).astype(np.float64)
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / t.size
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    num = (w * observed).sum()
    den = (w * expected).sum()
    if den == 0.0:
        # both raters constant; agreement is perfect only if they coincide
        return 1.0 if num == 0.0 else 0.0
    return float(1.0 - num / den)


def per_class_f1(true_labels, predicted_labels, k: int) -> np.ndarray:
    cm = confusion_matrix(true_labels, predicted_labels, k)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    # class absent from both labelings counts as perfect
    return np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 1.0)


def macro_f1(true_labels, predicted_labels, k: int) -> float:
    return float(per_class_f1(true_labels, predicted_labels, k).mean())


@dataclass
class BagRecord:
    bag_id: int
    true: int
    predicted: int
    prob_mean: list
    prob_std: list
    total_uncertainty: float


@dataclass
class EvalReport:
    num_bags: int
    num_classes: int
    accuracy: float
    macro_f1: float
    quadratic_kappa: float
    confusion: list
    positive_f1: Optional[float]
    mean_std_correct: Optional[float]
    mean_std_incorrect: Optional[float]
    correct_empty: bool
    incorrect_empty: bool
    uncertainty_hist: list
    per_bag: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def accuracy_below(self, threshold: float) -> tuple:
        """Accuracy over bags with total_uncertainty < threshold, and how many there are."""
        kept = [r for r in self.per_bag if r.total_uncertainty < threshold]
        if not kept:
            return math.nan, 0
        return float(np.mean([r.true == r.predicted for r in kept])), len(kept)


def uncertainty_histogram(uncertainties, correct, width: float = HIST_BIN_WIDTH) -> list:
    """Rows ``[bin_low, correct_count, incorrect_count]`` from 0 up to the largest occupied bin."""
    u = np.asarray(uncertainties, dtype=np.float64)
    c = np.asarray(correct, dtype=bool)
    if u.size == 0:
        return []
    bins = np.floor(u / width + 1e-9).astype(np.int64)
    top = int(bins.max())
    good = np.bincount(bins[c], minlength=top + 1)
    bad = np.bincount(bins[~c], minlength=top + 1)
    return [[round(b * width, 10), int(good[b]), int(bad[b])] for b in range(top + 1)]


def uncertainty_report(predictions: Sequence, truths: Sequence[int], bag_ids: Optional[Sequence[int]] = None) -> EvalReport:
    if len(predictions) == 0:
        raise ValueError("uncertainty_report needs at least one prediction")
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions vs {len(truths)} labels")
    k = len(predictions[0].class_prob_mean)
    ids = list(range(len(predictions))) if bag_ids is None else [int(b) for b in bag_ids]
    t = np.asarray(truths, dtype=np.int64)
    p = np.asarray([pr.predicted_class for pr in predictions], dtype=np.int64)
    u = np.asarray([pr.total_uncertainty for pr in predictions], dtype=np.float64)
    ok = t == p
    cm = confusion_matrix(t, p, k)
    records = [
        BagRecord(
            ids[i],
            int(t[i]),
            int(p[i]),
            [float(v) for v in pr.class_prob_mean],
            [float(v) for v in pr.class_prob_std],
            float(pr.total_uncertainty),
        )
        for i, pr in enumerate(predictions)
    ]
    return EvalReport(
        num_bags=len(predictions),
        num_classes=k,
        accuracy=float(np.trace(cm) / cm.sum()),
        macro_f1=macro_f1(t, p, k),
        quadratic_kappa=quadratic_kappa(t, p, k),
        confusion=cm.tolist(),
        positive_f1=float(per_class_f1(t, p, k)[1]) if k == 2 else None,
        mean_std_correct=float(u[ok].mean()) if ok.any() else None,
        mean_std_incorrect=float(u[~ok].mean()) if (~ok).any() else None,
        correct_empty=not ok.any(),
        incorrect_empty=bool(ok.all()),
        uncertainty_hist=uncertainty_histogram(u, ok),
        per_bag=records,
    )


def write_histogram_csv(report: EvalReport, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HIST_HEADER)
            w.writerows(report.uncertainty_hist)
    except OSError as err:
        raise OSError(f"cannot write histogram to {path}: {err}") from err


def export_attention(predictions: Sequence, path, bag_ids: Optional[Sequence[int]] = None) -> None:
    """One CSV row per instance with the Monte Carlo mean and std of its attention weight."""
    ids = list(range(len(predictions))) if bag_ids is None else list(bag_ids)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(ATTENTION_HEADER)
            for bag_id, pr in zip(ids, predictions):
                att = pr.attention
                for i, (m, s) in enumerate(zip(att.weight_mean, att.weight_std)):
                    w.writerow([int(bag_id), i, repr(float(m)), repr(float(s))])
    except OSError as err:
        raise OSError(f"cannot write attention export to {path}: {err}") from err


def read_attention(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ATTENTION_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in rows[1:]]


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_json())
