"""Evaluation: confusion/F1, tie-aware ROC-AUC and PR-AUC, ensembling,
attention-map export, and report formatting.

Per-class ROC-AUC is the Mann-Whitney statistic (tied scores count 1/2,
implemented with averaged ranks) and PR-AUC is average precision with
tied scores grouped at a single threshold.  Classes a metric cannot be
computed for are reported as None -- never as 0 -- and weighted
aggregates renormalize over the classes that remain.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from raamil.bags import CLASS_NAMES, NUM_CLASSES, TokenBag
from raamil.mil import BagForward

log = logging.getLogger(__name__)

_SIMPLEX_TOL = 1e-12


class MetricsError(ValueError):
    """Inputs outside a metric's domain (bad labels, no eligible class)."""


@dataclass
class CoreMetrics:
    """Confusion-matrix-derived scores; rows of `confusion` are the truth."""

    confusion: np.ndarray      # (K, K) ints
    precision: np.ndarray      # (K,)
    recall: np.ndarray         # (K,)
    f1: np.ndarray             # (K,)
    support: np.ndarray        # (K,) ints, row sums of confusion
    accuracy: float
    weighted_f1: float


def confusion_and_f1(preds, truth, num_classes: int = NUM_CLASSES) -> CoreMetrics:
    """Standard multiclass scores with the zero-division-gives-0 convention."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1 or len(preds) == 0:
        raise MetricsError(
            f"need equal-length nonempty label vectors, got {preds.shape} vs {truth.shape}")
    for name, arr in (("prediction", preds), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise MetricsError(
                f"{name} labels outside 0..{num_classes - 1}: "
                f"min={arr.min()} max={arr.max()}")

    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    support = confusion.sum(axis=1)
    predicted = confusion.sum(axis=0)
    tp = np.diag(confusion).astype(np.float64)

    with np.errstate(invalid="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        recall = np.where(support > 0, tp / np.maximum(support, 1), 0.0)
        pr_sum = precision + recall
        f1 = np.where(pr_sum > 0, 2 * precision * recall / np.where(pr_sum > 0, pr_sum, 1), 0.0)

    accuracy = float(tp.sum() / len(truth))
    weighted_f1 = float((support * f1).sum() / support.sum())
    return CoreMetrics(confusion=confusion, precision=precision, recall=recall,
                       f1=f1, support=support, accuracy=accuracy, weighted_f1=weighted_f1)


def _tied_ranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    sorted_scores = scores[order]
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    ranks = _tied_ranks(scores)
    rank_sum = float(ranks[positive].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def roc_auc_ovr_weighted(probs, truth) -> tuple[float, list[float | None]]:
    """Support-weighted one-vs-rest ROC-AUC over the eligible classes.

    A class needs at least one positive and one negative to be eligible;
    others come back as None and drop out of the (renormalized) aggregate.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if probs.ndim != 2 or probs.shape != (len(truth), NUM_CLASSES):
        raise MetricsError(f"need (N, {NUM_CLASSES}) scores, got {probs.shape}")
    per_class: list[float | None] = []
    weights = []
    for c in range(NUM_CLASSES):
        positive = truth == c
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == len(truth):
            per_class.append(None)
            weights.append(0)
            continue
        per_class.append(_binary_auc(probs[:, c], positive))
        weights.append(n_pos)
    total = sum(weights)
    if total == 0:
        raise MetricsError("no class has both a positive and a negative example")
    weighted = sum(w * a for w, a in zip(weights, per_class) if a is not None) / total
    return float(weighted), per_class


def _average_precision(scores: np.ndarray, positive: np.ndarray) -> float:
    """Step-wise AP over descending-score thresholds, ties grouped."""
    n_pos = int(positive.sum())
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    p = positive[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(p[i:j + 1].sum())
        seen += j - i + 1
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / seen)
        prev_recall = recall
        i = j + 1
    return ap


def pr_auc_per_class(probs, truth) -> tuple[list[float | None], float | None]:
    """Average precision per class plus the support-weighted aggregate over
    the classes that have at least one positive."""
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    if probs.ndim != 2 or probs.shape != (len(truth), NUM_CLASSES):
        raise MetricsError(f"need (N, {NUM_CLASSES}) scores, got {probs.shape}")
    per_class: list[float | None] = []
    weights = []
    for c in range(NUM_CLASSES):
        positive = truth == c
        n_pos = int(positive.sum())
        if n_pos == 0:
            per_class.append(None)
            weights.append(0)
            continue
        per_class.append(_average_precision(probs[:, c], positive))
        weights.append(n_pos)
    total = sum(weights)
    if total == 0:
        return per_class, None
    weighted = sum(w * a for w, a in zip(weights, per_class) if a is not None) / total
    return per_class, float(weighted)


def ensemble_average(prob_sets, fold_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Arithmetic mean of per-fold probabilities and the argmax labels.

    Folds are summed in ascending fold-id order so any permutation of the
    inputs gives bitwise-identical output; argmax ties go to the lowest
    class index (logged when that happens).
    """
    arr = np.asarray(prob_sets, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != NUM_CLASSES:
        raise MetricsError(f"need (folds, N, {NUM_CLASSES}) probabilities, got {arr.shape}")
    row_sums = arr.sum(axis=2)
    if np.any(np.abs(row_sums - 1.0) > 1e-9) or np.any(arr < 0):
        worst = tuple(map(int, np.unravel_index(int(np.argmax(np.abs(row_sums - 1.0))), row_sums.shape)))
        raise MetricsError(f"input row {worst} is not on the simplex (sum {row_sums[worst]})")
    if fold_ids is not None:
        fold_ids = list(fold_ids)
        if len(fold_ids) != arr.shape[0] or len(set(fold_ids)) != len(fold_ids):
            raise MetricsError(f"need {arr.shape[0]} distinct fold ids, got {fold_ids}")
        arr = arr[np.argsort(fold_ids, kind="stable")]

    total = np.zeros(arr.shape[1:])
    for f in range(arr.shape[0]):
        total += arr[f]
    mean = total / arr.shape[0]
    labels = np.argmax(mean, axis=1)
    n_ties = int(((mean == mean.max(axis=1, keepdims=True)).sum(axis=1) > 1).sum())
    if n_ties:
        log.warning("argmax tie in %d ensemble row(s); lowest class index chosen", n_ties)
    return mean, labels


# ---------------------------------------------------------------- reporting

@dataclass
class MetricsReport:
    """Full evaluation of one prediction set; None marks undefined values."""

    accuracy: float
    confusion: list
    per_class: list          # dicts: class, precision, recall, f1, support
    weighted_f1: float
    roc_auc_per_class: list
    weighted_roc_auc: float | None
    pr_auc_per_class: list
    weighted_pr_auc: float | None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))


def compute_report(probs, truth) -> MetricsReport:
    """Evaluate probabilities against truth; argmax (lowest index on ties)
    supplies the hard labels."""
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    preds = np.argmax(probs, axis=1)
    core = confusion_and_f1(preds, truth)
    try:
        weighted_roc, roc_per_class = roc_auc_ovr_weighted(probs, truth)
    except MetricsError:
        weighted_roc, roc_per_class = None, [None] * NUM_CLASSES
    ap_per_class, weighted_ap = pr_auc_per_class(probs, truth)
    per_class = [
        {"class": CLASS_NAMES[c],
         "precision": float(core.precision[c]),
         "recall": float(core.recall[c]),
         "f1": float(core.f1[c]),
         "support": int(core.support[c])}
        for c in range(NUM_CLASSES)
    ]
    return MetricsReport(
        accuracy=core.accuracy,
        confusion=core.confusion.tolist(),
        per_class=per_class,
        weighted_f1=core.weighted_f1,
        roc_auc_per_class=roc_per_class,
        weighted_roc_auc=weighted_roc,
        pr_auc_per_class=ap_per_class,
        weighted_pr_auc=weighted_ap,
    )


def format_mean_std(mean: float, std: float, decimals: int = 3) -> str:
    return f"{mean:.{decimals}f} ± {std:.{decimals}f}"


def _render_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip()
             for row in [header] + rows]
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines)


def format_performance_table(rows: list[tuple[str, float, float, float | None]]) -> str:
    """Model-level summary: accuracy, weighted F1, weighted PR-AUC."""
    body = [[name, f"{acc:.4f}", f"{f1:.4f}",
             "n/a" if auprc is None else f"{auprc:.4f}"]
            for name, acc, f1, auprc in rows]
    return _render_table(["Model", "Accuracy", "F1 (Weighted)", "AUPRC (Weighted)"], body)


def format_pr_table(models: list[str], per_class_values: list[list[float | None]]) -> str:
    """Per-class PR-AUC, one column per model."""
    body = []
    for c in range(NUM_CLASSES):
        row = [CLASS_NAMES[c]]
        for values in per_class_values:
            v = values[c]
            row.append("n/a" if v is None else f"{v:.4f}")
        body.append(row)
    return _render_table(["Class"] + list(models), body)


# ----------------------------------------------------------- attention maps

def _bilinear_upsample(grid: np.ndarray, size: int) -> np.ndarray:
    """Resample an (R, C) grid to (size, size) by sampling at output pixel
    centers with edge clamping."""
    r, c = grid.shape
    ys = np.clip((np.arange(size) + 0.5) * (r / size) - 0.5, 0, r - 1)
    xs = np.clip((np.arange(size) + 0.5) * (c / size) - 0.5, 0, c - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, r - 1)
    x1 = np.minimum(x0 + 1, c - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def _write_pgm(path: Path, image: np.ndarray) -> None:
    """8-bit binary PGM from values already in [0, 1]."""
    data = np.round(image * 255.0).astype(np.uint8)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + data.tobytes())


def export_attention_map(bag: TokenBag, fwd: BagForward, out_dir, size: int = 224) -> list[Path]:
    """Write one PGM heatmap and one raw-weight CSV per patch.

    Weights are min-max normalized over the whole bag (so patch intensities
    are comparable); a constant-weight bag renders mid-gray.  The CSV holds
    the untouched 14x14 weights and round-trips exactly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grids = fwd.w.reshape(bag.num_patches, bag.rows, bag.cols)
    lo, hi = float(grids.min()), float(grids.max())
    span = hi - lo
    written = []
    for p in range(bag.num_patches):
        stem = f"{bag.patient_id}-patch{p:03d}"
        csv_path = out / f"{stem}.csv"
        csv_path.write_text("\n".join(
            ",".join(f"{v:.17g}" for v in row) for row in grids[p]) + "\n")
        normalized = (grids[p] - lo) / span if span > 0 else np.full_like(grids[p], 0.5)
        pgm_path = out / f"{stem}.pgm"
        _write_pgm(pgm_path, _bilinear_upsample(normalized, size))
        written.extend([csv_path, pgm_path])
    return written
