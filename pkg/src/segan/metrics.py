"""Masked seven-metric evaluation: Se, Sp, Pr, Acc, G-mean, F1, AUC.

Counts and scores only consider pixels inside the field-of-view mask. Any
metric whose denominator is zero is reported as absent (None), never NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .tensor import ShapeError, Tensor


class EmptyMaskError(ValueError):
    """The mask selects no pixels, so no counts can be formed."""


class DegenerateClassError(ValueError):
    """ROC needs at least one positive and one negative ground-truth pixel."""


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass
class MetricsReport:
    se: Optional[float] = None
    sp: Optional[float] = None
    pr: Optional[float] = None
    acc: Optional[float] = None
    g: Optional[float] = None
    f1: Optional[float] = None
    auc: Optional[float] = None

    FIELDS = ("se", "sp", "pr", "acc", "g", "f1", "auc")

    def lines(self, prefix: str = "") -> list[str]:
        out = []
        for name in self.FIELDS:
            v = getattr(self, name)
            out.append(f"{prefix}{name}=" + ("NA" if v is None else f"{v:.6f}"))
        return out


@dataclass
class RocCurve:
    """Threshold-sweep staircase from (0, 0) to (1, 1), ties grouped."""

    points: list[tuple[float, float]]


def confusion(pred_binary: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> ConfusionCounts:
    """Count agreement over in-mask pixels; predictions and gt must be binary."""
    pred_binary = np.asarray(pred_binary)
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    if pred_binary.shape != gt.shape or pred_binary.shape != mask.shape:
        raise ShapeError(
            f"confusion: shapes differ, pred {pred_binary.shape} gt {gt.shape} "
            f"mask {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    p = pred_binary[mask] != 0
    t = gt[mask] != 0
    return ConfusionCounts(
        tp=int(np.count_nonzero(p & t)),
        fp=int(np.count_nonzero(p & ~t)),
        tn=int(np.count_nonzero(~p & ~t)),
        fn=int(np.count_nonzero(~p & t)),
    )


def _ratio(num: int, den: int) -> Optional[float]:
    return None if den == 0 else num / den


def compute_metrics(c: ConfusionCounts) -> MetricsReport:
    """Six threshold metrics from the counts (AUC comes from roc_auc)."""
    se = _ratio(c.tp, c.tp + c.fn)
    sp = _ratio(c.tn, c.tn + c.fp)
    pr = _ratio(c.tp, c.tp + c.fp)
    acc = _ratio(c.tp + c.tn, c.total)
    g = math.sqrt(se * sp) if se is not None and sp is not None else None
    f1 = None
    if pr is not None and se is not None and pr + se > 0:
        f1 = 2.0 * pr * se / (pr + se)
    return MetricsReport(se=se, sp=sp, pr=pr, acc=acc, g=g, f1=f1)


def roc_auc(probs: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> tuple[RocCurve, float]:
    """Exact threshold sweep with tied scores grouped into single steps;
    trapezoidal area equals P(score_pos > score_neg) + 0.5 * P(equal)."""
    probs = np.asarray(probs, dtype=np.float64)
    gt = np.asarray(gt)
    mask = np.asarray(mask, dtype=bool)
    if probs.shape != gt.shape or probs.shape != mask.shape:
        raise ShapeError(
            f"roc_auc: shapes differ, probs {probs.shape} gt {gt.shape} mask {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    scores = probs[mask]
    labels = gt[mask] != 0
    npos = int(np.count_nonzero(labels))
    nneg = labels.size - npos
    if npos == 0 or nneg == 0:
        raise DegenerateClassError(
            f"ROC needs both classes in-mask, got {npos} positives / {nneg} negatives")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # group equal scores: cumulative counts at the last index of each group
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.concatenate([boundaries, [scores.size - 1]])
    cum_tp = np.cumsum(sorted_labels)[ends]
    cum_fp = (ends + 1) - cum_tp
    tpr = np.concatenate([[0.0], cum_tp / npos])
    fpr = np.concatenate([[0.0], cum_fp / nneg])
    auc = float(np.trapezoid(tpr, fpr))
    curve = RocCurve(points=list(zip(fpr.tolist(), tpr.tolist())))
    return curve, auc


def otsu_threshold(probs: np.ndarray, mask: np.ndarray) -> float:
    """Smallest 256-bin threshold maximizing between-class variance.

    Values are quantized with the same round-half-up rule as 8-bit images;
    binarize with `value > threshold`, which reproduces the bin split.
    """
    probs = np.asarray(probs, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if probs.shape != mask.shape:
        raise ShapeError(f"otsu: shapes differ, probs {probs.shape} mask {mask.shape}")
    if not mask.any():
        raise EmptyMaskError("mask selects no pixels")
    q = np.floor(np.clip(probs[mask], 0.0, 1.0) * 255.0 + 0.5).astype(np.int64)
    hist = np.bincount(q, minlength=256).astype(np.float64)
    total = hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    sum0 = np.cumsum(hist * levels)
    w1 = total - w0
    mean_total = sum0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (mean_total - sum0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = 0.0
    cut = int(np.argmax(between))  # argmax returns the smallest maximizing index
    return (cut + 0.5) / 255.0


def binarize(probs: np.ndarray, threshold: float) -> np.ndarray:
    return probs > threshold


def evaluate_arrays(probs: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> MetricsReport:
    """Metrics for one in-memory prediction: Otsu-binarize then count."""
    counts = confusion(binarize(probs, otsu_threshold(probs, mask)), gt, mask)
    report = compute_metrics(counts)
    try:
        _, report.auc = roc_auc(probs, gt, mask)
    except DegenerateClassError:
        report.auc = None
    return report


def evaluate(g, dataset: Sequence[D.Sample], at_original_size: bool = True,
             verbose: bool = False, workers: int = 1):
    """Run the generator over a dataset and pool masked metrics.

    Per image: pad to a multiple of 16, forward in eval mode, unpad, Otsu
    binarize, accumulate confusion counts; ROC scores are pooled across the
    whole set. Returns the pooled report, or (pooled, per_image_reports) when
    verbose is set.
    """
    if not len(dataset):
        raise ValueError("evaluate: empty dataset")
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            pieces = list(pool.map(_eval_one, ((g, s, at_original_size) for s in dataset)))
    else:
        pieces = [_eval_one((g, s, at_original_size)) for s in dataset]

    totals = ConfusionCounts()
    all_scores, all_labels = [], []
    per_image = []
    for counts, scores, labels in pieces:
        totals = totals + counts
        all_scores.append(scores)
        all_labels.append(labels)
        report = compute_metrics(counts)
        try:
            _, report.auc = _auc_flat(scores, labels)
        except DegenerateClassError:
            report.auc = None
        per_image.append(report)

    pooled = compute_metrics(totals)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    try:
        _, pooled.auc = _auc_flat(scores, labels)
    except DegenerateClassError:
        pooled.auc = None
    if verbose:
        return pooled, per_image
    return pooled


def macro_average(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean over per-image reports, skipping absent entries."""
    out = MetricsReport()
    for name in MetricsReport.FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        setattr(out, name, sum(vals) / len(vals) if vals else None)
    return out


def _auc_flat(scores: np.ndarray, labels: np.ndarray):
    shape = scores.shape
    return roc_auc(scores, labels.astype(np.float64),
                   np.ones(shape, dtype=bool))


def _eval_one(job):
    g, sample, at_original_size = job
    probs = predict_probabilities(g, sample.image)
    gt_plane = sample.gt.pixels[0]
    mask_plane = sample.mask.mask
    if not at_original_size:
        padded_gt, _ = D.pad_to(gt_plane, _pad_w(sample), _pad_h(sample))
        padded_mask, _ = D.pad_to(mask_plane, _pad_w(sample), _pad_h(sample))
        padded_probs, _ = D.pad_to(probs, _pad_w(sample), _pad_h(sample))
        probs, gt_plane, mask_plane = padded_probs, padded_gt, padded_mask
    counts = confusion(binarize(probs, otsu_threshold(probs, mask_plane)), gt_plane, mask_plane)
    return counts, probs[mask_plane], gt_plane[mask_plane] != 0


def _pad_w(sample: D.Sample) -> int:
    return D.next_multiple_of_16(sample.image.width)


def _pad_h(sample: D.Sample) -> int:
    return D.next_multiple_of_16(sample.image.height)


def predict_probabilities(g, image: D.Image) -> np.ndarray:
    """Pad, forward the generator in eval mode, unpad; returns an (H, W) map."""
    target_w = D.next_multiple_of_16(image.width)
    target_h = D.next_multiple_of_16(image.height)
    padded, record = D.pad_to(image.pixels, target_w, target_h)
    out = g.forward(Tensor(padded[None]), mode="eval")
    return unpad_probs(out.data[0, 0], record)


def unpad_probs(plane: np.ndarray, record: D.PadRecord) -> np.ndarray:
    return D.unpad(plane, record)
