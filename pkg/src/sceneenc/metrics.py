"""Segmentation and descriptor quality metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .geometry import knn_many


def confusion_matrix(truth, pred, n: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions."""
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    return np.bincount(truth * n + pred, minlength=n * n).reshape(n, n)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from truth and prediction."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, tp / union, np.nan)


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


@dataclass
class IoUReport:
    iou: np.ndarray
    miou: float
    mciou: float


def iou_report(conf, category_confs=None) -> IoUReport:
    """Per-class IoU, mIoU over the pooled matrix, and mcIoU.

    Classes with an empty union are left out of every mean. mcIoU is the
    mean over categories of the mIoU computed on each category's own pooled
    matrix (``category_confs``); without categories it equals mIoU.
    """
    iou = per_class_iou(conf)
    miou = _nanmean(iou)
    if category_confs:
        mciou = _nanmean([_nanmean(per_class_iou(c)) for c in category_confs])
    else:
        mciou = miou
    return IoUReport(iou, miou, mciou)


@dataclass
class DescriptorScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    micro_precision: float
    micro_recall: float
    micro_f1: float


def _prf(tp, fp, fn):
    tp, fp, fn = (np.asarray(v, dtype=np.float64) for v in (tp, fp, fn))
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        r = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return p, r, f


def descriptor_f1(predicted, truth, threshold: float = 0.5) -> DescriptorScores:
    """Multi-label precision/recall/F1 per class and micro-averaged."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    pred = np.atleast_2d(np.asarray(predicted)) >= threshold
    truth = np.atleast_2d(np.asarray(truth)) > 0.5
    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    p, r, f = _prf(tp, fp, fn)
    mp, mr, mf = _prf(tp.sum(), fp.sum(), fn.sum())
    return DescriptorScores(p, r, f, float(mp), float(mr), float(mf))


def noise_flags(coords, pred, k: int = 8) -> np.ndarray:
    """True where a point's label loses the majority vote of its k nearest
    neighbours. A point whose label ties for the majority is not noisy."""
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    pred = np.asarray(pred, dtype=np.int64)
    n = pred.size
    k = min(k, n - 1)
    if k < 1:
        return np.zeros(n, dtype=bool)
    nbrs, _ = knn_many(coords, np.arange(n), k)
    votes = pred[nbrs]
    own = (votes == pred[:, None]).sum(axis=1)
    n_labels = int(pred.max()) + 1
    counts = np.zeros((n, n_labels), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(n), k), votes.ravel()), 1)
    return own < counts.max(axis=1)


def noise_score(coords, pred, k: int = 8) -> float:
    return float(noise_flags(coords, pred, k).mean())


def metrics_csv(report: IoUReport, class_names, summary: dict) -> str:
    """One row per class, then ``summary`` key/value rows."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "name", "value"])
    for c, name in enumerate(class_names):
        v = report.iou[c]
        w.writerow(["class_iou", name, "" if np.isnan(v) else repr(float(v))])
    for key in ("miou", "mciou"):
        w.writerow(["summary", key, repr(getattr(report, key))])
    for key, value in summary.items():
        if isinstance(value, float):
            value = repr(value)
        w.writerow(["summary", key, "" if value is None else value])
    return buf.getvalue()
