"""Training losses: point classification, descriptor supervision, region
similarity between distinguishing points and their same-label neighbours,
and their weighted sum."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .geometry import PointCloud, knn_many

DESCRIPTOR_VARIANTS = ("full_bce", "paper_exact")
STRATEGIES = ("top_confidence", "random")


@dataclass
class LossBundle:
    cls: float
    des: float
    rs: float
    total: float
    lambdas: tuple[float, float, float]
    selected_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def cls_loss(refined: dc.Var, labels) -> dc.Var:
    """Mean cross entropy of the refined probabilities at the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(refined.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = dc.sum(refined * onehot, axis=1)
    return -dc.mean(dc.log(picked))


def descriptor_loss(predicted: dc.Var, truth, variant: str = "full_bce") -> dc.Var:
    """``paper_exact`` keeps only the positive term -sum g log g~, which the
    all-ones descriptor minimises; ``full_bce`` adds the negative term."""
    if variant not in DESCRIPTOR_VARIANTS:
        raise ValueError(f"unknown descriptor loss variant {variant!r}; expected one of {DESCRIPTOR_VARIANTS}")
    g = np.reshape(np.asarray(truth, dtype=np.float64), predicted.shape)
    pos = dc.sum(dc.log(predicted) * g)
    if variant == "paper_exact":
        return -pos
    neg = dc.sum(dc.log(1.0 - predicted) * (1.0 - g))
    return -(pos + neg)


def select_distinguishing(refined: np.ndarray, labels, M: int, strategy: str = "top_confidence",
                          rng: np.random.Generator | int | None = None) -> np.ndarray:
    """Pick ``M`` correctly classified points to act as feature sources.

    When fewer than ``M`` points are correct, the most confident one is
    repeated to fill up. No correct point at all gives an empty selection.
    """
    if M < 1:
        raise ValueError(f"M must be positive, got {M}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown selection strategy {strategy!r}; expected one of {STRATEGIES}")
    refined = np.asarray(refined)
    labels = np.asarray(labels, dtype=np.int64)
    correct = np.flatnonzero(refined.argmax(axis=1) == labels)
    if correct.size == 0:
        return np.zeros(0, dtype=np.int64)
    conf = refined[correct, labels[correct]]
    # stable sort on negated confidence: ties keep ascending index
    ranked = correct[np.argsort(-conf, kind="stable")]
    if correct.size < M:
        return np.concatenate([ranked, np.full(M - correct.size, ranked[0])]).astype(np.int64)
    if strategy == "top_confidence":
        return ranked[:M].astype(np.int64)
    rng = np.random.default_rng(rng)
    return rng.choice(correct, size=M, replace=False).astype(np.int64)


def region_similarity_loss(point_features: dc.Var, cloud: PointCloud, selected, k: int = 8,
                           eps: float = 1e-8, exact: bool = False,
                           freeze_centers: bool = False) -> dc.Var:
    """Negative cosine similarity between each selected feature and the
    features of its ``k`` nearest same-label neighbours.

    By default every neighbourhood is averaged over its own size and the
    result over the centres that have neighbours, so the value lies in
    [-1, 1]. ``exact=True`` sums each neighbourhood and divides by the
    selection size only.
    """
    graph = point_features.graph
    selected = np.asarray(selected, dtype=np.int64)
    if selected.size == 0:
        return graph.const(0.0)
    nbrs, counts = knn_many(cloud.coords, selected, k, cloud.labels)
    live = counts > 0
    if not live.any():
        return graph.const(0.0)
    center_rows = np.repeat(np.arange(selected.size), counts)
    nbr_idx = nbrs[nbrs >= 0]
    if exact:
        weights = np.full(nbr_idx.size, 1.0 / selected.size)
    else:
        weights = 1.0 / (live.sum() * counts[center_rows].astype(np.float64))

    source = dc.stop_gradient(point_features) if freeze_centers else point_features
    a = dc.gather_rows(source, selected[center_rows])
    b = dc.gather_rows(point_features, nbr_idx)
    dot = dc.sum(a * b, axis=1)
    denom = dc.clamp_min(dc.row_norm(a) * dc.row_norm(b), eps)
    cos = dot / denom
    return -dc.sum(cos * weights.reshape(-1, 1))


def total_loss(cls, des, rs, lam1: float = 1.0, lam2: float = 1.0, lam3: float = 1.0):
    """Weighted sum; terms given as None are left out."""
    for lam in (lam1, lam2, lam3):
        if lam < 0:
            raise ValueError("loss weights must be non-negative")
    total = 0.0
    for lam, term in ((lam1, cls), (lam2, des), (lam3, rs)):
        if term is not None and lam != 0:
            total = term * lam + total
    return total


def lambda3_schedule(epoch: int, total_epochs: int, base: float = 1.0, warm_frac: float = 0.3) -> float:
    """Linear ramp from 0 at epoch 0 to ``base`` at ceil(warm_frac * total_epochs)."""
    if not 0 < warm_frac <= 1:
        raise ValueError(f"warm_frac must lie in (0, 1], got {warm_frac}")
    warm_end = max(1, math.ceil(warm_frac * total_epochs))
    return base * min(1.0, epoch / warm_end)
