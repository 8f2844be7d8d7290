"""Scene descriptors: ground truth from labels, the predicting head, and
probability refinement by the descriptor mask."""
from __future__ import annotations

import numpy as np

from . import diffcore as dc

DESC_CLAMP = 1e-7


def ground_truth_descriptor(labels, n: int) -> np.ndarray:
    """Multi-hot vector: 1 where a class occurs in ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("need at least one label")
    if labels.min() < 0 or labels.max() >= n:
        bad = labels[(labels < 0) | (labels >= n)][0]
        raise ValueError(f"label {int(bad)} out of range for {n} classes")
    g = np.zeros(n)
    g[np.unique(labels)] = 1.0
    return g


def scene_encoder_forward(global_feature: dc.Var, pv: dict[str, dc.Var], prefix: str = "des") -> dc.Var:
    """Global feature (1xG) -> predicted descriptor (1xn), each entry in (0, 1).

    Hidden layers are affine+ReLU; the output is an independent sigmoid per
    class, clamped away from 0 and 1 so that logs stay finite.
    """
    h = global_feature
    i = 0
    while f"{prefix}{i + 1}.W" in pv:
        h = dc.relu(h @ pv[f"{prefix}{i}.W"] + pv[f"{prefix}{i}.b"])
        i += 1
    z = h @ pv[f"{prefix}{i}.W"] + pv[f"{prefix}{i}.b"]
    return dc.clip(dc.sigmoid(z), DESC_CLAMP, 1.0 - DESC_CLAMP)


def refine_probabilities(probs, descriptor):
    """Mask class probabilities by the descriptor and renormalise each row.

    Accepts graph variables (returns a Var) or plain arrays (returns an array).
    The row denominator is floored at 1e-12.
    """
    if isinstance(probs, dc.Var):
        if not isinstance(descriptor, dc.Var):
            descriptor = probs.graph.const(np.reshape(descriptor, (1, -1)))
        masked = probs * descriptor
        return masked / dc.sum(masked, axis=1)
    g = dc.Graph()
    out = refine_probabilities(g.const(probs), g.const(np.reshape(descriptor, (1, -1))))
    return out.value


def binarize(descriptor: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(descriptor) >= threshold).astype(np.float64)
