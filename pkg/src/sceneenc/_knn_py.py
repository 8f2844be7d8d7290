"""Pure numpy fallback for the brute-force KNN kernel."""
import numpy as np

_CHUNK = 256


def _select(coords, centers, k, labels):
    m = centers.shape[0]
    c = coords[centers]
    dx = coords[None, :, 0] - c[:, None, 0]
    dy = coords[None, :, 1] - c[:, None, 1]
    dz = coords[None, :, 2] - c[:, None, 2]
    d = dx * dx + dy * dy + dz * dz
    d[np.arange(m), centers] = np.inf
    if labels is not None:
        d[labels[None, :] != labels[centers][:, None]] = np.inf
    # stable sort keeps ascending index among equal distances
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    valid = np.isfinite(np.take_along_axis(d, order, axis=1))
    out = np.where(valid, order, -1).astype(np.int64)
    return out, valid.sum(axis=1).astype(np.int64)


def knn_batch(coords, centers, k, labels=None):
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
    if centers.shape[0] == 0:
        return np.full((0, k), -1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    parts = [_select(coords, centers[s:s + _CHUNK], k, labels)
             for s in range(0, centers.shape[0], _CHUNK)]
    out = np.concatenate([p[0] for p in parts])
    count = np.concatenate([p[1] for p in parts])
    if out.shape[1] < k:
        # fewer than k candidates in the whole cloud
        out = np.pad(out, ((0, 0), (0, k - out.shape[1])), constant_values=-1)
    return out, count
