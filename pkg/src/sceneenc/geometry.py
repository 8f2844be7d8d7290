"""Point clouds and brute-force neighbour queries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(eq=False)
class PointCloud:
    coords: np.ndarray
    labels: np.ndarray | None = None
    scene_type: str | None = None

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be Nx3 with N >= 1, got shape {self.coords.shape}")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.coords.shape[0],):
                raise ValueError(
                    f"labels must have length {self.coords.shape[0]}, got shape {self.labels.shape}")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative class ids")

    def __len__(self):
        return self.coords.shape[0]

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if self.scene_type != other.scene_type or not np.array_equal(self.coords, other.coords):
            return False
        if (self.labels is None) != (other.labels is None):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    def validate(self, n: int):
        if self.labels is not None and self.labels.size and self.labels.max() >= n:
            raise ValueError(f"label {int(self.labels.max())} out of range for {n} classes")

    def permuted(self, perm) -> PointCloud:
        perm = np.asarray(perm)
        labels = None if self.labels is None else self.labels[perm]
        return PointCloud(self.coords[perm], labels, self.scene_type)


def _check_center(cloud, center):
    if not 0 <= center < len(cloud):
        raise IndexError(f"center {center} outside cloud of {len(cloud)} points")


def knn(cloud: PointCloud, center: int, k: int) -> np.ndarray:
    """The ``k`` points nearest ``center`` (itself excluded), nearest first.

    Ties in distance go to the lower index.
    """
    n = len(cloud)
    if k < 1 or k > n - 1:
        raise ValueError(f"k must lie in [1, {n - 1}] for a cloud of {n} points, got {k}")
    _check_center(cloud, center)
    out, _ = kernels.knn_batch(cloud.coords, np.array([center], dtype=np.int64), k)
    return out[0]


def knn_same_label(cloud: PointCloud, center: int, k: int) -> np.ndarray:
    """Up to ``k`` nearest points carrying the center's label; may be empty."""
    if cloud.labels is None:
        raise ValueError("knn_same_label needs a labelled cloud")
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    _check_center(cloud, center)
    out, count = kernels.knn_batch(cloud.coords, np.array([center], dtype=np.int64), k, cloud.labels)
    return out[0, :count[0]]


def knn_many(coords: np.ndarray, centers, k: int, labels=None) -> tuple[np.ndarray, np.ndarray]:
    """Batched query. Returns an (m, k) index array padded with -1 and the
    number of valid entries per row."""
    centers = np.ascontiguousarray(centers, dtype=np.int64)
    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype=np.int64)
    return kernels.knn_batch(np.ascontiguousarray(coords, dtype=np.float64), centers, k, labels)
