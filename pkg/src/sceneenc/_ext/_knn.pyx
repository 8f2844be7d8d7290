# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Brute-force k-nearest-neighbour selection, compiled.

Squared distances are accumulated as dx*dx + dy*dy + dz*dz, in that order,
to match the numpy fallback bit for bit.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def knn_batch(const double[:, ::1] coords, const cnp.int64_t[::1] centers, Py_ssize_t k,
              const cnp.int64_t[::1] labels=None):
    cdef Py_ssize_t n = coords.shape[0]
    cdef Py_ssize_t m = centers.shape[0]
    out_np = np.full((m, k), -1, dtype=np.int64)
    count_np = np.zeros(m, dtype=np.int64)
    buf_np = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] out = out_np
    cdef cnp.int64_t[::1] count = count_np
    cdef double[::1] best = buf_np
    cdef Py_ssize_t i, j, pos, filled
    cdef cnp.int64_t c, lab
    cdef double cx, cy, cz, dx, dy, dz, d
    cdef bint use_labels = labels is not None

    for i in range(m):
        c = centers[i]
        cx = coords[c, 0]
        cy = coords[c, 1]
        cz = coords[c, 2]
        if use_labels:
            lab = labels[c]
        filled = 0
        for j in range(n):
            if j == c:
                continue
            if use_labels and labels[j] != lab:
                continue
            dx = coords[j, 0] - cx
            dy = coords[j, 1] - cy
            dz = coords[j, 2] - cz
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= best[k - 1]:
                # equal distance loses to the earlier (lower) index already held
                continue
            pos = filled if filled < k else k - 1
            while pos > 0 and best[pos - 1] > d:
                if pos < k:
                    best[pos] = best[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                pos -= 1
            best[pos] = d
            out[i, pos] = j
            if filled < k:
                filled += 1
        count[i] = filled
    return out_np, count_np
