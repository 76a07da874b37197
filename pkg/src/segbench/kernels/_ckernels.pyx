# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel loops for evaluation and label preprocessing."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, int32_t, uint8_t

cnp.import_array()

ctypedef fused label_t:
    uint8_t
    int32_t
    int64_t

ctypedef fused pred_t:
    uint8_t
    int32_t
    int64_t


def confusion_update(int64_t[:, ::1] counts, const label_t[::1] labels, const pred_t[::1] preds,
                     int64_t ignore_index):
    cdef Py_ssize_t n = labels.shape[0], i
    cdef int64_t k = counts.shape[0], g, p
    if preds.shape[0] != n:
        raise ValueError("labels and predictions differ in size")
    with nogil:
        for i in range(n):
            g = <int64_t>labels[i]
            if g == ignore_index:
                continue
            p = <int64_t>preds[i]
            if g < 0 or g >= k or p < 0 or p >= k:
                with gil:
                    raise ValueError(
                        f"class id out of range [0, {k}): label={g} prediction={p} at pixel {i}")
            counts[g, p] += 1


def remap_labels(const label_t[:, ::1] raw, const int32_t[::1] lut, int32_t fill):
    cdef Py_ssize_t h = raw.shape[0], w = raw.shape[1], i, j
    cdef Py_ssize_t m = lut.shape[0]
    cdef int64_t v
    out = np.empty((h, w), dtype=np.int32)
    cdef int32_t[:, ::1] o = out
    with nogil:
        for i in range(h):
            for j in range(w):
                v = <int64_t>raw[i, j]
                o[i, j] = lut[v] if 0 <= v < m else fill
    return out


def resize_labels_nearest(const label_t[:, ::1] src, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t h = src.shape[0], w = src.shape[1], i, j
    out = np.empty((out_h, out_w), dtype=np.asarray(src).dtype)
    cdef label_t[:, ::1] o = out
    cdef Py_ssize_t[::1] cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    cdef Py_ssize_t si
    with nogil:
        for i in range(out_h):
            si = <Py_ssize_t>((i + 0.5) * h / out_h)
            if si >= h:
                si = h - 1
            for j in range(out_w):
                o[i, j] = src[si, cols[j]]
    return out
