"""numpy implementations of the compiled kernels, used when the extension is absent."""
import numpy as np


def confusion_update(counts, labels, preds, ignore_index):
    k = counts.shape[0]
    labels = np.asarray(labels).astype(np.int64, copy=False)
    preds = np.asarray(preds).astype(np.int64, copy=False)
    if labels.shape != preds.shape:
        raise ValueError("labels and predictions differ in size")
    keep = labels != ignore_index
    g, p = labels[keep], preds[keep]
    bad = (g < 0) | (g >= k) | (p < 0) | (p >= k)
    if bad.any():
        i = int(np.flatnonzero(keep)[np.argmax(bad)])
        raise ValueError(f"class id out of range [0, {k}): label={labels[i]} prediction={preds[i]} at pixel {i}")
    counts += np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def remap_labels(raw, lut, fill):
    raw = np.asarray(raw).astype(np.int64, copy=False)
    ok = (raw >= 0) & (raw < lut.shape[0])
    return np.where(ok, lut[np.clip(raw, 0, lut.shape[0] - 1)], fill).astype(np.int32)


def resize_labels_nearest(src, out_h, out_w):
    h, w = src.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(np.intp), h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(np.intp), w - 1)
    return src[rows[:, None], cols[None, :]]
