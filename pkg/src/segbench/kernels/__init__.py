"""Per-pixel hot loops with a compiled core and a numpy fallback.

The compiled extension is used when it imports; setting ``SEGBENCH_PURE_PYTHON=1``
forces the fallback.  ``BACKEND`` names the active implementation.
"""
from __future__ import annotations

import os

import numpy as np

from . import _fallback

_compiled = None
if os.environ.get("SEGBENCH_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "compiled" if _compiled is not None else "python"

_LABEL_DTYPES = (np.uint8, np.int32, np.int64)


def _label_array(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.type not in _LABEL_DTYPES:
        a = a.astype(np.int64)
    return a


def backends() -> dict:
    """Available implementations by name (for benchmarking and parity tests)."""
    out = {"python": _fallback}
    if _compiled is not None:
        out["compiled"] = _compiled
    return out


def confusion_update(counts: np.ndarray, labels, preds, ignore_index: int, impl=None) -> None:
    """Add one ``counts[label, pred]`` per non-ignored pixel, in place."""
    impl = impl or _compiled or _fallback
    labels = _label_array(np.asarray(labels).reshape(-1))
    preds = _label_array(np.asarray(preds).reshape(-1))
    impl.confusion_update(counts, labels, preds, int(ignore_index))


def remap_labels(raw, lut: np.ndarray, fill: int, impl=None) -> np.ndarray:
    """Look every pixel up in ``lut``; ids outside the table become ``fill``."""
    impl = impl or _compiled or _fallback
    return impl.remap_labels(_label_array(raw), np.ascontiguousarray(lut, dtype=np.int32), int(fill))


def resize_labels_nearest(labels, out_h: int, out_w: int, impl=None) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel centres; never invents ids."""
    impl = impl or _compiled or _fallback
    return impl.resize_labels_nearest(_label_array(labels), int(out_h), int(out_w))
