"""Cityscapes label tables: raw id -> train id, train id -> category."""
from __future__ import annotations

import csv
from functools import lru_cache
from importlib import resources

import numpy as np

IGNORE_ID = 19
NUM_EVAL_CLASSES = 19
# classes shown in the published ablation table, in its column order
TABLE1_CLASSES = ("road", "sidewalk", "building", "traffic sign", "sky", "person", "car",
                  "bicycle", "truck")


@lru_cache(maxsize=None)
def _rows() -> tuple[tuple[int, str, int | None, str], ...]:
    text = resources.files("segbench").joinpath("data/cityscapes_labels.csv").read_text()
    rows = []
    for r in csv.DictReader(text.splitlines()):
        tid = None if r["train_id"] == "ignore" else int(r["train_id"])
        rows.append((int(r["raw_id"]), r["name"], tid, r["category"]))
    return tuple(rows)


def train_class_names() -> tuple[str, ...]:
    named = sorted((tid, name) for _, name, tid, _ in _rows() if tid is not None)
    return tuple(name for _, name in named)


def category_names() -> tuple[str, ...]:
    seen = []
    for _, _, tid, cat in _rows():
        if tid is not None and cat not in seen:
            seen.append(cat)
    return tuple(seen)


def train_to_category() -> tuple[int, ...]:
    cats = category_names()
    out = [0] * NUM_EVAL_CLASSES
    for _, _, tid, cat in _rows():
        if tid is not None:
            out[tid] = cats.index(cat)
    return tuple(out)


def raw_to_train_lut(size: int = 256) -> np.ndarray:
    """Lookup table over raw label ids; everything unmapped becomes IGNORE_ID."""
    lut = np.full(size, IGNORE_ID, dtype=np.int32)
    for raw, _, tid, _ in _rows():
        if tid is not None:
            lut[raw] = tid
    return lut


def train_to_raw() -> np.ndarray:
    """Inverse table (one raw id per train id, ignore -> 0 'unlabeled')."""
    out = np.zeros(NUM_EVAL_CLASSES + 1, dtype=np.uint8)
    for raw, _, tid, _ in _rows():
        if tid is not None:
            out[tid] = raw
    return out
