"""Dataset adapters: Cityscapes directory ingestion and a synthetic shapes set."""
from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Protocol, Sequence

import numpy as np
from PIL import Image

from . import kernels, labels as cs

__all__ = [
    "SampleRecord",
    "DatasetAdapter",
    "SynthShapes",
    "CityscapesDataset",
    "synth_shapes",
    "load_cityscapes",
    "class_histogram",
    "export_cityscapes_layout",
    "IMAGE_MEAN",
    "DATA_ROOT_ENV",
]

# subtracted from [0,1] images before they enter a network
IMAGE_MEAN = (0.485, 0.456, 0.406)
DATA_ROOT_ENV = "SEGBENCH_DATA_ROOT"
SYNTH_IGNORE = 255


@dataclass(frozen=True)
class SampleRecord:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) int64
    source_id: str

    def validate(self, num_classes: int, ignore_index: int) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"{self.source_id}: image must be (3,H,W), got {self.image.shape}")
        if self.label.shape != self.image.shape[1:]:
            raise ValueError(f"{self.source_id}: label {self.label.shape} vs image {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"{self.source_id}: image values outside [0, 1]")
        ok = (self.label == ignore_index) | ((self.label >= 0) & (self.label < num_classes))
        if not ok.all():
            raise ValueError(f"{self.source_id}: label ids outside [0, {num_classes}) + ignore")


class DatasetAdapter(Protocol):
    num_classes: int  # evaluated classes
    ignore_index: int
    class_names: tuple[str, ...]

    def __len__(self) -> int: ...

    def __getitem__(self, i: int) -> SampleRecord: ...


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

class SynthShapes:
    """Background (class 0) plus 3-6 rectangles and discs of classes 1..K-1.

    Each class has a fixed colour; images add Gaussian noise.  Sample ``i`` is
    drawn from its own seeded stream, so samples are independent of access order.
    """

    ignore_index = SYNTH_IGNORE

    def __init__(self, num_images: int, resolution: tuple[int, int] = (64, 128),
                 num_classes: int = 5, seed: int = 0, noise: float = 0.04,
                 size_range: tuple[float, float] = (0.25, 0.5)):
        if num_classes < 2:
            raise ValueError("synthetic dataset needs at least 2 classes")
        if num_images < 1:
            raise ValueError("num_images must be >= 1")
        self.num_images = num_images
        self.resolution = tuple(resolution)
        self.num_classes = num_classes
        self.seed = seed
        self.noise = noise
        # shape extent as a fraction of image height
        self.size_range = size_range
        self.class_names = tuple(f"class_{i}" for i in range(num_classes))
        rng = np.random.default_rng([seed, 0x5EED])
        # evenly spaced hues, rotated per seed, alternating brightness
        offset = rng.random()
        self.palette = np.array(
            [colorsys.hsv_to_rgb((offset + i / num_classes) % 1.0, 0.8, 0.9 if i % 2 else 0.6)
             for i in range(num_classes)], dtype=np.float32)

    def __len__(self):
        return self.num_images

    def __iter__(self) -> Iterator[SampleRecord]:
        return (self[i] for i in range(len(self)))

    def __getitem__(self, i: int) -> SampleRecord:
        if not 0 <= i < self.num_images:
            raise IndexError(i)
        h, w = self.resolution
        rng = np.random.default_rng([self.seed, i])
        label = np.zeros((h, w), dtype=np.int64)
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(rng.integers(3, 7)):
            cls = int(rng.integers(1, self.num_classes))
            lo, hi = int(h * self.size_range[0]), int(h * self.size_range[1])
            sh = int(rng.integers(lo, hi + 1))
            sw = int(rng.integers(lo, hi + 1))
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            if rng.random() < 0.5:
                mask = (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
            else:
                cy, cx, r = top + sh / 2, left + sw / 2, min(sh, sw) / 2
                mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r
            label[mask] = cls
        image = self.palette[label].transpose(2, 0, 1)
        image = image + rng.normal(0, self.noise, size=image.shape).astype(np.float32)
        image = np.clip(image, 0, 1).astype(np.float32)
        return SampleRecord(image, label, f"synth-{self.seed}-{i:05d}")


def synth_shapes(num_images: int, resolution=(64, 128), num_classes: int = 5, seed: int = 0) -> SynthShapes:
    return SynthShapes(num_images, resolution, num_classes, seed)


# ---------------------------------------------------------------------------
# Cityscapes
# ---------------------------------------------------------------------------

class CityscapesDataset:
    """Lazy reader over ``leftImg8bit/<split>`` and ``gtFine/<split>``.

    Images are bilinearly resized to ``resolution``; labels are remapped to
    train ids (void -> ignore) and resized nearest-neighbour.
    """

    num_classes = cs.NUM_EVAL_CLASSES
    ignore_index = cs.IGNORE_ID

    def __init__(self, pairs: Sequence[tuple[Path, Path]], resolution: tuple[int, int] | None):
        self.pairs = list(pairs)
        self.resolution = resolution
        self.class_names = cs.train_class_names()
        self._lut = cs.raw_to_train_lut()

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def __getitem__(self, i: int) -> SampleRecord:
        img_path, lbl_path = self.pairs[i]
        with Image.open(img_path) as im:
            im = im.convert("RGB")
            if self.resolution is not None and im.size != (self.resolution[1], self.resolution[0]):
                im = im.resize((self.resolution[1], self.resolution[0]), Image.BILINEAR)
            image = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
        with Image.open(lbl_path) as lb:
            raw = np.asarray(lb)
        label = kernels.remap_labels(raw, self._lut, cs.IGNORE_ID)
        if self.resolution is not None and label.shape != tuple(self.resolution):
            label = kernels.resize_labels_nearest(label, *self.resolution)
        stem = img_path.name[: -len("_leftImg8bit.png")]
        return SampleRecord(np.ascontiguousarray(image), label.astype(np.int64), stem)


def load_cityscapes(root: str | os.PathLike | None, split: str = "train",
                    resolution: tuple[int, int] | None = (512, 1024)) -> CityscapesDataset:
    """Pair every ``*_leftImg8bit.png`` with its ``*_gtFine_labelIds.png`` (sorted)."""
    if split not in ("train", "val"):
        raise ValueError(f"split must be 'train' or 'val', got {split!r}")
    if root is None:
        root = os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise FileNotFoundError(f"no Cityscapes root given and ${DATA_ROOT_ENV} unset")
    root = Path(root)
    img_dir, lbl_dir = root / "leftImg8bit" / split, root / "gtFine" / split
    for d in (img_dir, lbl_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    pairs = []
    for img in sorted(img_dir.glob("*/*_leftImg8bit.png")):
        stem = img.name[: -len("_leftImg8bit.png")]
        lbl = lbl_dir / img.parent.name / f"{stem}_gtFine_labelIds.png"
        if not lbl.is_file():
            raise ValueError(f"no label file for {img} (expected {lbl})")
        pairs.append((img, lbl))
    n_labels = len(list(lbl_dir.glob("*/*_gtFine_labelIds.png")))
    if n_labels != len(pairs):
        raise ValueError(f"{n_labels} label files but {len(pairs)} images in {split}")
    return CityscapesDataset(pairs, resolution)


def export_cityscapes_layout(dataset: DatasetAdapter, root: str | os.PathLike, split: str = "train",
                             city: str = "synth") -> Path:
    """Write ``dataset`` in the Cityscapes layout (train ids mapped back to raw ids)."""
    root = Path(root)
    img_dir = root / "leftImg8bit" / split / city
    lbl_dir = root / "gtFine" / split / city
    img_dir.mkdir(parents=True, exist_ok=True)
    lbl_dir.mkdir(parents=True, exist_ok=True)
    inv = cs.train_to_raw()
    for i in range(len(dataset)):
        rec = dataset[i]
        stem = f"{city}_{i:06d}_000019"
        rgb = np.round(rec.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(rgb).save(img_dir / f"{stem}_leftImg8bit.png")
        lab = np.where(rec.label == dataset.ignore_index, cs.IGNORE_ID, rec.label)
        if lab.max() > cs.IGNORE_ID:
            raise ValueError("dataset has more classes than the Cityscapes table")
        Image.fromarray(inv[lab]).save(lbl_dir / f"{stem}_gtFine_labelIds.png")
    return root


def class_histogram(dataset: DatasetAdapter) -> np.ndarray:
    """Pixel frequency of each evaluated class over non-ignored pixels."""
    k = dataset.num_classes
    counts = np.zeros(k, dtype=np.int64)
    for i in range(len(dataset)):
        lab = dataset[i].label.reshape(-1)
        lab = lab[(lab != dataset.ignore_index) & (lab >= 0) & (lab < k)]
        counts += np.bincount(lab, minlength=k)
    total = counts.sum()
    if total == 0:
        raise ValueError("dataset has no non-ignored pixels")
    return counts / total
