import json
import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from segbench import labels as cs
from segbench.data import (
    DATA_ROOT_ENV,
    SynthShapes,
    class_histogram,
    export_cityscapes_layout,
    load_cityscapes,
)
from segbench.training import compute_class_weights

GOLDEN = Path(__file__).parent / "golden"


def test_synth_deterministic():
    a, b = SynthShapes(3, seed=11), SynthShapes(3, seed=11)
    for i in range(3):
        assert np.array_equal(a[i].image, b[i].image) and np.array_equal(a[i].label, b[i].label)
    # access order does not matter
    assert np.array_equal(SynthShapes(3, seed=11)[2].label, a[2].label)
    assert not np.array_equal(SynthShapes(3, seed=12)[0].label, a[0].label)


def test_synth_records_valid():
    ds = SynthShapes(10, (64, 128), 4, seed=1)
    for rec in ds:
        rec.validate(ds.num_classes, ds.ignore_index)
        assert rec.label.max() < 4 and rec.image.shape == (3, 64, 128)


def test_synth_hundred_images_all_classes():
    assert (class_histogram(SynthShapes(100, (64, 128), 5, seed=0)) > 0).all()


def test_synth_frozen_histogram():
    ref = json.loads((GOLDEN / "synth_seed7_hist.json").read_text())
    ds = SynthShapes(ref["num_images"], tuple(ref["resolution"]), ref["num_classes"], seed=ref["seed"])
    counts = np.asarray(ref["pixel_counts"])
    np.testing.assert_allclose(class_histogram(ds), counts / counts.sum(), rtol=0, atol=1e-12)


def test_synth_rejects_single_class():
    with pytest.raises(ValueError):
        SynthShapes(1, num_classes=1)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 8))
def test_histogram_weights_finite(seed, k):
    h = class_histogram(SynthShapes(2, (32, 32), k, seed=seed))
    assert h.sum() == pytest.approx(1.0)
    w = compute_class_weights(h)
    assert np.isfinite(w).all() and (w > 0).all()


class _Fixed:
    ignore_index = 9
    class_names = ("a", "b")
    num_classes = 2

    def __init__(self, labels):
        self.labels = labels

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        from segbench.data import SampleRecord
        lab = self.labels[i]
        return SampleRecord(np.zeros((3,) + lab.shape, np.float32), lab, str(i))


def test_histogram_simple_and_order_free():
    half = np.zeros((2, 4), int)
    half[1] = 1
    np.testing.assert_allclose(class_histogram(_Fixed([half])), [0.5, 0.5])
    labs = [np.array([[0, 1, 9]]), np.array([[1, 1, 1]])]
    assert np.array_equal(class_histogram(_Fixed(labs)), class_histogram(_Fixed(labs[::-1])))
    with pytest.raises(ValueError):
        class_histogram(_Fixed([np.full((2, 2), 9)]))


# -- Cityscapes layout ------------------------------------------------------------------

def test_label_table():
    lut = cs.raw_to_train_lut()
    assert lut[7] == 0 and lut[26] == 13 and lut[33] == 18
    assert lut[0] == cs.IGNORE_ID and lut[255] == cs.IGNORE_ID
    assert len(cs.train_class_names()) == 19
    inv = cs.train_to_raw()
    assert (lut[inv[:19]] == np.arange(19)).all()


def test_export_load_parity(tmp_path):
    ds = SynthShapes(3, (64, 128), 5, seed=4)
    export_cityscapes_layout(ds, tmp_path, "train")
    loaded = load_cityscapes(tmp_path, "train", (64, 128))
    assert len(loaded) == 3
    for i in range(3):
        assert np.array_equal(loaded[i].label, ds[i].label)
        assert np.abs(loaded[i].image - ds[i].image).max() <= 0.5 / 255 + 1e-6
        loaded[i].validate(loaded.num_classes, loaded.ignore_index)


def test_env_var_root(tmp_path, monkeypatch):
    export_cityscapes_layout(SynthShapes(2, (32, 64), 3, seed=1), tmp_path, "val")
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert len(load_cityscapes(None, "val", (32, 64))) == 2
    monkeypatch.delenv(DATA_ROOT_ENV)
    with pytest.raises(FileNotFoundError):
        load_cityscapes(None, "val")


def test_void_only_label_becomes_ignore(tmp_path):
    img = tmp_path / "leftImg8bit" / "val" / "c"
    lbl = tmp_path / "gtFine" / "val" / "c"
    img.mkdir(parents=True)
    lbl.mkdir(parents=True)
    Image.fromarray(np.zeros((8, 16, 3), np.uint8)).save(img / "c_0_0_leftImg8bit.png")
    Image.fromarray(np.array([[0, 1, 2, 3] * 4] * 8, np.uint8)).save(lbl / "c_0_0_gtFine_labelIds.png")
    rec = load_cityscapes(tmp_path, "val", (4, 8))[0]
    assert (rec.label == cs.IGNORE_ID).all()


def test_resize_never_invents_ids(tmp_path):
    rng = np.random.default_rng(0)
    raw = rng.choice([7, 8, 26], size=(37, 53)).astype(np.uint8)
    img = tmp_path / "leftImg8bit" / "train" / "c"
    lbl = tmp_path / "gtFine" / "train" / "c"
    img.mkdir(parents=True)
    lbl.mkdir(parents=True)
    Image.fromarray(np.zeros((37, 53, 3), np.uint8)).save(img / "c_0_0_leftImg8bit.png")
    Image.fromarray(raw).save(lbl / "c_0_0_gtFine_labelIds.png")
    rec = load_cityscapes(tmp_path, "train", (64, 96))[0]
    assert set(np.unique(rec.label)) <= {0, 1, 13}


def test_loader_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cityscapes(tmp_path, "train")
    export_cityscapes_layout(SynthShapes(1, (32, 32), 2), tmp_path, "train")
    next((tmp_path / "gtFine" / "train").rglob("*.png")).unlink()
    with pytest.raises(ValueError):
        load_cityscapes(tmp_path, "train")
    with pytest.raises(ValueError):
        load_cityscapes(tmp_path, "test")


@pytest.mark.skipif(not os.environ.get(DATA_ROOT_ENV), reason="Cityscapes not installed")
def test_full_dataset_split_sizes():
    assert len(load_cityscapes(None, "train")) == 2975
    assert len(load_cityscapes(None, "val")) == 500
