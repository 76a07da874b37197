import csv
import io
from pathlib import Path

import pytest

from segbench import cli
from segbench.cli import ExperimentConfig, analyze_table, main, time_model
from segbench.cost import CONVENTION
from segbench.data import SynthShapes, export_cityscapes_layout
from segbench.decoders import build_model
from segbench.labels import TABLE1_CLASSES, train_class_names

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def rows(path):
    return list(csv.DictReader(io.StringIO(Path(path).read_text())))


def write_cfg(path, text):
    path.write_text(text)
    return path


def test_analyze_full_grid(tmp_path):
    assert main(["analyze", "--resolution", "360x640", "--out", str(tmp_path / "a")]) == 0
    table = rows(tmp_path / "a" / "analyze.csv")
    assert len(table) == 13
    g = [float(r["gflops"]) for r in table]
    assert g == sorted(g)
    assert table[0]["model"] == "skipnet-shufflenet"
    assert {r["convention"] for r in table} == {CONVENTION}
    assert all(r["version"] for r in table)
    md = (tmp_path / "a" / "analyze.md").read_text()
    assert md.index("| Model | GFLOPs | Class IoU | Class iIoU | Category IoU | Category iIoU") > 0
    # rerun: byte-identical
    assert main(["analyze", "--resolution", "360x640", "--out", str(tmp_path / "b")]) == 0
    for name in ("analyze.csv", "analyze.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_analyze_ordering_with_externals(tmp_path):
    cfg = write_cfg(tmp_path / "c.ini", "[analyze]\nencoders = shufflenet, mobilenet\n"
                    "decoders = skipnet\nreferences = segnet\nexternals = enet, deeplab\n")
    assert main(["analyze", "--config", str(cfg), "--resolution", "360x640", "--out", str(tmp_path)]) == 0
    order = [r["model"] for r in rows(tmp_path / "analyze.csv")]
    assert order == ["skipnet-shufflenet", "enet", "skipnet-mobilenet", "segnet", "deeplab"]


def test_table3_config(tmp_path):
    assert main(["analyze", "--config", str(CONFIGS / "table3.ini"), "--out", str(tmp_path)]) == 0
    assert len(rows(tmp_path / "analyze.csv")) == 15


def test_unknown_names_exit_nonzero(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.ini", "[analyze]\nencoders = mobilenet, squeezenet\n")
    assert main(["analyze", "--config", str(cfg), "--out", str(tmp_path)]) != 0
    assert "squeezenet" in capsys.readouterr().err
    cfg = write_cfg(tmp_path / "d.ini", "[model]\ndecoder = pspnet\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) != 0
    assert "pspnet" in capsys.readouterr().err
    assert main(["analyze", "--resolution", "big", "--out", str(tmp_path)]) != 0


def test_grid_records_build_failures(monkeypatch):
    real = cli.build_model

    def flaky(enc, dec, *a, **kw):
        if (enc, dec) == ("resnet18", "unet"):
            raise RuntimeError("boom")
        return real(enc, dec, *a, **kw)

    monkeypatch.setattr(cli, "build_model", flaky)
    cfg = ExperimentConfig(resolution=(64, 128))
    table = analyze_table(cfg)
    assert "unet-resnet18" not in table.model_ids and len(table.rows) == 12
    assert table.failures[0][0] == "unet-resnet18" and "boom" in table.failures[0][1]
    assert "build failed" in cli.table_csv(table, "v")


def _small_train_cfg(tmp_path, steps, extra=""):
    return write_cfg(tmp_path / "t.ini", f"""
[model]
encoder = mobilenet
decoder = skipnet
width_multiplier = 0.25
[data]
dataset = synthetic
num_images = 4
num_classes = 3
resolution = 64x64
eval_split = train
{extra}
[optim]
batch_size = 2
steps = {steps}
""")


def test_train_resume_and_determinism(tmp_path):
    cfg = str(_small_train_cfg(tmp_path, 6))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "straight")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert main(["train", "--config", cfg, "--steps", "4", "--out", str(tmp_path / "first")]) == 0
    assert main(["train", "--config", cfg, "--steps", "2", "--resume", str(tmp_path / "first" / "checkpoint"),
                 "--out", str(tmp_path / "resumed")]) == 0
    straight = rows(tmp_path / "straight" / "loss.csv")
    resumed = rows(tmp_path / "resumed" / "loss.csv")
    assert [r["step"] for r in straight] == [r["step"] for r in resumed] == [str(i) for i in range(6)]
    for a, b in zip(straight, resumed):
        assert float(a["loss"]) == pytest.approx(float(b["loss"]), rel=1e-6)
    assert (tmp_path / "straight" / "loss.csv").read_bytes() == (tmp_path / "again" / "loss.csv").read_bytes()
    assert (tmp_path / "straight" / "checkpoint" / "manifest.json").is_file()


def test_eval_checkpoint_mismatch(tmp_path, capsys):
    cfg = _small_train_cfg(tmp_path, 1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    other = write_cfg(tmp_path / "o.ini", cfg.read_text().replace("decoder = skipnet", "decoder = unet"))
    code = main(["eval", "--config", str(other), "--checkpoint", str(tmp_path / "r" / "checkpoint"),
                 "--out", str(tmp_path / "e")])
    assert code != 0 and "mismatch" in capsys.readouterr().err


def test_eval_cityscapes_layout_report(tmp_path, monkeypatch):
    export_cityscapes_layout(SynthShapes(2, (64, 64), 5, seed=3), tmp_path / "cs", "val")
    monkeypatch.setenv("SEGBENCH_DATA_ROOT", str(tmp_path / "cs"))
    cfg = write_cfg(tmp_path / "c.ini", "[model]\nencoder = shufflenet\ndecoder = skipnet\n"
                    "[data]\ndataset = cityscapes\nresolution = 64x64\n")
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "e")]) == 0
    table = rows(tmp_path / "e" / "metrics.csv")
    assert len(table) == 1
    cols = list(table[0])
    assert cols[:2] == ["model", "mIoU"] and cols[2:11] == list(TABLE1_CLASSES)
    assert set(cols[2:21]) == set(train_class_names())
    assert table[0]["model"] == "skipnet-shufflenet"


def test_untrained_miou_near_chance(tmp_path):
    cfg = ExperimentConfig.from_file(CONFIGS / "overfit.ini")
    _, report = cli.evaluate(cfg, None)
    k = cfg.synth_classes
    assert 1 / (3 * k) <= report.miou <= 3 / k


@pytest.mark.slow
def test_overfit_config_then_eval(tmp_path):
    cfg = str(CONFIGS / "overfit.ini")
    assert main(["train", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "checkpoint" / "manifest.json").is_file()
    losses = [float(r["loss"]) for r in rows(tmp_path / "loss.csv")]
    assert len(losses) == 300 and losses[-1] < losses[0]
    assert main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "checkpoint"),
                 "--out", str(tmp_path / "eval")]) == 0
    assert float(rows(tmp_path / "eval" / "metrics.csv")[0]["mIoU"]) > 90.0


def test_benchmark(tmp_path):
    cfg = write_cfg(tmp_path / "b.ini", "[model]\nencoder = mobilenet\ndecoder = skipnet\nwidth_multiplier = 0.25\n"
                    "[benchmark]\nruns = 10\nwarmup = 2\n")
    assert main(["benchmark", "--config", str(cfg), "--resolution", "64x128", "--out", str(tmp_path)]) == 0
    samples = rows(tmp_path / "benchmark.csv")
    assert len(samples) == 10
    assert "hardware-dependent" in (tmp_path / "benchmark.md").read_text().lower()


def test_timing_report_arithmetic_and_monotone():
    model = build_model("mobilenet", "skipnet", encoder_kwargs={"width_multiplier": 0.25})
    small = time_model(model, (128, 128), runs=5, warmup=1)
    big = time_model(model, (256, 256), runs=5, warmup=1)
    assert len(small.samples_ms) == 5
    assert small.fps == pytest.approx(1000.0 / small.mean_ms)
    assert min(big.samples_ms) >= min(small.samples_ms)
