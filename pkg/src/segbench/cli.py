"""Command-line front end: ``segbench {analyze,train,eval,benchmark}``.

Experiments are described by an INI-style file (``key = value`` under
``[section]`` headers); see ``configs/`` for examples.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import os
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .cost import EXTERNAL_REFERENCES, ComparisonTable, compare_models, network_cost
from .data import DATA_ROOT_ENV, SynthShapes, class_histogram, load_cityscapes
from .decoders import DECODERS, SegmentationModel, build_model
from .encoders import ENCODERS
from .evaluation import ConfusionMatrix, cityscapes_categories, iou_metrics
from .training import (
    LossConfig,
    OptimSpec,
    build_module,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

log = logging.getLogger("segbench")

MODEL_KEYS = ("encoder", "decoder", "num_classes", "width_multiplier", "groups")


class ConfigError(ValueError):
    pass


def parse_resolution(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"resolution must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise ConfigError(f"bad resolution {text!r}")
    return h, w


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


@dataclass
class ExperimentConfig:
    encoder: str = "mobilenet"
    decoder: str = "skipnet"
    num_classes: int = 20
    width_multiplier: float = 1.0
    groups: int = 3
    resolution: tuple[int, int] = (512, 1024)
    dataset: str = "synthetic"
    data_root: str | None = None
    train_split: str = "train"
    eval_split: str = "val"
    synth_images: int = 10
    synth_classes: int = 5
    data_seed: int = 7
    learning_rate: float = 1e-4
    l2_decay: float = 5e-4
    batch_size: int = 4
    steps: int = 300
    seed: int = 0
    # analyze
    encoders: list[str] = field(default_factory=lambda: list(ENCODERS))
    decoders: list[str] = field(default_factory=lambda: list(DECODERS))
    references: list[str] = field(default_factory=lambda: ["segnet"])
    externals: list[str] = field(default_factory=list)
    # benchmark
    runs: int = 10
    warmup: int = 2

    @classmethod
    def from_file(cls, path: str | os.PathLike | None) -> "ExperimentConfig":
        cfg = cls()
        if path is None:
            return cfg
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if not cp.read(path):
            raise ConfigError(f"cannot read config {path}")
        get = lambda sec, key: cp.get(sec, key) if cp.has_option(sec, key) else None
        conv = {int: int, float: float, str: str}
        spec = {
            ("model", "encoder"): ("encoder", str), ("model", "decoder"): ("decoder", str),
            ("model", "num_classes"): ("num_classes", int),
            ("model", "width_multiplier"): ("width_multiplier", float),
            ("model", "groups"): ("groups", int),
            ("data", "dataset"): ("dataset", str), ("data", "root"): ("data_root", str),
            ("data", "train_split"): ("train_split", str), ("data", "eval_split"): ("eval_split", str),
            ("data", "num_images"): ("synth_images", int), ("data", "num_classes"): ("synth_classes", int),
            ("data", "seed"): ("data_seed", int),
            ("optim", "learning_rate"): ("learning_rate", float), ("optim", "l2_decay"): ("l2_decay", float),
            ("optim", "batch_size"): ("batch_size", int), ("optim", "steps"): ("steps", int),
            ("optim", "seed"): ("seed", int),
            ("benchmark", "runs"): ("runs", int), ("benchmark", "warmup"): ("warmup", int),
        }
        for (sec, key), (attr, typ) in spec.items():
            v = get(sec, key)
            if v is not None:
                try:
                    setattr(cfg, attr, conv[typ](v))
                except ValueError:
                    raise ConfigError(f"[{sec}] {key} = {v!r} is not a valid {typ.__name__}") from None
        for sec in ("model", "data", "analyze"):
            v = get(sec, "resolution")
            if v is not None:
                cfg.resolution = parse_resolution(v)
        for key in ("encoders", "decoders", "references", "externals"):
            v = get("analyze", key)
            if v is not None:
                setattr(cfg, key, _names(v))
        return cfg

    def model_kwargs(self) -> dict:
        enc = {}
        if self.encoder == "mobilenet":
            enc["width_multiplier"] = self.width_multiplier
        elif self.encoder == "shufflenet":
            enc["groups"] = self.groups
        return enc

    def check_names(self) -> None:
        for e in [self.encoder, *self.encoders]:
            if e not in ENCODERS:
                raise ConfigError(f"unknown encoder {e!r}")
        for d in [self.decoder, *self.decoders]:
            if d not in DECODERS:
                raise ConfigError(f"unknown decoder {d!r}")
        for r in self.references:
            if r != "segnet":
                raise ConfigError(f"unknown reference model {r!r}")
        for x in self.externals:
            if x not in EXTERNAL_REFERENCES:
                raise ConfigError(f"unknown external reference {x!r}")


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _fmt(v, spec=".2f"):
    return "-" if v is None else format(v, spec)


def analyze_table(cfg: ExperimentConfig) -> ComparisonTable:
    h, w = cfg.resolution
    reports, failures = [], []
    jobs = [(e, d) for d in cfg.decoders for e in cfg.encoders]
    jobs += [("vgg16", "segnet") for r in cfg.references if r == "segnet"]
    for enc, dec in jobs:
        model_id = "segnet" if dec == "segnet" else f"{dec}-{enc}"
        try:
            kw = ExperimentConfig(encoder=enc, width_multiplier=cfg.width_multiplier,
                                  groups=cfg.groups).model_kwargs()
            model = build_model(enc, dec, cfg.num_classes, encoder_kwargs=kw)
            reports.append(network_cost(model.graph, (1, 3, h, w), model_id))
        except Exception as exc:  # recorded in the report, grid continues
            log.warning("skipping %s: %s", model_id, exc)
            failures.append((model_id, f"{type(exc).__name__}: {exc}"))
    externals = {name: EXTERNAL_REFERENCES[name] for name in cfg.externals}
    return compare_models(reports, externals, failures)


def table_csv(table: ComparisonTable, version: str) -> str:
    h, w = table.resolution
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["model", "gflops", "params", "ratio_to_smallest", "external", "resolution",
                 "convention", "version", "note"])
    for r in table.rows:
        wr.writerow([r.model_id, "" if r.gflops is None else f"{r.gflops:.4f}",
                     "" if r.params is None else r.params,
                     "" if r.ratio_to_smallest is None else f"{r.ratio_to_smallest:.4f}",
                     int(r.external), f"{h}x{w}", table.convention, version, r.note])
    for model_id, why in table.failures:
        wr.writerow([model_id, "", "", "", 0, f"{h}x{w}", table.convention, version,
                     f"build failed: {why}"])
    return buf.getvalue()


def table_markdown(table: ComparisonTable, version: str, accuracy: dict | None = None) -> str:
    h, w = table.resolution
    accuracy = accuracy or {}
    lines = [f"GFLOPs at {h}x{w}; {table.convention}; version {version}", "",
             "| Model | GFLOPs | Class IoU | Class iIoU | Category IoU | Category iIoU | Params (M) | x smallest |",
             "|---|---|---|---|---|---|---|---|"]
    for r in table.rows:
        acc = accuracy.get(r.model_id, {})
        name = r.model_id + (" (external)" if r.external else "")
        lines.append("| " + " | ".join([
            name, _fmt(r.gflops), _fmt(acc.get("miou")), "-", _fmt(acc.get("category_miou")), "-",
            _fmt(None if r.params is None else r.params / 1e6), _fmt(r.ratio_to_smallest, ".1f"),
        ]) + " |")
    for model_id, why in table.failures:
        lines.append(f"| {model_id} | build failed: {why} | - | - | - | - | - | - |")
    return "\n".join(lines) + "\n"


def cmd_analyze(cfg: ExperimentConfig, out: Path) -> int:
    table = analyze_table(cfg)
    version = version_string()
    out.mkdir(parents=True, exist_ok=True)
    (out / "analyze.csv").write_text(table_csv(table, version))
    (out / "analyze.md").write_text(table_markdown(table, version))
    print(table_markdown(table, version), end="")
    return 0


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

def make_dataset(cfg: ExperimentConfig, split: str):
    if cfg.dataset == "synthetic":
        # the val split is a disjoint stream of the same generator
        seed = cfg.data_seed if split == "train" else cfg.data_seed + 10_000
        return SynthShapes(cfg.synth_images, cfg.resolution, cfg.synth_classes, seed)
    if cfg.dataset == "cityscapes":
        root = cfg.data_root or os.environ.get(DATA_ROOT_ENV)
        return load_cityscapes(root, split, cfg.resolution)
    raise ConfigError(f"unknown dataset {cfg.dataset!r}")


def _model_for(cfg: ExperimentConfig, dataset) -> SegmentationModel:
    num_classes = dataset.num_classes if cfg.dataset == "synthetic" else cfg.num_classes
    return build_model(cfg.encoder, cfg.decoder, num_classes, encoder_kwargs=cfg.model_kwargs())


def _meta(cfg: ExperimentConfig, model: SegmentationModel) -> dict:
    return {"encoder": cfg.encoder, "decoder": cfg.decoder, "num_classes": model.num_classes,
            "width_multiplier": cfg.width_multiplier, "groups": cfg.groups,
            "version": version_string()}


def cmd_train(cfg: ExperimentConfig, out: Path, resume: Path | None = None) -> int:
    ds = make_dataset(cfg, cfg.train_split)
    model = _model_for(cfg, ds)
    loss = LossConfig.from_frequencies(class_histogram(ds), ds.ignore_index)
    optim = OptimSpec(learning_rate=cfg.learning_rate, l2_decay=cfg.l2_decay,
                      batch_size=cfg.batch_size, seed=cfg.seed)
    state = None
    if resume is not None:
        state, meta = load_checkpoint(resume)
        _check_meta(meta, _meta(cfg, model))
    log.info("training %s for %d steps", model.model_id, cfg.steps)
    state = train(model, ds, optim, loss, cfg.steps, state=state,
                  on_step=lambda s, v: log.debug("step %d loss %.5f", s, v))
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state, out / "checkpoint", _meta(cfg, model))
    with open(out / "loss.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["step", "loss"])
        for i, v in enumerate(state.loss_history):
            wr.writerow([i, repr(float(v))])
    print(f"{model.model_id}: {state.step} steps, loss {state.loss_history[0]:.4f} -> "
          f"{state.loss_history[-1]:.4f}; checkpoint at {out / 'checkpoint'}")
    return 0


def _check_meta(meta: dict, expected: dict) -> None:
    for k in MODEL_KEYS:
        if k in meta and meta[k] != expected[k]:
            raise ConfigError(f"checkpoint/model mismatch on {k}: checkpoint {meta[k]!r}, "
                              f"config {expected[k]!r}")


def evaluate(cfg: ExperimentConfig, checkpoint: Path | None):
    ds = make_dataset(cfg, cfg.eval_split)
    model = _model_for(cfg, ds)
    state = None
    if checkpoint is not None:
        state, meta = load_checkpoint(checkpoint)
        _check_meta(meta, _meta(cfg, model))
    module = build_module(model, state, seed=cfg.seed)
    cm = ConfusionMatrix(ds.num_classes)
    for i in range(len(ds)):
        rec = ds[i]
        pred = predict(module, [rec], ds.num_classes)[0]
        cm.update(pred, rec.label, ds.ignore_index)
    cats = cityscapes_categories() if cfg.dataset == "cityscapes" else None
    return model, iou_metrics(cm, cats, ds.class_names)


def cmd_eval(cfg: ExperimentConfig, out: Path, checkpoint: Path | None) -> int:
    model, report = evaluate(cfg, checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv(model.model_id))
    print(f"{model.model_id}: mIoU {100 * report.miou:.2f}  pixel acc {100 * report.pixel_accuracy:.2f}")
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TimingReport:
    model_id: str
    resolution: tuple[int, int]
    samples_ms: tuple[float, ...]

    @property
    def mean_ms(self) -> float:
        return statistics.fmean(self.samples_ms)

    @property
    def stdev_ms(self) -> float:
        return statistics.stdev(self.samples_ms) if len(self.samples_ms) > 1 else 0.0

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms


def time_model(model: SegmentationModel, resolution: tuple[int, int], runs: int = 10,
               warmup: int = 2, state=None) -> TimingReport:
    import torch

    module = build_module(model, state)
    module.eval()
    x = torch.zeros(1, 3, *resolution)
    samples = []
    with torch.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            module(x)
            dt = (time.perf_counter() - t0) * 1000
            if i >= warmup:
                samples.append(dt)
    return TimingReport(model.model_id, tuple(resolution), tuple(samples))


def cmd_benchmark(cfg: ExperimentConfig, out: Path, checkpoint: Path | None = None) -> int:
    model = build_model(cfg.encoder, cfg.decoder, cfg.num_classes, encoder_kwargs=cfg.model_kwargs())
    state = load_checkpoint(checkpoint)[0] if checkpoint is not None else None
    rep = time_model(model, cfg.resolution, cfg.runs, cfg.warmup, state)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "benchmark.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["model", "run", "ms"])
        for i, ms in enumerate(rep.samples_ms):
            wr.writerow([rep.model_id, i, f"{ms:.3f}"])
    h, w = rep.resolution
    text = (f"{rep.model_id} at {h}x{w}: {rep.mean_ms:.2f} +- {rep.stdev_ms:.2f} ms/frame, "
            f"{rep.fps:.2f} frames/s over {len(rep.samples_ms)} runs ({cfg.warmup} warmup excluded). "
            f"Hardware-dependent measurement.\n")
    (out / "benchmark.md").write_text(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segbench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, help="experiment config file")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
        sp.add_argument("--seed", type=int, help="override [optim] seed")
        sp.add_argument("--resolution", help="override resolution, HxW")
        return sp

    common(sub.add_parser("analyze", help="GFLOPs/params comparison table"))
    t = common(sub.add_parser("train", help="train one model"))
    t.add_argument("--steps", type=int, help="override [optim] steps")
    t.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    e = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint", type=Path)
    b = common(sub.add_parser("benchmark", help="wall-clock inference timing"))
    b.add_argument("--checkpoint", type=Path)
    b.add_argument("--runs", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.from_file(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.resolution:
            cfg.resolution = parse_resolution(args.resolution)
        if getattr(args, "steps", None) is not None:
            cfg.steps = args.steps
        if getattr(args, "runs", None) is not None:
            cfg.runs = args.runs
        cfg.check_names()
        if args.command == "analyze":
            return cmd_analyze(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.checkpoint)
        return cmd_benchmark(cfg, args.out, args.checkpoint)
    except (ConfigError, FileNotFoundError, KeyError, ValueError, FloatingPointError) as exc:
        print(f"segbench {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
