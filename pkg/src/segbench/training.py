"""Desk-scale training: weighted cross-entropy, Adam with L2 on conv weights, checkpoints."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from .data import IMAGE_MEAN, DatasetAdapter, SampleRecord
from .decoders import SegmentationModel
from .execute import GraphModule, init_parameters

__all__ = [
    "LossConfig",
    "OptimSpec",
    "TrainState",
    "LoadReport",
    "compute_class_weights",
    "weighted_cross_entropy",
    "WeightedCrossEntropy",
    "train",
    "load_weights",
    "build_module",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "batch_indices",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    class_weights: tuple[float, ...]
    ignore_index: int
    weight_constant_c: float = 1.02

    def __post_init__(self):
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.ndim != 1 or not np.isfinite(w).all() or (w < 0).any():
            raise ValueError("class weights must be a finite non-negative vector")
        object.__setattr__(self, "class_weights", tuple(float(v) for v in w))

    @classmethod
    def from_frequencies(cls, freqs, ignore_index: int, c: float = 1.02) -> "LossConfig":
        return cls(tuple(compute_class_weights(freqs, c)), ignore_index, c)


@dataclass(frozen=True)
class OptimSpec:
    method: str = "adam"
    learning_rate: float = 1e-4
    l2_decay: float = 5e-4
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.method != "adam":
            raise ValueError(f"only the adaptive-moment method is supported, got {self.method!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_decay < 0:
            raise ValueError("l2_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainState:
    step: int
    parameters: dict[str, np.ndarray]  # learnable tensors and batchnorm running statistics
    moments: dict[str, np.ndarray] = field(default_factory=dict)  # "<param>.exp_avg" / ".exp_avg_sq"
    loss_history: list[float] = field(default_factory=list)


@dataclass(frozen=True)
class LoadReport:
    matched: tuple[str, ...]
    unmatched_params: tuple[str, ...]  # state tensors not touched
    unknown: tuple[str, ...]  # supplied names with no counterpart


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def compute_class_weights(pixel_frequencies, c: float = 1.02) -> np.ndarray:
    """``1 / ln(c + p)`` per class; rare classes get large weights."""
    p = np.asarray(pixel_frequencies, dtype=np.float64)
    arg = c + p
    if (arg <= 1).any():
        raise ValueError(f"c={c} too small: ln(c + p) must be positive for every class")
    return 1.0 / np.log(arg)


def _wce_forward(logits: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor,
                 ignore_index: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Loss and its gradient w.r.t. ``logits``."""
    if logits.dim() != 4 or labels.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not match")
    k = logits.shape[1]
    mask = labels != ignore_index
    safe = torch.where(mask, labels, torch.zeros_like(labels))
    if mask.any():
        valid = labels[mask]
        if valid.min() < 0 or valid.max() >= min(k, weights.numel()):
            raise ValueError(f"label ids must lie in [0, {min(k, weights.numel())}) or equal {ignore_index}")
    count = int(mask.sum())
    if count == 0:
        return logits.new_zeros(()), torch.zeros_like(logits)
    logp = torch.log_softmax(logits, dim=1)
    nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    w = weights.to(logits.dtype)[safe] * mask
    loss = (w * nll).sum() / count
    grad = logp.exp()
    grad.scatter_add_(1, safe.unsqueeze(1), -torch.ones_like(nll).unsqueeze(1))
    grad = grad * (w / count).unsqueeze(1)
    return loss, grad


class WeightedCrossEntropy(torch.autograd.Function):
    """Autograd wrapper whose backward is the closed-form softmax gradient."""

    @staticmethod
    def forward(ctx, logits, labels, weights, ignore_index):
        loss, grad = _wce_forward(logits, labels, weights, ignore_index)
        ctx.save_for_backward(grad)
        return loss

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        return grad_out * grad, None, None, None


def weighted_cross_entropy(logits, labels, config: LossConfig) -> tuple[float, np.ndarray]:
    """Mean over non-ignored pixels of ``w[label] * -log softmax(logits)[label]``.

    Takes (N, K, H, W) logits and (N, H, W) labels as arrays; returns the loss
    and its gradient with respect to the logits (float64).
    """
    lt = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    yt = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    wt = torch.tensor(config.class_weights, dtype=torch.float64)
    loss, grad = _wce_forward(lt, yt, wt, config.ignore_index)
    return float(loss), grad.numpy()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def batch_indices(n: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Dataset indices for ``step``: consecutive slices of per-epoch shuffles.

    A pure function of its arguments, which is what makes resuming exact.
    """
    start = step * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch, off = divmod(pos, n)
        perm = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(int(perm[off]))
    return out


def _to_input(records: list[SampleRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    mean = np.asarray(IMAGE_MEAN, dtype=np.float32)[:, None, None]
    x = torch.from_numpy(np.stack([r.image - mean for r in records]).astype(np.float32))
    y = torch.from_numpy(np.stack([r.label for r in records]).astype(np.int64))
    return x, y


def build_module(model: SegmentationModel, state: TrainState | None = None, seed: int = 0) -> GraphModule:
    """Executable module for ``model``; freshly initialised from ``seed`` or loaded from ``state``."""
    torch.manual_seed(seed)
    module = GraphModule(model.graph)
    init_parameters(module, model.score_nodes)
    if state is not None:
        _assign(module, state.parameters)
    return module


def _assign(module: GraphModule, tensors: Mapping[str, np.ndarray]) -> None:
    own = module.named_tensors()
    missing = set(own) - set(tensors)
    if missing:
        raise KeyError(f"state lacks tensors: {sorted(missing)[:5]}")
    with torch.no_grad():
        for name, t in own.items():
            src = np.asarray(tensors[name])
            if tuple(src.shape) != tuple(t.shape):
                raise ValueError(f"shape conflict for {name}: {src.shape} vs {tuple(t.shape)}")
            t.copy_(torch.from_numpy(src.copy()))


def _optimizer(module: GraphModule, optim: OptimSpec) -> tuple[torch.optim.Adam, dict]:
    decayed = dict(module.decayed_parameters())
    decayed_ids = {id(p) for p in decayed.values()}
    names = {id(p): n for n, p in module.named_tensors(buffers=False).items()}
    rest = [p for p in module.parameters() if id(p) not in decayed_ids]
    # Adam's weight_decay adds l2 * w to the gradient: classic (coupled) L2
    opt = torch.optim.Adam([
        {"params": list(decayed.values()), "weight_decay": optim.l2_decay},
        {"params": rest, "weight_decay": 0.0},
    ], lr=optim.learning_rate)
    return opt, names


def _snapshot(module: GraphModule, opt: torch.optim.Adam, names: dict, step: int,
              history: list[float]) -> TrainState:
    params = {k: v.detach().cpu().numpy().copy() for k, v in module.named_tensors().items()}
    moments = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if st:
                moments[f"{names[id(p)]}.exp_avg"] = st["exp_avg"].detach().numpy().copy()
                moments[f"{names[id(p)]}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().copy()
    return TrainState(step, params, moments, list(history))


def _restore_moments(opt: torch.optim.Adam, names: dict, state: TrainState) -> None:
    if not state.moments:
        return
    for group in opt.param_groups:
        for p in group["params"]:
            n = names[id(p)]
            if f"{n}.exp_avg" in state.moments:
                opt.state[p] = {
                    "step": torch.tensor(float(state.step)),
                    "exp_avg": torch.from_numpy(state.moments[f"{n}.exp_avg"].copy()),
                    "exp_avg_sq": torch.from_numpy(state.moments[f"{n}.exp_avg_sq"].copy()),
                }


def train(model: SegmentationModel, dataset: DatasetAdapter, optim: OptimSpec, loss: LossConfig,
          steps: int, state: TrainState | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainState:
    """Run ``steps`` Adam updates, continuing from ``state`` when given.

    Batchnorm uses batch statistics while training.  Raises FloatingPointError
    on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    torch.use_deterministic_algorithms(True)
    module = build_module(model, state, seed=optim.seed)
    module.train()
    opt, names = _optimizer(module, optim)
    start = 0
    history: list[float] = []
    if state is not None:
        _restore_moments(opt, names, state)
        start, history = state.step, list(state.loss_history)
    weights = torch.tensor(loss.class_weights, dtype=torch.float32)
    for step in range(start, start + steps):
        idx = batch_indices(len(dataset), optim.batch_size, step, optim.seed)
        x, y = _to_input([dataset[i] for i in idx])
        logits = module(x)
        value = WeightedCrossEntropy.apply(logits, y, weights, loss.ignore_index)
        v = value.item()
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss {v} at step {step} (batch {idx})")
        opt.zero_grad(set_to_none=True)
        value.backward()
        opt.step()
        history.append(v)
        if on_step is not None:
            on_step(step, v)
    return _snapshot(module, opt, names, start + steps, history)


@torch.no_grad()
def predict(module: GraphModule, records: list[SampleRecord], num_eval_classes: int) -> np.ndarray:
    """Argmax class ids (N, H, W) over the first ``num_eval_classes`` logit channels."""
    module.eval()
    x, _ = _to_input(records)
    logits = module(x)[:, :num_eval_classes]
    return logits.argmax(1).numpy()


# ---------------------------------------------------------------------------
# weights and checkpoints
# ---------------------------------------------------------------------------

def load_weights(state: TrainState, tensors: Mapping[str, np.ndarray]) -> tuple[TrainState, LoadReport]:
    """Replace the state tensors named in ``tensors``; others are left alone."""
    params = dict(state.parameters)
    matched, unknown = [], []
    for name, value in tensors.items():
        if name not in params:
            unknown.append(name)
            continue
        value = np.asarray(value)
        if value.shape != params[name].shape:
            raise ValueError(f"shape conflict for {name}: got {value.shape}, expected {params[name].shape}")
        params[name] = value.astype(params[name].dtype, copy=True)
        matched.append(name)
    untouched = tuple(n for n in state.parameters if n not in set(matched))
    new = TrainState(state.step, params, dict(state.moments), list(state.loss_history))
    return new, LoadReport(tuple(matched), untouched, tuple(unknown))


CHECKPOINT_FORMAT = 1


def save_checkpoint(state: TrainState, directory: str | os.PathLike, meta: dict | None = None) -> Path:
    """Manifest JSON plus one raw little-endian blob per tensor."""
    d = Path(directory)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    items = [("param", k, v) for k, v in state.parameters.items()] + \
            [("moment", k, v) for k, v in state.moments.items()]
    for i, (section, name, arr) in enumerate(items):
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        dt = arr.dtype.newbyteorder("<")
        fname = f"tensors/{i:05d}.bin"
        (d / fname).write_bytes(arr.astype(dt, copy=False).tobytes())
        entries.append({"section": section, "name": name, "shape": list(arr.shape),
                        "dtype": dt.str, "file": fname})
    manifest = {"format": CHECKPOINT_FORMAT, "step": state.step,
                "loss_history": [float(v) for v in state.loss_history],
                "meta": meta or {}, "tensors": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory: str | os.PathLike) -> tuple[TrainState, dict]:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')}")
    params, moments = {}, {}
    for e in manifest["tensors"]:
        arr = np.frombuffer((d / e["file"]).read_bytes(), dtype=np.dtype(e["dtype"]))
        arr = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="))
        (params if e["section"] == "param" else moments)[e["name"]] = arr
    state = TrainState(manifest["step"], params, moments, list(manifest["loss_history"]))
    return state, manifest.get("meta", {})
