"""Executes a NetworkGraph with PyTorch modules, one module per node."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .encoders import channel_shuffle
from .graph import NetworkGraph, infer_shapes

__all__ = ["GraphModule", "init_parameters", "bilinear_kernel"]


class _Shuffle(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.register_buffer("perm", torch.tensor(channel_shuffle(channels, groups)), persistent=False)

    def forward(self, x):
        return x.index_select(1, self.perm)


class _Fn(nn.Module):
    def __init__(self, fn):
        super().__init__()
        self.fn = fn

    def forward(self, *xs):
        return self.fn(*xs)


def _sum(*xs):
    out = xs[0]
    for x in xs[1:]:
        out = out + x
    return out


def _make(layer, in_channels: int) -> nn.Module:
    k = layer.kind
    if k in ("conv", "depthwise-conv", "grouped-conv"):
        return nn.Conv2d(in_channels, layer.out_channels, layer.kernel, layer.stride, layer.padding,
                         layer.dilation, layer.groups, bias=layer.has_bias)
    if k == "transposed-conv":
        return nn.ConvTranspose2d(in_channels, layer.out_channels, layer.kernel, layer.stride,
                                  layer.padding, groups=layer.groups, bias=layer.has_bias,
                                  dilation=layer.dilation)
    if k == "batchnorm":
        return nn.BatchNorm2d(in_channels)
    if k == "relu":
        return nn.ReLU()
    if k == "max-pool":
        return nn.MaxPool2d(layer.kernel, layer.stride, layer.padding)
    if k == "avg-pool":
        return nn.AvgPool2d(layer.kernel, layer.stride, layer.padding)
    if k == "elementwise-add":
        return _Fn(_sum)
    if k == "concat":
        return _Fn(lambda *xs: torch.cat(xs, 1))
    if k == "channel-shuffle":
        return _Shuffle(in_channels, layer.groups)
    if k == "bilinear-resize":
        s = layer.scale
        return _Fn(lambda x: F.interpolate(x, scale_factor=s, mode="bilinear", align_corners=False))
    if k == "global-pool":
        return _Fn(lambda x: F.adaptive_avg_pool2d(x, 1))
    raise ValueError(f"cannot execute layer kind {k!r}")


class GraphModule(nn.Module):
    """Forward pass over a single-input, single-output graph.

    Parameters are named ``<node id>.<weight|bias|...>`` through
    :meth:`named_tensors`.
    """

    def __init__(self, graph: NetworkGraph):
        super().__init__()
        if len(graph.inputs) != 1 or len(graph.outputs) != 1:
            raise ValueError("GraphModule runs single-input single-output graphs")
        self.graph = graph
        shapes = infer_shapes(graph, (1, None, 64, 64))
        self.order = [n for n in graph.topological_order() if graph[n].layer.kind != "input"]
        self.layers = nn.ModuleDict()
        for nid in self.order:
            node = graph[nid]
            self.layers[nid] = _make(node.layer, shapes[node.inputs[0]].channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        vals = {self.graph.inputs[0]: x}
        for nid in self.order:
            node = self.graph[nid]
            vals[nid] = self.layers[nid](*[vals[i] for i in node.inputs])
        return vals[self.graph.outputs[0]]

    def named_tensors(self, buffers: bool = True) -> dict[str, torch.Tensor]:
        src = self.state_dict() if buffers else dict(self.named_parameters())
        return {k.removeprefix("layers."): v for k, v in src.items()}

    def decayed_parameters(self):
        """Conv and transposed-conv weights (the only L2-regularised tensors)."""
        for nid, m in self.layers.items():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                yield f"{nid}.weight", m.weight


def bilinear_kernel(size: int) -> torch.Tensor:
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = torch.arange(size, dtype=torch.float64)
    filt = 1 - (og - center).abs() / factor
    return filt[:, None] * filt[None, :]


@torch.no_grad()
def init_parameters(module: GraphModule, score_nodes=(), score_std: float = 0.01) -> None:
    """He fan-in normal convs, bilinear transposed convs, unit batchnorm.

    ``score_nodes`` (class-score projections) start near zero so initial
    logits are almost uniform.
    """
    for nid, m in module.layers.items():
        if isinstance(m, nn.ConvTranspose2d):
            m.weight.zero_()
            kh, kw = m.kernel_size
            k = bilinear_kernel(kh) if kh == kw else torch.ones(kh, kw) / (kh * kw)
            per_group_in = m.in_channels // m.groups
            out_per_group = m.out_channels // m.groups
            for c in range(min(m.in_channels, m.out_channels)):
                if c % per_group_in < out_per_group:
                    m.weight[c, c % per_group_in] = k.to(m.weight.dtype)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            std = score_std if nid in score_nodes else math.sqrt(2.0 / fan_in)
            m.weight.normal_(0.0, std)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()
