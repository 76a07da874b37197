"""Feature-extraction backbones expressed as graph IR, with multi-resolution taps.

Channel schedules follow the standard published tables: VGG16 configuration D,
ResNet-18, MobileNet-1.0 and ShuffleNet (1x, g groups).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from types import MappingProxyType
from typing import Callable, Mapping

import numpy as np

from .graph import (
    CONV_KINDS,
    POOL_KINDS,
    GraphBuilder,
    GraphError,
    NetworkGraph,
    Node,
    effective_strides,
    infer_shapes,
    remove_node,
)

__all__ = [
    "EncoderDescriptor",
    "build_vgg16",
    "build_resnet18",
    "build_mobilenet",
    "build_shufflenet",
    "channel_shuffle",
    "apply_dilation_conversion",
    "ENCODERS",
    "build_encoder",
    "SHUFFLENET_STAGE_CHANNELS",
]


@dataclass(frozen=True)
class EncoderDescriptor:
    """A backbone graph plus the nodes decoders may read from.

    ``taps`` maps effective stride -> (node id, channels).  The deepest tap is
    the encoder output.  ``dilated`` marks an encoder that went through
    :func:`apply_dilation_conversion` (output stride 8, taps above 8 dropped).
    """

    name: str
    graph: NetworkGraph
    taps: Mapping[int, tuple[str, int]]
    width_multiplier: float | None = None
    groups: int | None = None
    dilated: bool = False

    def __post_init__(self):
        object.__setattr__(self, "taps", MappingProxyType(dict(sorted(self.taps.items()))))

    @property
    def output_stride(self) -> int:
        return max(self.taps)

    @property
    def output(self) -> tuple[str, int]:
        return self.taps[self.output_stride]

    def tap(self, stride: int) -> tuple[str, int]:
        try:
            return self.taps[stride]
        except KeyError:
            raise GraphError(f"encoder {self.name!r} has no tap at stride {stride}") from None


def _bn_relu(b: GraphBuilder, name: str, x: str, relu: bool = True) -> str:
    x = b.simple(f"{name}_bn", "batchnorm", x)
    if relu:
        x = b.simple(f"{name}_relu", "relu", x)
    return x


# ---------------------------------------------------------------------------
# VGG16
# ---------------------------------------------------------------------------

VGG16_STAGES = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))


def _vgg16_body(b: GraphBuilder, x: str, batchnorm: bool) -> tuple[str, dict[int, tuple[str, int]]]:
    taps = {}
    stride = 1
    for si, stage in enumerate(VGG16_STAGES, 1):
        for ci, ch in enumerate(stage, 1):
            name = f"conv{si}_{ci}"
            x = b.conv(name, x, ch, 3, bias=not batchnorm)
            if batchnorm:
                x = _bn_relu(b, name, x)
            else:
                x = b.simple(f"{name}_relu", "relu", x)
        x = b.simple(f"pool{si}", "max-pool", x, kernel=2, stride=2)
        stride *= 2
        taps[stride] = (x, stage[-1])
    return x, taps


def build_vgg16(vgg_batchnorm: bool = True) -> EncoderDescriptor:
    """13 3x3 convs in 5 stages, each closed by a 2x2 max-pool."""
    b = GraphBuilder()
    x = b.input()
    x, taps = _vgg16_body(b, x, vgg_batchnorm)
    return EncoderDescriptor("vgg16", b.build([x]), taps)


# ---------------------------------------------------------------------------
# ResNet18
# ---------------------------------------------------------------------------

def _basic_block(b: GraphBuilder, name: str, x: str, in_ch: int, out_ch: int, stride: int) -> str:
    y = b.conv(f"{name}_conv1", x, out_ch, 3, stride=stride)
    y = _bn_relu(b, f"{name}_conv1", y)
    y = b.conv(f"{name}_conv2", y, out_ch, 3)
    y = _bn_relu(b, f"{name}_conv2", y, relu=False)
    if stride != 1 or in_ch != out_ch:
        sc = b.conv(f"{name}_proj", x, out_ch, 1, stride=stride)
        sc = _bn_relu(b, f"{name}_proj", sc, relu=False)
    else:
        sc = x
    y = b.simple(f"{name}_add", "elementwise-add", y, sc)
    return b.simple(f"{name}_relu", "relu", y)


def build_resnet18() -> EncoderDescriptor:
    b = GraphBuilder()
    x = b.input()
    x = b.conv("stem_conv", x, 64, 7, stride=2)
    x = _bn_relu(b, "stem_conv", x)
    taps = {2: (x, 64)}
    x = b.simple("stem_pool", "max-pool", x, kernel=3, stride=2, padding=1)
    in_ch, stride = 64, 4
    for li, out_ch in enumerate((64, 128, 256, 512), 1):
        s = 1 if li == 1 else 2
        x = _basic_block(b, f"layer{li}_0", x, in_ch, out_ch, s)
        x = _basic_block(b, f"layer{li}_1", x, out_ch, out_ch, 1)
        stride *= s
        taps[stride] = (x, out_ch)
        in_ch = out_ch
    return EncoderDescriptor("resnet18", b.build([x]), taps)


# ---------------------------------------------------------------------------
# MobileNet
# ---------------------------------------------------------------------------

# (out_channels, stride) of the 13 depthwise separable blocks
MOBILENET_BLOCKS = ((64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
                    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1), (1024, 2), (1024, 1))


def _scaled(ch: int, alpha: float) -> int:
    return max(1, int(round(ch * alpha)))


def depthwise_separable(b: GraphBuilder, name: str, x: str, in_ch: int, out_ch: int,
                        stride: int = 1) -> str:
    """Depthwise 3x3 + BN + ReLU, then pointwise 1x1 + BN + ReLU."""
    y = b.conv(f"{name}_dw", x, in_ch, 3, stride=stride, groups=in_ch, kind="depthwise-conv")
    y = _bn_relu(b, f"{name}_dw", y)
    y = b.conv(f"{name}_pw", y, out_ch, 1)
    return _bn_relu(b, f"{name}_pw", y)


def build_mobilenet(width_multiplier: float = 1.0) -> EncoderDescriptor:
    if not 0 < width_multiplier <= 1:
        raise ValueError(f"width_multiplier must be in (0, 1], got {width_multiplier}")
    a = width_multiplier
    b = GraphBuilder()
    x = b.input()
    ch = _scaled(32, a)
    x = b.conv("stem_conv", x, ch, 3, stride=2)
    x = _bn_relu(b, "stem_conv", x)
    stride, taps = 2, {}
    for i, (out, s) in enumerate(MOBILENET_BLOCKS, 1):
        out = _scaled(out, a)
        x = depthwise_separable(b, f"block{i}", x, ch, out, s)
        ch = out
        stride *= s
        # later blocks at the same stride overwrite: the tap is the last one
        taps[stride] = (x, ch)
    return EncoderDescriptor("mobilenet", b.build([x]), taps, width_multiplier=a)


# ---------------------------------------------------------------------------
# ShuffleNet
# ---------------------------------------------------------------------------

SHUFFLENET_STAGE_CHANNELS = {
    1: (144, 288, 576),
    2: (200, 400, 800),
    3: (240, 480, 960),
    4: (272, 544, 1088),
    8: (384, 768, 1536),
}
SHUFFLENET_STAGE_REPEATS = (4, 8, 4)


def channel_shuffle(channels: int, groups: int) -> list[int]:
    """Source channel for every output position of a channel shuffle.

    The channel axis is viewed as ``groups`` rows by ``channels/groups``
    columns, transposed and flattened.
    """
    if groups < 1 or channels % groups:
        raise ValueError(f"groups={groups} must divide channels={channels}")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1).tolist()


def shuffle_unit(b: GraphBuilder, name: str, x: str, in_ch: int, out_ch: int, groups: int,
                 stride: int, first_groups: int | None = None) -> str:
    """ShuffleNet unit: gconv1x1 -> shuffle -> dw3x3 -> gconv1x1, fused with the shortcut.

    Strided units concatenate with a 3x3 avg-pooled shortcut; others add.
    """
    g1 = groups if first_groups is None else first_groups
    mid = out_ch // 4
    branch_out = out_ch - in_ch if stride == 2 else out_ch
    y = b.conv(f"{name}_g1", x, mid, 1, groups=g1)
    y = _bn_relu(b, f"{name}_g1", y)
    y = b.simple(f"{name}_shuffle", "channel-shuffle", y, groups=groups)
    y = b.conv(f"{name}_dw", y, mid, 3, stride=stride, groups=mid, kind="depthwise-conv")
    y = _bn_relu(b, f"{name}_dw", y, relu=False)
    y = b.conv(f"{name}_g2", y, branch_out, 1, groups=groups)
    y = _bn_relu(b, f"{name}_g2", y, relu=False)
    if stride == 2:
        sc = b.simple(f"{name}_pool", "avg-pool", x, kernel=3, stride=2, padding=1)
        y = b.simple(f"{name}_cat", "concat", y, sc)
    else:
        y = b.simple(f"{name}_add", "elementwise-add", y, x)
    return b.simple(f"{name}_relu", "relu", y)


def build_shufflenet(groups: int = 3) -> EncoderDescriptor:
    if groups not in SHUFFLENET_STAGE_CHANNELS:
        raise ValueError(f"unsupported ShuffleNet group count {groups}; "
                         f"expected one of {sorted(SHUFFLENET_STAGE_CHANNELS)}")
    b = GraphBuilder()
    x = b.input()
    x = b.conv("stem_conv", x, 24, 3, stride=2)
    x = _bn_relu(b, "stem_conv", x)
    taps = {2: (x, 24)}
    x = b.simple("stem_pool", "max-pool", x, kernel=3, stride=2, padding=1)
    taps[4] = (x, 24)
    ch, stride = 24, 4
    for si, (out, reps) in enumerate(zip(SHUFFLENET_STAGE_CHANNELS[groups], SHUFFLENET_STAGE_REPEATS), 2):
        for u in range(reps):
            s = 2 if u == 0 else 1
            # 24 stem channels are too few to group in the very first unit
            fg = 1 if (si == 2 and u == 0) else None
            x = shuffle_unit(b, f"stage{si}_{u}", x, ch, out, groups, s, first_groups=fg)
            ch = out
        stride *= 2
        taps[stride] = (x, out)
    return EncoderDescriptor("shufflenet", b.build([x]), taps, groups=groups)


# ---------------------------------------------------------------------------
# dilation conversion
# ---------------------------------------------------------------------------

def apply_dilation_conversion(encoder: EncoderDescriptor) -> EncoderDescriptor:
    """Trade the last two 2x downsamplings for dilated convolutions.

    The 8->16 and 16->32 transitions become stride 1 (even-kernel pools that
    only downsample are removed).  Spatial convs that originally ran at
    stride 16 get dilation 2, those at stride 32 dilation 4.  Parameters and
    channel counts are untouched; the output stride becomes 8.
    """
    if encoder.dilated or encoder.output_stride != 32:
        raise GraphError(f"dilation conversion needs an encoder with output stride 32, "
                         f"{encoder.name!r} has {encoder.output_stride}")
    g = encoder.graph
    strides = effective_strides(g)
    transitions = []
    for n in g.nodes:
        L = n.layer
        if L.kind in CONV_KINDS - {"transposed-conv"} or L.kind in POOL_KINDS:
            s_in = strides[n.inputs[0]]
            if L.stride != (1, 1) and s_in in (8, 16):
                if L.stride != (2, 2):
                    raise GraphError(f"{n.id}: cannot convert non-2x stride {L.stride}")
                transitions.append(n.id)
    found = {strides[graph_id] for graph_id in transitions}
    if found != {16, 32}:
        raise GraphError(f"encoder {encoder.name!r} lacks identifiable 8->16 and 16->32 transitions")

    new_nodes: list[Node] = []
    to_remove = []
    for n in g.nodes:
        L = n.layer
        if L.kind == "input":
            new_nodes.append(n)
            continue
        s_in = strides[n.inputs[0]]
        changes = {}
        if n.id in transitions:
            if L.kind in POOL_KINDS and L.kernel[0] % 2 == 0:
                to_remove.append(n.id)
            else:
                changes["stride"] = (1, 1)
                if L.kind in POOL_KINDS:
                    changes["padding"] = ((L.kernel[0] - 1) // 2, (L.kernel[1] - 1) // 2)
        if L.kind in CONV_KINDS and max(L.kernel) > 1 and s_in >= 16:
            rate = int(s_in) // 8
            changes["dilation"] = rate
            changes["padding"] = (rate * (L.kernel[0] - 1) // 2, rate * (L.kernel[1] - 1) // 2)
        if changes:
            n = Node(n.id, replace(L, **changes), n.inputs)
        new_nodes.append(n)
    out = NetworkGraph(tuple(new_nodes), g.inputs, g.outputs)
    for nid in to_remove:
        out = remove_node(out, nid)

    final = out.outputs[0]
    shapes = infer_shapes(out, (1, None, 64, 64))
    taps = {s: t for s, t in encoder.taps.items() if s < 8}
    taps[8] = (final, shapes[final].channels)
    return EncoderDescriptor(encoder.name, out, taps, encoder.width_multiplier, encoder.groups,
                             dilated=True)


ENCODERS: dict[str, Callable[..., EncoderDescriptor]] = {
    "vgg16": build_vgg16,
    "resnet18": build_resnet18,
    "mobilenet": build_mobilenet,
    "shufflenet": build_shufflenet,
}


def build_encoder(name: str, **kwargs) -> EncoderDescriptor:
    try:
        ctor = ENCODERS[name]
    except KeyError:
        raise KeyError(f"unknown encoder {name!r}; known: {', '.join(ENCODERS)}") from None
    return ctor(**kwargs)
