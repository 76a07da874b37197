"""Meta-architectures: decoders that turn an encoder into a segmentation network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .encoders import (
    EncoderDescriptor,
    VGG16_STAGES,
    _vgg16_body,
    apply_dilation_conversion,
    build_encoder,
)
from .graph import GraphBuilder, GraphError, LayerSpec, NetworkGraph, infer_shapes

__all__ = [
    "SegmentationModel",
    "build_skipnet",
    "build_unet",
    "build_dilation_frontend",
    "build_segnet_reference",
    "DECODERS",
    "build_model",
    "DEFAULT_NUM_CLASSES",
]

DEFAULT_NUM_CLASSES = 20


@dataclass(frozen=True)
class SegmentationModel:
    encoder_name: str
    decoder_name: str
    graph: NetworkGraph
    num_classes: int
    # nodes that project features to class scores; training initialises them small
    score_nodes: tuple[str, ...] = ()

    @property
    def model_id(self) -> str:
        return f"{self.decoder_name}-{self.encoder_name}"

    @property
    def output(self) -> str:
        return self.graph.outputs[0]


def _up2(b: GraphBuilder, name: str, x: str, channels: int) -> str:
    # kernel = 2 x stride, FCN convention
    return b.add(name, LayerSpec("transposed-conv", kernel=4, stride=2, padding=1,
                                 out_channels=channels), x)


def _score(b: GraphBuilder, name: str, x: str, num_classes: int) -> str:
    return b.conv(name, x, num_classes, 1, bias=True)


def build_skipnet(encoder: EncoderDescriptor, num_classes: int = DEFAULT_NUM_CLASSES) -> SegmentationModel:
    """FCN-8s style decoding in label space.

    Score the stride 8/16/32 taps with 1x1 convs, upsample the coarsest heatmap
    2x and add it to the next, twice, then upsample 8x to full resolution.
    """
    for s in (8, 16, 32):
        if s not in encoder.taps or encoder.dilated:
            raise GraphError(f"skipnet needs taps at strides 8, 16, 32; {encoder.name!r} has "
                             f"{sorted(encoder.taps)}")
    b = GraphBuilder(encoder.graph)
    s32 = _score(b, "score32", encoder.tap(32)[0], num_classes)
    s16 = _score(b, "score16", encoder.tap(16)[0], num_classes)
    s8 = _score(b, "score8", encoder.tap(8)[0], num_classes)
    x = _up2(b, "up32", s32, num_classes)
    x = b.simple("fuse16", "elementwise-add", x, s16)
    x = _up2(b, "up16", x, num_classes)
    x = b.simple("fuse8", "elementwise-add", x, s8)
    x = b.add("up8", LayerSpec("transposed-conv", kernel=16, stride=8, padding=4,
                               out_channels=num_classes), x)
    return SegmentationModel(encoder.name, "skipnet", b.build([x]), num_classes,
                             ("score32", "score16", "score8"))


def build_unet(encoder: EncoderDescriptor, num_classes: int = DEFAULT_NUM_CLASSES) -> SegmentationModel:
    """Stage-wise feature-space decoding with element-wise-add fusion.

    Each 2x transposed conv maps to the channel count of the tap it fuses with.
    Below the highest-resolution tap, stages halve channels without fusion.
    A final 1x1 conv produces the class scores.
    """
    if encoder.dilated:
        raise GraphError("unet expects an unconverted encoder")
    top = encoder.output_stride
    b = GraphBuilder(encoder.graph)
    x, ch = encoder.output
    stride = top
    stage = 0
    while stride > 1:
        stride //= 2
        stage += 1
        tap = encoder.taps.get(stride)
        if tap is not None:
            tap_node, tap_ch = tap
            x = _up2(b, f"up{stage}", x, tap_ch)
            ch = tap_ch
            x = b.simple(f"fuse{stage}", "elementwise-add", x, tap_node)
        else:
            if stride > min(encoder.taps):
                raise GraphError(f"unet: encoder {encoder.name!r} is missing a tap at stride {stride}")
            ch = max(1, ch // 2)
            x = _up2(b, f"up{stage}", x, ch)
    x = _score(b, "classifier", x, num_classes)
    return SegmentationModel(encoder.name, "unet", b.build([x]), num_classes, ("classifier",))


def build_dilation_frontend(encoder: EncoderDescriptor, num_classes: int = DEFAULT_NUM_CLASSES,
                            learned_upsampling: bool = False) -> SegmentationModel:
    """Dilated stride-8 trunk, 1x1 score conv, one 8x upsampling.

    The 8x step is a fixed bilinear resize unless ``learned_upsampling``.
    """
    conv = encoder if encoder.dilated else apply_dilation_conversion(encoder)
    b = GraphBuilder(conv.graph)
    x = _score(b, "score8", conv.output[0], num_classes)
    if learned_upsampling:
        x = b.add("up8", LayerSpec("transposed-conv", kernel=16, stride=8, padding=4,
                                   out_channels=num_classes), x)
    else:
        x = b.simple("up8", "bilinear-resize", x, scale=8)
    return SegmentationModel(encoder.name, "dilation", b.build([x]), num_classes, ("score8",))


def build_segnet_reference(num_classes: int = DEFAULT_NUM_CLASSES) -> SegmentationModel:
    """VGG16 encoder with a mirrored 13-conv decoder.  Cost reference only.

    Unpooling is modelled as a 2x resize followed by the stage's conv stack.
    """
    b = GraphBuilder()
    x = b.input()
    x, _ = _vgg16_body(b, x, batchnorm=True)
    stages = list(reversed(VGG16_STAGES))
    for si, stage in enumerate(stages):
        idx = len(stages) - si
        x = b.simple(f"unpool{idx}", "bilinear-resize", x, scale=2)
        # decoder stage mirrors the encoder: out channels step down at the stage end
        nxt = stages[si + 1][-1] if si + 1 < len(stages) else None
        chans = list(stage)
        chans[-1] = nxt if nxt is not None else num_classes
        for ci, ch in enumerate(chans, 1):
            name = f"dconv{idx}_{len(chans) - ci + 1}"
            last = nxt is None and ci == len(chans)
            x = b.conv(name, x, ch, 3, bias=last)
            if not last:
                x = b.simple(f"{name}_bn", "batchnorm", x)
                x = b.simple(f"{name}_relu", "relu", x)
    return SegmentationModel("vgg16", "segnet", b.build([x]), num_classes, (x,))


DECODERS: dict[str, Callable[..., SegmentationModel]] = {
    "skipnet": build_skipnet,
    "unet": build_unet,
    "dilation": build_dilation_frontend,
}


def build_model(encoder: str, decoder: str, num_classes: int = DEFAULT_NUM_CLASSES,
                encoder_kwargs: dict | None = None, decoder_kwargs: dict | None = None) -> SegmentationModel:
    """Build one encoder x decoder pair by registered name.  ``segnet`` ignores ``encoder``."""
    if decoder == "segnet":
        return build_segnet_reference(num_classes)
    if decoder not in DECODERS:
        raise KeyError(f"unknown decoder {decoder!r}; known: {', '.join(DECODERS)}, segnet")
    enc = build_encoder(encoder, **(encoder_kwargs or {}))
    return DECODERS[decoder](enc, num_classes, **(decoder_kwargs or {}))


def output_shape(model: SegmentationModel, height: int, width: int, batch: int = 1):
    return infer_shapes(model.graph, (batch, None, height, width))[model.output]
