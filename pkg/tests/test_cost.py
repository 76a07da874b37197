import csv
import io
import random

import pytest

from segbench.cost import (
    CONVENTION,
    EXTERNAL_REFERENCES,
    compare_models,
    layer_cost,
    network_cost,
)
from segbench.decoders import DECODERS, build_model
from segbench.encoders import ENCODERS, apply_dilation_conversion, build_encoder
from segbench.execute import GraphModule
from segbench.graph import GraphBuilder, LayerSpec, TensorShape, infer_shape

CONV_FAMILY = ("conv", "depthwise-conv", "grouped-conv", "transposed-conv")


def loop_macs(layer: LayerSpec, x: TensorShape) -> int:
    """Count multiplies by walking the loop nest of a direct implementation."""
    out = infer_shape(layer, [x])
    kh, kw = layer.kernel
    g = layer.groups
    count = 0
    if layer.kind == "transposed-conv":
        # scatter form: every input pixel hits every kernel tap of every output channel in its group
        cin_g, cout_g = x.channels // g, out.channels // g
        for _n in range(x.batch):
            for ic in range(x.channels):
                grp = ic // cin_g
                for _oc in range(grp * cout_g, (grp + 1) * cout_g):
                    for _iy in range(x.height):
                        for _ix in range(x.width):
                            for _ky in range(kh):
                                for _kx in range(kw):
                                    count += 1
        return count
    cin_g, cout_g = x.channels // g, out.channels // g
    for _n in range(out.batch):
        for oc in range(out.channels):
            grp = oc // cout_g
            for _oy in range(out.height):
                for _ox in range(out.width):
                    for _ic in range(grp * cin_g, (grp + 1) * cin_g):
                        for _ky in range(kh):
                            for _kx in range(kw):
                                count += 1
    return count


def random_layer(rng: random.Random) -> tuple[LayerSpec, TensorShape]:
    kind = rng.choice(CONV_FAMILY)
    k = rng.randint(1, 4)
    s = rng.randint(1, 3)
    d = rng.randint(1, 2) if kind != "transposed-conv" else 1
    hw = rng.randint(max(1, d * (k - 1) + 1), 8)
    if kind == "depthwise-conv":
        cin = rng.randint(1, 4)
        g, cout = cin, cin
    elif kind == "grouped-conv":
        g = rng.randint(2, 3)
        cin, cout = g * rng.randint(1, 2), g * rng.randint(1, 2)
    else:
        g, cin, cout = 1, rng.randint(1, 4), rng.randint(1, 4)
    p = rng.randint(0, (k - 1) if kind == "transposed-conv" else k // 2)
    layer = LayerSpec(kind, kernel=k, stride=s, padding=p, dilation=d, out_channels=cout, groups=g,
                      has_bias=rng.random() < 0.5)
    return layer, TensorShape(rng.randint(1, 2), cin, hw, rng.randint(max(1, d * (k - 1) + 1), 8))


def torch_params(layer, cin):
    b = GraphBuilder()
    x = b.input("x", cin)
    b.add("y", layer, x)
    return sum(p.numel() for p in GraphModule(b.build(["y"])).parameters())


def test_loop_oracle_random_layers():
    rng = random.Random(1234)
    for _ in range(200):
        layer, x = random_layer(rng)
        c = layer_cost(layer, x)
        assert c.macs == loop_macs(layer, x), (layer, x)
        assert c.flops == 2 * c.macs
        assert c.params == torch_params(layer, x.channels)


@pytest.mark.parametrize("layer, x, macs", [
    (LayerSpec("conv", kernel=3, padding=1, out_channels=16), TensorShape(1, 3, 32, 32), 442_368),
    (LayerSpec("depthwise-conv", kernel=3, padding=1, out_channels=16, groups=16),
     TensorShape(1, 16, 32, 32), 147_456),
    (LayerSpec("grouped-conv", kernel=3, padding=1, out_channels=6, groups=3), TensorShape(1, 6, 8, 8), 6_912),
    (LayerSpec("conv", kernel=3, padding=1, out_channels=6), TensorShape(1, 6, 8, 8), 20_736),
])
def test_worked_examples(layer, x, macs):
    assert layer_cost(layer, x).macs == macs == loop_macs(layer, x)


def test_elementwise_costs():
    x = TensorShape(1, 4, 8, 8)
    assert layer_cost(LayerSpec("relu"), x).flops == 256
    assert layer_cost(LayerSpec("batchnorm"), x).flops == 512
    assert layer_cost(LayerSpec("batchnorm"), x).params == 8
    assert layer_cost(LayerSpec("elementwise-add"), [x, x]).flops == 256
    assert layer_cost(LayerSpec("max-pool", kernel=2, stride=2), x).flops == 64 * 4
    assert layer_cost(LayerSpec("bilinear-resize", scale=2), x).flops == 4 * 1024
    for kind in ("relu", "batchnorm", "max-pool"):
        assert layer_cost(LayerSpec(kind), x).macs == 0


def test_dilation_keeps_macs():
    x = TensorShape(1, 4, 16, 16)
    a = layer_cost(LayerSpec("conv", kernel=3, padding=1, out_channels=4), x)
    b = layer_cost(LayerSpec("conv", kernel=3, padding=2, dilation=2, out_channels=4), x)
    assert a.macs == b.macs


def test_totals_are_sums():
    rep = network_cost(build_model("shufflenet", "skipnet").graph, (1, 3, 64, 128))
    assert rep.total.macs == sum(c.macs for _, _, c in rep.layers)
    assert rep.total.flops == sum(c.flops for _, _, c in rep.layers)
    assert rep.total.params == sum(c.params for _, _, c in rep.layers)
    assert rep.convention == CONVENTION


@pytest.mark.parametrize("enc", list(ENCODERS))
@pytest.mark.parametrize("dec", list(DECODERS))
def test_resolution_scaling(enc, dec):
    g = build_model(enc, dec).graph
    a = network_cost(g, (1, 3, 256, 512))
    b = network_cost(g, (1, 3, 128, 256))
    assert a.total.macs / b.total.macs == pytest.approx(4.0, rel=0.05)
    assert a.params == b.params


def test_params_match_torch():
    model = build_model("mobilenet", "unet")
    m = GraphModule(model.graph)
    assert network_cost(model.graph, (1, 3, 64, 64)).params == sum(p.numel() for p in m.parameters())


def test_non_aligned_resolution_scaled():
    g = build_model("mobilenet", "skipnet").graph
    rep = network_cost(g, (1, 3, 360, 640))
    assert rep.evaluated_resolution == (384, 640)
    aligned = network_cost(g, (1, 3, 384, 640))
    assert rep.total.macs == pytest.approx(aligned.total.macs * 360 / 384, rel=1e-6)
    assert rep.params == aligned.params


def test_csv_and_markdown():
    rep = network_cost(build_model("shufflenet", "skipnet").graph, (1, 3, 64, 128), "skipnet-shufflenet")
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["layer_id", "kind", "macs", "flops", "params", "activation_elems"]
    assert len(rows) == 1 + len(rep.layers)
    md = rep.to_markdown()
    assert CONVENTION in md and "skipnet-shufflenet" in md


def test_compare_models():
    res = (1, 3, 360, 640)
    a = network_cost(build_model("mobilenet", "skipnet").graph, res, "a")
    b = network_cost(build_model("mobilenet", "unet").graph, res, "b")
    t = compare_models([b, a], EXTERNAL_REFERENCES)
    assert t.model_ids[:3] == ["enet", "a", "b"]
    assert t.model_ids[-1] == "deeplab"
    assert t.row("enet").external
    assert t.ratio("a", "a") == 1.0
    assert t.row("enet").ratio_to_smallest == 1.0
    assert t.row("a").ratio_to_smallest == pytest.approx(a.gflops / 3.83)
    with pytest.raises(ValueError):
        compare_models([a, network_cost(build_model("mobilenet", "skipnet").graph, (1, 3, 64, 64), "c")])
    with pytest.raises(ValueError):
        compare_models([])


def test_converted_encoder_costs_more():
    enc = build_encoder("mobilenet")
    conv = apply_dilation_conversion(enc)
    assert network_cost(conv.graph, (1, 3, 64, 64)).total.macs > network_cost(enc.graph, (1, 3, 64, 64)).total.macs


def test_deterministic():
    g = build_model("resnet18", "unet").graph
    assert network_cost(g, (1, 3, 64, 64)) == network_cost(g, (1, 3, 64, 64))

