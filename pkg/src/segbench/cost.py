"""Analytic MAC / FLOP / parameter / activation counting over graph IR.

Convention: one MAC is two FLOPs.  Element-wise layers contribute FLOPs but
no MACs: relu and add one op per output element, batchnorm two (scale and
shift), bilinear resize four, pooling one per window element.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .graph import (
    LayerSpec,
    NetworkGraph,
    ShapeError,
    TensorShape,
    effective_strides,
    infer_shape,
    infer_shapes,
    validate_graph,
)

__all__ = [
    "CONVENTION",
    "LayerCost",
    "CostReport",
    "ComparisonRow",
    "ComparisonTable",
    "layer_cost",
    "network_cost",
    "compare_models",
    "EXTERNAL_REFERENCES",
]

CONVENTION = "flops = 2xMAC"

# values reported for networks we do not model (GFLOPs at 360x640; None = not reported)
EXTERNAL_REFERENCES = {
    "enet": 3.83,
    "deeplab": None,
}


@dataclass(frozen=True)
class LayerCost:
    macs: int = 0
    flops: int = 0
    params: int = 0
    activation_elems: int = 0

    def __add__(self, other: "LayerCost") -> "LayerCost":
        return LayerCost(self.macs + other.macs, self.flops + other.flops,
                         self.params + other.params, self.activation_elems + other.activation_elems)


def layer_cost(layer: LayerSpec, input_shape: TensorShape | list[TensorShape]) -> LayerCost:
    """Cost of one layer.  Multi-input layers take a list of shapes."""
    shapes = list(input_shape) if isinstance(input_shape, (list, tuple)) and input_shape and \
        isinstance(input_shape[0], TensorShape) else [input_shape]
    x = shapes[0]
    out = infer_shape(layer, shapes)
    k = layer.kind
    kh, kw = layer.kernel
    n_out = out.numel

    if k in ("conv", "depthwise-conv", "grouped-conv"):
        per_out = kh * kw * x.channels // layer.groups
        macs = n_out * per_out
        params = kh * kw * x.channels * layer.out_channels // layer.groups
        params += layer.out_channels if layer.has_bias else 0
        return LayerCost(macs, 2 * macs, params, n_out)
    if k == "transposed-conv":
        macs = x.numel * kh * kw * layer.out_channels // layer.groups
        params = kh * kw * x.channels * layer.out_channels // layer.groups
        params += layer.out_channels if layer.has_bias else 0
        return LayerCost(macs, 2 * macs, params, n_out)
    if k in ("max-pool", "avg-pool"):
        return LayerCost(0, n_out * kh * kw, 0, n_out)
    if k == "global-pool":
        return LayerCost(0, x.numel, 0, n_out)
    if k == "batchnorm":
        return LayerCost(0, 2 * n_out, 2 * x.channels, n_out)
    if k == "relu":
        return LayerCost(0, n_out, 0, n_out)
    if k == "elementwise-add":
        return LayerCost(0, n_out * (len(shapes) - 1), 0, n_out)
    if k == "bilinear-resize":
        return LayerCost(0, 4 * n_out, 0, n_out)
    # input, concat, channel-shuffle: pure data movement
    return LayerCost(0, 0, 0, n_out)


@dataclass(frozen=True)
class CostReport:
    model_id: str
    resolution: tuple[int, int]
    layers: tuple[tuple[str, str, LayerCost], ...]  # (node id, kind, cost)
    total: LayerCost
    convention: str = CONVENTION
    # resolution actually shape-inferred when the requested one is not stride-aligned
    evaluated_resolution: tuple[int, int] | None = None

    @property
    def gflops(self) -> float:
        return self.total.flops / 1e9

    @property
    def gmacs(self) -> float:
        return self.total.macs / 1e9

    @property
    def params(self) -> int:
        return self.total.params

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer_id", "kind", "macs", "flops", "params", "activation_elems"])
        for nid, kind, c in self.layers:
            w.writerow([nid, kind, c.macs, c.flops, c.params, c.activation_elems])
        return buf.getvalue()

    def to_markdown(self) -> str:
        h, w = self.resolution
        lines = [f"# Cost report: {self.model_id}", "",
                 f"- resolution: {h}x{w}",
                 f"- convention: {self.convention}"]
        if self.evaluated_resolution:
            eh, ew = self.evaluated_resolution
            lines.append(f"- evaluated at {eh}x{ew}, scaled by pixel ratio")
        lines += ["", "| Model | GFLOPs | GMACs | Params (M) |", "|---|---|---|---|",
                  f"| {self.model_id} | {self.gflops:.2f} | {self.gmacs:.2f} | {self.params / 1e6:.2f} |", ""]
        return "\n".join(lines)


def _alignment(graph: NetworkGraph) -> int:
    strides = effective_strides(graph)
    return max(int(s) for s in strides.values() if s.denominator == 1)


def network_cost(graph: NetworkGraph, input_shape: TensorShape | tuple, model_id: str = "model",
                 check: bool = True) -> CostReport:
    """Per-layer and total cost of ``graph`` at ``input_shape`` (N, C, H, W).

    Inputs whose H or W is not a multiple of the graph's deepest stride (for
    example 360x640 against stride 32) are evaluated at the next aligned size
    and every activation-proportional count is scaled by the pixel ratio;
    parameters are unaffected.
    """
    if not isinstance(input_shape, TensorShape):
        input_shape = TensorShape(*input_shape)
    if check:
        problems = validate_graph(graph, _probe_shape(graph, input_shape))
        if problems:
            raise ShapeError("invalid graph: " + "; ".join(map(str, problems)))
    align = _alignment(graph)
    h, w = input_shape.height, input_shape.width
    eh, ew = -(-h // align) * align, -(-w // align) * align
    eval_shape = TensorShape(input_shape.batch, input_shape.channels, eh, ew)
    shapes = infer_shapes(graph, eval_shape)
    scaled = (eh, ew) != (h, w)
    ratio = (h * w) / (eh * ew)

    rows = []
    total = LayerCost()
    for node in graph.nodes:
        if node.layer.kind == "input":
            continue
        c = layer_cost(node.layer, [shapes[i] for i in node.inputs])
        if scaled:
            c = LayerCost(round(c.macs * ratio), round(c.flops * ratio), c.params,
                          round(c.activation_elems * ratio))
        rows.append((node.id, node.layer.kind, c))
        total = total + c
    return CostReport(model_id, (h, w), tuple(rows), total,
                      evaluated_resolution=(eh, ew) if scaled else None)


def _probe_shape(graph: NetworkGraph, shape: TensorShape) -> TensorShape:
    align = _alignment(graph)
    return TensorShape(shape.batch, shape.channels, align * 2, align * 2)


# ---------------------------------------------------------------------------
# comparison tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    model_id: str
    gflops: float | None
    params: int | None
    ratio_to_smallest: float | None
    external: bool = False
    note: str = ""


@dataclass(frozen=True)
class ComparisonTable:
    resolution: tuple[int, int]
    rows: tuple[ComparisonRow, ...]
    convention: str = CONVENTION
    failures: tuple[tuple[str, str], ...] = field(default=())

    def row(self, model_id: str) -> ComparisonRow:
        for r in self.rows:
            if r.model_id == model_id:
                return r
        raise KeyError(model_id)

    def ratio(self, a: str, b: str) -> float:
        """GFLOPs(a) / GFLOPs(b)."""
        ga, gb = self.row(a).gflops, self.row(b).gflops
        if ga is None or gb is None:
            raise ValueError(f"no GFLOPs for {a if ga is None else b}")
        return ga / gb

    @property
    def model_ids(self) -> list[str]:
        return [r.model_id for r in self.rows]


def compare_models(reports: list[CostReport], externals: dict[str, float | None] | None = None,
                   failures: list[tuple[str, str]] | None = None) -> ComparisonTable:
    """Sort reports by GFLOPs and attach ratio-to-smallest.

    ``externals`` adds literal reference rows (flagged external, never computed);
    rows without a GFLOPs value sort last.
    """
    if not reports:
        raise ValueError("no reports to compare")
    res = {r.resolution for r in reports}
    if len(res) != 1:
        raise ValueError(f"cannot compare reports at mixed resolutions: {sorted(res)}")
    resolution = res.pop()
    entries = [(r.model_id, r.gflops, r.params, False) for r in reports]
    for name, g in (externals or {}).items():
        entries.append((name, g, None, True))
    known = [g for _, g, _, _ in entries if g is not None]
    smallest = min(known)
    entries.sort(key=lambda e: (e[1] is None, e[1] if e[1] is not None else math.inf, e[0]))
    rows = tuple(ComparisonRow(m, g, p, None if g is None else g / smallest, ext,
                               "external reference" if ext else "")
                 for m, g, p, ext in entries)
    return ComparisonTable(resolution, rows, failures=tuple(failures or ()))
