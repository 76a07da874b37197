"""Declarative DAG representation of convolutional networks.

Every encoder and decoder in the package is expressed as a :class:`NetworkGraph`
before anything is executed or costed.  Layout is always NCHW.
"""
from __future__ import annotations

import graphlib
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

__all__ = [
    "LAYER_KINDS",
    "CONV_KINDS",
    "GraphError",
    "ShapeError",
    "StrideError",
    "TensorShape",
    "LayerSpec",
    "Node",
    "NetworkGraph",
    "GraphBuilder",
    "Violation",
    "infer_shape",
    "infer_shapes",
    "validate_graph",
    "effective_stride",
    "effective_strides",
    "receptive_field",
    "dumps",
    "loads",
]

LAYER_KINDS = (
    "input",
    "conv",
    "depthwise-conv",
    "grouped-conv",
    "transposed-conv",
    "max-pool",
    "avg-pool",
    "batchnorm",
    "relu",
    "elementwise-add",
    "concat",
    "channel-shuffle",
    "bilinear-resize",
    "global-pool",
)
CONV_KINDS = frozenset({"conv", "depthwise-conv", "grouped-conv", "transposed-conv"})
POOL_KINDS = frozenset({"max-pool", "avg-pool"})
# kinds whose spatial geometry is driven by kernel/stride/padding
_WINDOWED = CONV_KINDS | POOL_KINDS


class GraphError(ValueError):
    """Structural problem with a graph or layer."""


class ShapeError(GraphError):
    pass


class StrideError(GraphError):
    pass


@dataclass(frozen=True)
class TensorShape:
    batch: int
    channels: int
    height: int
    width: int

    def __post_init__(self):
        for name in ("batch", "channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ShapeError(f"TensorShape.{name} must be an int >= 1, got {v!r}")

    def __iter__(self):
        return iter((self.batch, self.channels, self.height, self.width))

    @property
    def numel(self) -> int:
        return self.batch * self.channels * self.height * self.width

    def __str__(self):
        return f"({self.batch},{self.channels},{self.height},{self.width})"


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  Fields irrelevant to a kind keep their defaults.

    ``out_channels`` is only meaningful for conv kinds and ``input``;
    ``groups`` doubles as the group count of ``channel-shuffle``;
    ``scale`` is the integer upsampling factor of ``bilinear-resize``.
    """

    kind: str
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: int = 1
    out_channels: int | None = None
    groups: int = 1
    has_bias: bool = False
    scale: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        if self.dilation < 1:
            raise GraphError(f"dilation must be >= 1, got {self.dilation}")
        if self.dilation > 1 and self.kind not in CONV_KINDS:
            raise GraphError(f"dilation > 1 is only valid for conv kinds, not {self.kind}")
        if self.groups < 1:
            raise GraphError(f"groups must be >= 1, got {self.groups}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise GraphError(f"bad kernel/stride/padding on {self.kind}")
        if self.scale < 1:
            raise GraphError(f"scale must be >= 1, got {self.scale}")
        if self.kind in CONV_KINDS | {"input"} and (self.out_channels is None or self.out_channels < 1):
            raise GraphError(f"{self.kind} needs out_channels >= 1")

    @property
    def is_conv(self) -> bool:
        return self.kind in CONV_KINDS


@dataclass(frozen=True)
class Node:
    id: str
    layer: LayerSpec
    inputs: tuple[str, ...] = ()


_ID_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[Node, ...]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def __getitem__(self, node_id: str) -> Node:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"no node {node_id!r}") from None

    def __len__(self):
        return len(self.nodes)

    @property
    def ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes if node_id in n.inputs]

    def topological_order(self) -> list[str]:
        """Node ids in dependency order.  Raises GraphError on cycles or dangling refs."""
        ts = graphlib.TopologicalSorter()
        for n in self.nodes:
            for i in n.inputs:
                if i not in self._index:
                    raise GraphError(f"node {n.id!r} references missing input {i!r}")
            ts.add(n.id, *n.inputs)
        try:
            return list(ts.static_order())
        except graphlib.CycleError as exc:
            raise GraphError(f"cycle through {exc.args[1]}") from None


class GraphBuilder:
    """Mutable helper used by the model constructors; ``build()`` freezes it."""

    def __init__(self, base: NetworkGraph | None = None):
        self._nodes: list[Node] = list(base.nodes) if base else []
        self._ids = {n.id for n in self._nodes}
        self.inputs: list[str] = list(base.inputs) if base else []
        self.outputs: list[str] = list(base.outputs) if base else []

    def add(self, node_id: str, layer: LayerSpec, *inputs: str) -> str:
        if not _ID_RE.match(node_id):
            raise GraphError(f"invalid node id {node_id!r}")
        if node_id in self._ids:
            raise GraphError(f"duplicate node id {node_id!r}")
        self._nodes.append(Node(node_id, layer, tuple(inputs)))
        self._ids.add(node_id)
        return node_id

    def input(self, node_id: str = "input", channels: int = 3) -> str:
        self.add(node_id, LayerSpec("input", out_channels=channels))
        self.inputs.append(node_id)
        return node_id

    def conv(self, node_id, x, out_channels, kernel=3, stride=1, padding=None, dilation=1,
             groups=1, bias=False, kind=None) -> str:
        k = _pair(kernel)
        if padding is None:
            padding = (dilation * (k[0] - 1) // 2, dilation * (k[1] - 1) // 2)
        if kind is None:
            kind = "conv" if groups == 1 else "grouped-conv"
        spec = LayerSpec(kind, kernel=k, stride=stride, padding=padding, dilation=dilation,
                         out_channels=out_channels, groups=groups, has_bias=bias)
        return self.add(node_id, spec, x)

    def simple(self, node_id, kind, *inputs, **kw) -> str:
        return self.add(node_id, LayerSpec(kind, **kw), *inputs)

    def build(self, outputs: Sequence[str] | None = None) -> NetworkGraph:
        if outputs is not None:
            self.outputs = list(outputs)
        return NetworkGraph(tuple(self._nodes), tuple(self.inputs), tuple(self.outputs))


# ---------------------------------------------------------------------------
# shape inference
# ---------------------------------------------------------------------------

def _window_out(size: int, k: int, s: int, p: int, d: int = 1) -> int:
    return (size + 2 * p - d * (k - 1) - 1) // s + 1


def infer_shape(layer: LayerSpec, input_shapes: Sequence[TensorShape]) -> TensorShape:
    """Output shape of ``layer`` applied to ``input_shapes``."""
    if not input_shapes:
        raise ShapeError(f"{layer.kind} needs at least one input")
    x = input_shapes[0]
    kind = layer.kind
    n, c, h, w = x
    (kh, kw), (sh, sw), (ph, pw) = layer.kernel, layer.stride, layer.padding
    d = layer.dilation

    if kind == "input":
        return TensorShape(n, layer.out_channels, h, w)

    if kind in ("conv", "depthwise-conv", "grouped-conv"):
        g = layer.groups
        if kind == "depthwise-conv" and g != c:
            raise ShapeError(f"depthwise-conv needs groups == input channels ({g} != {c})")
        if c % g or layer.out_channels % g:
            raise ShapeError(
                f"groups={g} must divide input channels {c} and out_channels {layer.out_channels}")
        oh, ow = _window_out(h, kh, sh, ph, d), _window_out(w, kw, sw, pw, d)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{kind} produces empty output from {x}")
        return TensorShape(n, layer.out_channels, oh, ow)

    if kind == "transposed-conv":
        g = layer.groups
        if c % g or layer.out_channels % g:
            raise ShapeError(
                f"groups={g} must divide input channels {c} and out_channels {layer.out_channels}")
        oh = (h - 1) * sh - 2 * ph + d * (kh - 1) + 1
        ow = (w - 1) * sw - 2 * pw + d * (kw - 1) + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"transposed-conv produces empty output from {x}")
        return TensorShape(n, layer.out_channels, oh, ow)

    if kind in POOL_KINDS:
        oh, ow = _window_out(h, kh, sh, ph), _window_out(w, kw, sw, pw)
        if oh < 1 or ow < 1:
            raise ShapeError(f"{kind} produces empty output from {x}")
        return TensorShape(n, c, oh, ow)

    if kind in ("batchnorm", "relu"):
        return x

    if kind == "channel-shuffle":
        if c % layer.groups:
            raise ShapeError(f"channel-shuffle groups={layer.groups} must divide {c}")
        return x

    if kind == "elementwise-add":
        for other in input_shapes[1:]:
            if other != x:
                raise ShapeError(f"elementwise-add of mismatched shapes {x} and {other}")
        return x

    if kind == "concat":
        for other in input_shapes[1:]:
            if (other.batch, other.height, other.width) != (n, h, w):
                raise ShapeError(f"concat of mismatched shapes {x} and {other}")
        return TensorShape(n, sum(s.channels for s in input_shapes), h, w)

    if kind == "bilinear-resize":
        return TensorShape(n, c, h * layer.scale, w * layer.scale)

    if kind == "global-pool":
        return TensorShape(n, c, 1, 1)

    raise GraphError(f"unhandled kind {kind}")  # pragma: no cover


def _as_input_map(graph: NetworkGraph, input_shapes) -> dict[str, TensorShape]:
    if input_shapes is None:
        input_shapes = (1, None, 64, 128)
    if isinstance(input_shapes, Mapping):
        return dict(input_shapes)
    shape = tuple(input_shapes)
    out = {}
    for i in graph.inputs:
        spec = graph[i].layer
        c = spec.out_channels if shape[1] is None else shape[1]
        out[i] = TensorShape(shape[0], c, shape[2], shape[3])
    return out


def infer_shapes(graph: NetworkGraph, input_shapes=None) -> dict[str, TensorShape]:
    """Shape of every node.  ``input_shapes`` is a TensorShape (applied to all
    graph inputs) or a mapping input-id -> TensorShape.  Raises on the first error."""
    shapes = _as_input_map(graph, input_shapes)
    for nid in graph.topological_order():
        node = graph[nid]
        if node.layer.kind == "input":
            if nid not in shapes:
                raise ShapeError(f"no shape given for graph input {nid!r}")
            s = shapes[nid]
            if s.channels != node.layer.out_channels:
                raise ShapeError(f"input {nid!r} declares {node.layer.out_channels} channels, got {s}")
            continue
        try:
            shapes[nid] = infer_shape(node.layer, [shapes[i] for i in node.inputs])
        except ShapeError as exc:
            raise ShapeError(f"{nid}: {exc}") from None
    return shapes


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    kind: str  # cycle | dangling-input | duplicate-id | unreachable | no-inputs | shape-mismatch | divisibility | bad-reference
    node: str | None
    message: str

    def __str__(self):
        return f"[{self.kind}] {self.node}: {self.message}"


def validate_graph(graph: NetworkGraph, input_shapes=None) -> list[Violation]:
    """Every structural and shape violation in ``graph``; an empty list means valid.

    Shapes are propagated from ``input_shapes`` (default ``(1, C, 64, 128)``).
    Nodes downstream of a failing node are not re-reported.
    """
    out: list[Violation] = []
    seen: set[str] = set()
    for n in graph.nodes:
        if n.id in seen:
            out.append(Violation("duplicate-id", n.id, "node id used more than once"))
        seen.add(n.id)

    ids = {n.id for n in graph.nodes}
    dangling = False
    for n in graph.nodes:
        for i in n.inputs:
            if i not in ids:
                out.append(Violation("dangling-input", n.id, f"input {i!r} does not exist"))
                dangling = True
        if n.layer.kind == "input":
            if n.inputs:
                out.append(Violation("bad-reference", n.id, "input nodes take no inputs"))
        elif not n.inputs:
            out.append(Violation("no-inputs", n.id, f"{n.layer.kind} node has no inputs"))
    for i in graph.inputs:
        if i not in ids or graph[i].layer.kind != "input":
            out.append(Violation("bad-reference", i, "graph input is not an input node"))
    for o in graph.outputs:
        if o not in ids:
            out.append(Violation("bad-reference", o, "graph output does not exist"))

    ts = graphlib.TopologicalSorter()
    for n in graph.nodes:
        ts.add(n.id, *[i for i in n.inputs if i in ids])
    try:
        order = list(ts.static_order())
    except graphlib.CycleError as exc:
        cyc = exc.args[1]
        out.append(Violation("cycle", cyc[0], "cycle: " + " -> ".join(cyc)))
        return out

    # reachability from declared inputs
    reach = set(i for i in graph.inputs if i in ids)
    for nid in order:
        node = graph[nid]
        if any(i in reach for i in node.inputs):
            reach.add(nid)
    for n in graph.nodes:
        if n.id not in reach and not dangling:
            out.append(Violation("unreachable", n.id, "not reachable from any graph input"))

    try:
        shapes = _as_input_map(graph, input_shapes)
    except (ShapeError, GraphError) as exc:
        out.append(Violation("shape-mismatch", None, str(exc)))
        return out
    for nid in order:
        node = graph[nid]
        if node.layer.kind == "input":
            continue
        if not node.inputs or any(i not in shapes for i in node.inputs):
            continue
        try:
            shapes[nid] = infer_shape(node.layer, [shapes[i] for i in node.inputs])
        except ShapeError as exc:
            msg = str(exc)
            vk = "divisibility" if ("groups" in msg and "divide" in msg) or "depthwise" in msg else "shape-mismatch"
            out.append(Violation(vk, nid, msg))
    return out


# ---------------------------------------------------------------------------
# strides and receptive fields
# ---------------------------------------------------------------------------

def _node_stride_factor(layer: LayerSpec) -> Fraction:
    """Multiplicative change of effective stride across one layer."""
    if layer.kind == "transposed-conv":
        return Fraction(1, layer.stride[0])
    if layer.kind == "bilinear-resize":
        return Fraction(1, layer.scale)
    if layer.kind in _WINDOWED:
        return Fraction(layer.stride[0])
    return Fraction(1)


def effective_strides(graph: NetworkGraph) -> dict[str, Fraction]:
    """Effective (input-to-node) stride of every node, as exact fractions.

    Raises StrideError when two paths into a node disagree.
    """
    out: dict[str, Fraction] = {}
    for nid in graph.topological_order():
        node = graph[nid]
        if node.layer.kind == "input":
            out[nid] = Fraction(1)
            continue
        incoming = {out[i] for i in node.inputs}
        if len(incoming) != 1:
            raise StrideError(
                f"inconsistent strides into {nid!r}: {sorted(str(s) for s in incoming)}")
        s = incoming.pop()
        out[nid] = s * _node_stride_factor(node.layer)
    return out


def effective_stride(graph: NetworkGraph, node: str) -> int:
    """Downsampling factor between the graph input and ``node``'s output."""
    graph[node]
    s = effective_strides(graph)[node]
    if s.denominator != 1:
        raise StrideError(f"node {node!r} is upsampled beyond input resolution (stride {s})")
    return int(s)


def receptive_field(graph: NetworkGraph, node: str) -> tuple[int, int]:
    """Receptive field (rf_h, rf_w) in input pixels of one output pixel of ``node``.

    Each windowed layer adds ``dilation*(k-1)*jump`` where jump is the product of
    preceding strides; fusion nodes take the max over their inputs.
    """
    graph[node]
    rf: dict[str, tuple[Fraction, Fraction]] = {}
    jump: dict[str, tuple[Fraction, Fraction]] = {}
    for nid in graph.topological_order():
        n = graph[nid]
        L = n.layer
        if L.kind == "input":
            rf[nid] = (Fraction(1), Fraction(1))
            jump[nid] = (Fraction(1), Fraction(1))
            continue
        r_in = tuple(max(rf[i][a] for i in n.inputs) for a in (0, 1))
        j_in = tuple(min(jump[i][a] for i in n.inputs) for a in (0, 1))
        if L.kind == "transposed-conv":
            j_out = tuple(j_in[a] / L.stride[a] for a in (0, 1))
            # each output pixel sees ceil(k/s) input positions per axis
            r_out = tuple(r_in[a] + (-(-L.kernel[a] // L.stride[a]) - 1) * j_in[a] for a in (0, 1))
        elif L.kind in _WINDOWED:
            r_out = tuple(r_in[a] + L.dilation * (L.kernel[a] - 1) * j_in[a] for a in (0, 1))
            j_out = tuple(j_in[a] * L.stride[a] for a in (0, 1))
        elif L.kind == "bilinear-resize":
            j_out = tuple(j / L.scale for j in j_in)
            r_out = tuple(r_in[a] + j_in[a] for a in (0, 1))
        elif L.kind == "global-pool":
            r_out, j_out = r_in, j_in  # unbounded in principle; input extent unknown here
        else:
            r_out, j_out = r_in, j_in
        rf[nid], jump[nid] = r_out, j_out
    r = rf[node]
    return (int(-(-r[0] // 1)), int(-(-r[1] // 1)))


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------

_DEFAULT = LayerSpec("relu")


def _fmt_pair(p):
    return f"{p[0]}x{p[1]}"


def _dump_node(n: Node) -> str:
    L = n.layer
    parts = [n.id, L.kind]
    if L.kind in _WINDOWED:
        parts += [f"kernel={_fmt_pair(L.kernel)}", f"stride={_fmt_pair(L.stride)}",
                  f"padding={_fmt_pair(L.padding)}"]
    else:
        for name in ("kernel", "stride", "padding"):
            v = getattr(L, name)
            if v != getattr(_DEFAULT, name):
                parts.append(f"{name}={_fmt_pair(v)}")
    if L.dilation != 1 or L.kind in CONV_KINDS:
        parts.append(f"dilation={L.dilation}")
    if L.out_channels is not None:
        parts.append(f"out_channels={L.out_channels}")
    if L.groups != 1 or L.kind in CONV_KINDS or L.kind == "channel-shuffle":
        parts.append(f"groups={L.groups}")
    if L.has_bias or L.kind in CONV_KINDS:
        parts.append(f"bias={int(L.has_bias)}")
    if L.scale != 1:
        parts.append(f"scale={L.scale}")
    parts.append("inputs=[" + ",".join(n.inputs) + "]")
    return " ".join(parts)


def dumps(graph: NetworkGraph) -> str:
    """Line-oriented text: ``id kind key=value... inputs=[ids]``, one node per line."""
    lines = ["@inputs=[" + ",".join(graph.inputs) + "]",
             "@outputs=[" + ",".join(graph.outputs) + "]"]
    lines += [_dump_node(n) for n in graph.nodes]
    return "\n".join(lines) + "\n"


def _parse_list(v: str) -> tuple[str, ...]:
    if not (v.startswith("[") and v.endswith("]")):
        raise GraphError(f"expected [..] list, got {v!r}")
    body = v[1:-1].strip()
    return tuple(x.strip() for x in body.split(",")) if body else ()


def loads(text: str) -> NetworkGraph:
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    nodes: list[Node] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("@"):
            key, _, val = line[1:].partition("=")
            if key == "inputs":
                inputs = _parse_list(val)
            elif key == "outputs":
                outputs = _parse_list(val)
            else:
                raise GraphError(f"line {lineno}: unknown directive {key!r}")
            continue
        toks = line.split()
        if len(toks) < 3:
            raise GraphError(f"line {lineno}: expected 'id kind ... inputs=[..]'")
        nid, kind, *kvs = toks
        kw: dict = {}
        node_inputs: tuple[str, ...] | None = None
        for kv in kvs:
            key, eq, val = kv.partition("=")
            if not eq:
                raise GraphError(f"line {lineno}: malformed token {kv!r}")
            if key == "inputs":
                node_inputs = _parse_list(val)
            elif key in ("kernel", "stride", "padding"):
                a, _, b = val.partition("x")
                kw[key] = (int(a), int(b))
            elif key in ("dilation", "out_channels", "groups", "scale"):
                kw[key] = int(val)
            elif key == "bias":
                kw["has_bias"] = bool(int(val))
            else:
                raise GraphError(f"line {lineno}: unknown key {key!r}")
        if node_inputs is None:
            raise GraphError(f"line {lineno}: missing inputs=[..]")
        nodes.append(Node(nid, LayerSpec(kind, **kw), node_inputs))
    return NetworkGraph(tuple(nodes), inputs, outputs)


def replace_layer(graph: NetworkGraph, node_id: str, **changes) -> NetworkGraph:
    """Copy of ``graph`` with one node's LayerSpec fields changed."""
    nodes = tuple(Node(n.id, replace(n.layer, **changes), n.inputs) if n.id == node_id else n
                  for n in graph.nodes)
    return NetworkGraph(nodes, graph.inputs, graph.outputs)


def remove_node(graph: NetworkGraph, node_id: str) -> NetworkGraph:
    """Drop a single-input node, rewiring its consumers to its input."""
    node = graph[node_id]
    if len(node.inputs) != 1:
        raise GraphError(f"can only remove single-input nodes, {node_id!r} has {len(node.inputs)}")
    src = node.inputs[0]
    nodes = tuple(Node(n.id, n.layer, tuple(src if i == node_id else i for i in n.inputs))
                  for n in graph.nodes if n.id != node_id)
    outputs = tuple(src if o == node_id else o for o in graph.outputs)
    return NetworkGraph(nodes, graph.inputs, outputs)


def conv_nodes(graph: NetworkGraph, kinds: Iterable[str] = CONV_KINDS) -> list[Node]:
    kinds = set(kinds)
    return [n for n in graph.nodes if n.layer.kind in kinds]
