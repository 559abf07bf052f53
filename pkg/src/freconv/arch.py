"""Architecture graphs: construction, JSON round-trip, shape propagation, execution.

A graph is an ordered list of nodes; each node names its predecessors, and the
pseudo-id ``"input"`` stands for the network input. Every node's output is a
rank-4 tensor, the classifier head emits ``[n, classes, 1, 1]`` and
:func:`execute` squeezes that to ``[n, classes]``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import layer, ops
from .errors import ConfigError, FreConvError, GraphError, ParameterError
from .layer import FreConvConfig
from .ops import BNStats, ConvSpec
from .tensor import Rng

INPUT = "input"
KINDS = ("conv", "freconv", "batchnorm", "activation", "pool", "gap", "linear", "add", "concat")
FAMILIES = ("resnet50", "resnet101", "resnet152", "vgg16", "densenet121")
RESNET_BLOCKS = {"resnet50": (3, 4, 6, 3), "resnet101": (3, 4, 23, 3), "resnet152": (3, 8, 36, 3)}
VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
DENSENET121_BLOCKS = (6, 12, 24, 16)


@dataclass
class LayerNode:
    id: str
    kind: str
    spec: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind, "spec": self.spec, "inputs": list(self.inputs)}

    def conv_spec(self) -> ConvSpec:
        return ConvSpec(**self.spec)

    def freconv_config(self) -> FreConvConfig:
        return FreConvConfig.from_dict(self.spec)


@dataclass
class ArchGraph:
    name: str
    nodes: list
    input_shape: tuple
    classes: int
    stage_of: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.validate()

    def validate(self):
        seen = set()
        consumed = set()
        for node in self.nodes:
            if node.kind not in KINDS:
                raise GraphError(f"unknown node kind {node.kind!r}", node.id)
            if node.id in seen or node.id == INPUT:
                raise GraphError("duplicate node id", node.id)
            if not node.inputs:
                raise GraphError("node has no inputs", node.id)
            for src in node.inputs:
                if src != INPUT and src not in seen:
                    raise GraphError(f"input {src!r} is not an earlier node", node.id)
                consumed.add(src)
            seen.add(node.id)
        terminals = [n.id for n in self.nodes if n.id not in consumed]
        if len(terminals) != 1:
            raise GraphError(f"graph must have exactly one terminal node, found {terminals}")
        if self.nodes and terminals[0] != self.nodes[-1].id:
            raise GraphError("the terminal node must come last", terminals[0])

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def count(self, kind: str, **match) -> int:
        return sum(1 for n in self.nodes if n.kind == kind and all(n.spec.get(k) == v for k, v in match.items()))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "stage_of": dict(self.stage_of),
            "nodes": [n.to_dict() for n in self.nodes],
        }

    def to_json(self, indent=None) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchGraph":
        nodes = [LayerNode(n["id"], n["kind"], dict(n.get("spec", {})), list(n["inputs"])) for n in d["nodes"]]
        return cls(d["name"], nodes, tuple(d["input_shape"]), int(d["classes"]), dict(d.get("stage_of", {})))

    @classmethod
    def from_json(cls, text: str) -> "ArchGraph":
        return cls.from_dict(json.loads(text))


# -- construction --------------------------------------------------------------

def stage_kernel_schedule(stage: int) -> tuple:
    """Kernel set of a stage: the largest kernel is dropped at every new stage."""
    if stage < 1:
        raise ParameterError(f"stages are 1-based, got {stage}")
    full = layer.ALLOWED_KERNELS
    return full[:max(1, len(full) - (stage - 1))]


@dataclass(frozen=True)
class VariantOptions:
    """Network-wide FreConv settings; channel counts and strides come from the host."""
    n_split: int = 2
    mode: str = "gck"
    base_group: int = 2
    attn_reduction: int = 16
    split_mode: str = "attention"
    branch_mode: str = "asymmetric"
    downsample: str = "strided"

    def __post_init__(self):
        if self.downsample not in ("strided", "pool"):
            raise ConfigError(f"downsample must be 'strided' or 'pool', got {self.downsample!r}")

    def config(self, cin, cout, stride, stage) -> FreConvConfig:
        return FreConvConfig(cin, cout, stride, self.n_split, stage_kernel_schedule(stage), self.mode,
                             self.base_group, self.attn_reduction, self.split_mode, self.branch_mode)


class _Builder:
    def __init__(self, variant: str, options: VariantOptions):
        if variant not in ("baseline", "freconv"):
            raise ParameterError(f"variant must be 'baseline' or 'freconv', got {variant!r}")
        self.variant = variant
        self.options = options
        self.nodes = []
        self.stage_of = {}
        self.stage = 0

    def add(self, kind, spec, inputs, name):
        if isinstance(inputs, str):
            inputs = [inputs]
        self.nodes.append(LayerNode(name, kind, spec, list(inputs)))
        self.stage_of[name] = self.stage
        return name

    def conv(self, src, name, cin, cout, k, stride=1, padding=None, groups=1, bias=False):
        pad = k // 2 if padding is None else padding
        spec = dict(in_channels=cin, out_channels=cout, kernel=k, stride=stride, padding=pad,
                    dilation=1, groups=groups, has_bias=bias)
        return self.add("conv", spec, src, name)

    def conv3x3(self, src, name, cin, cout, stride=1, bias=False):
        """A vanilla 3x3 conv, or a FreConv in the FreConv variant when the channels allow it."""
        if self.variant == "freconv":
            try:
                cfg = self.options.config(cin, cout, stride, self.stage)
            except ConfigError:
                cfg = None  # e.g. the 3-channel first layer of VGG cannot be split
            if cfg is not None:
                return self.add("freconv", cfg.to_dict(), src, name)
        return self.conv(src, name, cin, cout, 3, stride, 1, bias=bias)

    def downsample(self, src, name, channels, k=3, stride=2, padding=1, bias=False):
        """Max-pool, or a strided convolution replacing it in the FreConv variant."""
        if self.variant == "freconv" and self.options.downsample == "strided":
            return self.conv(src, name, channels, channels, 3, stride, 1, bias=bias)
        return self.add("pool", dict(mode="max", kernel=k, stride=stride, padding=padding), src, name)

    def bn(self, src, name, channels):
        return self.add("batchnorm", dict(channels=channels), src, name)

    def relu(self, src, name):
        return self.add("activation", dict(kind="relu"), src, name)

    def linear(self, src, name, fin, fout):
        return self.add("linear", dict(in_features=fin, out_features=fout), src, name)


def _resnet(b: _Builder, blocks, classes, input_shape):
    c, h, w = input_shape
    x = b.conv(INPUT, "stem.conv", c, 64, 7, 2, 3)
    x = b.bn(x, "stem.bn", 64)
    x = b.relu(x, "stem.relu")
    x = b.downsample(x, "stem.pool", 64)
    cin = 64
    for si, (nblocks, width) in enumerate(zip(blocks, (64, 128, 256, 512)), start=1):
        b.stage = si
        for bi in range(nblocks):
            stride = 2 if (bi == 0 and si > 1) else 1
            p = f"layer{si}.{bi}"
            identity = x
            y = b.conv(x, f"{p}.conv1", cin, width, 1, 1, 0)
            y = b.bn(y, f"{p}.bn1", width)
            y = b.relu(y, f"{p}.relu1")
            y = b.conv3x3(y, f"{p}.conv2", width, width, stride)
            y = b.bn(y, f"{p}.bn2", width)
            y = b.relu(y, f"{p}.relu2")
            y = b.conv(y, f"{p}.conv3", width, width * 4, 1, 1, 0)
            y = b.bn(y, f"{p}.bn3", width * 4)
            if stride != 1 or cin != width * 4:
                identity = b.conv(x, f"{p}.downsample.conv", cin, width * 4, 1, stride, 0)
                identity = b.bn(identity, f"{p}.downsample.bn", width * 4)
            y = b.add("add", {}, [y, identity], f"{p}.add")
            x = b.relu(y, f"{p}.relu3")
            cin = width * 4
    b.stage = len(blocks) + 1
    x = b.add("gap", {}, x, "head.gap")
    b.linear(x, "head.fc", cin, classes)


def _vgg16(b: _Builder, classes, input_shape):
    c, h, w = input_shape
    x, cin, stage, ci = INPUT, c, 1, 0
    for v in VGG16_CFG:
        b.stage = stage
        if v == "M":
            x = b.downsample(x, f"block{stage}.pool", cin, 2, 2, 0, bias=True)
            h, w = h // 2, w // 2
            stage += 1
            ci = 0
            continue
        ci += 1
        x = b.conv3x3(x, f"block{stage}.conv{ci}", cin, v, bias=True)
        x = b.relu(x, f"block{stage}.relu{ci}")
        cin = v
    b.stage = stage
    x = b.linear(x, "classifier.fc1", cin * h * w, 4096)
    x = b.relu(x, "classifier.relu1")
    x = b.linear(x, "classifier.fc2", 4096, 4096)
    x = b.relu(x, "classifier.relu2")
    b.linear(x, "classifier.fc3", 4096, classes)


def _densenet121(b: _Builder, classes, input_shape, growth=32, bn_size=4):
    c, _, _ = input_shape
    x = b.conv(INPUT, "stem.conv", c, 64, 7, 2, 3)
    x = b.bn(x, "stem.bn", 64)
    x = b.relu(x, "stem.relu")
    x = b.downsample(x, "stem.pool", 64)
    cin = 64
    for si, nlayers in enumerate(DENSENET121_BLOCKS, start=1):
        b.stage = si
        for li in range(nlayers):
            p = f"block{si}.layer{li}"
            y = b.bn(x, f"{p}.bn1", cin)
            y = b.relu(y, f"{p}.relu1")
            y = b.conv(y, f"{p}.conv1", cin, bn_size * growth, 1, 1, 0)
            y = b.bn(y, f"{p}.bn2", bn_size * growth)
            y = b.relu(y, f"{p}.relu2")
            y = b.conv3x3(y, f"{p}.conv2", bn_size * growth, growth)
            x = b.add("concat", {}, [x, y], f"{p}.concat")
            cin += growth
        if si < len(DENSENET121_BLOCKS):
            p = f"transition{si}"
            y = b.bn(x, f"{p}.bn", cin)
            y = b.relu(y, f"{p}.relu")
            y = b.conv(y, f"{p}.conv", cin, cin // 2, 1, 1, 0)
            x = b.add("pool", dict(mode="avg", kernel=2, stride=2, padding=0), y, f"{p}.pool")
            cin //= 2
    b.stage = len(DENSENET121_BLOCKS) + 1
    x = b.bn(x, "head.bn", cin)
    x = b.relu(x, "head.relu")
    x = b.add("gap", {}, x, "head.gap")
    b.linear(x, "head.fc", cin, classes)


def build_arch(family: str, variant: str = "baseline", options: VariantOptions | None = None,
               classes: int = 1000, input_shape=(3, 224, 224)) -> ArchGraph:
    """Baseline network of ``family`` or its FreConv variant.

    The FreConv variant turns every 3x3 conv whose channels admit a split into
    a FreConv node (kernel set by stage) and every max-pool into a stride-2
    3x3 conv, unless ``options.downsample == "pool"``.
    """
    options = options or VariantOptions()
    b = _Builder(variant, options)
    if family in RESNET_BLOCKS:
        _resnet(b, RESNET_BLOCKS[family], classes, input_shape)
    elif family == "vgg16":
        _vgg16(b, classes, input_shape)
    elif family == "densenet121":
        _densenet121(b, classes, input_shape)
    else:
        raise ParameterError(f"unknown family {family!r}; choose from {FAMILIES}")
    suffix = "" if variant == "baseline" else f"-freconv-{options.mode}-n{options.n_split}"
    graph = ArchGraph(family + suffix, b.nodes, input_shape, classes, b.stage_of)
    infer_shapes(graph)
    return graph


def build_toy(in_channels=1, image_size=64, classes=2, widths=(8, 16, 24), options: VariantOptions | None = None,
              name="toy-freconv") -> ArchGraph:
    """Stem conv, two stride-2 FreConv blocks (stages 1 and 2), GAP, linear."""
    options = options or VariantOptions(attn_reduction=4)
    b = _Builder("freconv", options)
    c0, c1, c2 = widths
    x = b.conv(INPUT, "stem.conv", in_channels, c0, 3, 1, 1)
    x = b.bn(x, "stem.bn", c0)
    x = b.relu(x, "stem.relu")
    cin = c0
    for si, cout in enumerate((c1, c2), start=1):
        b.stage = si
        x = b.add("freconv", options.config(cin, cout, 2, si).to_dict(), x, f"block{si}.freconv")
        x = b.relu(x, f"block{si}.relu")
        cin = cout
    b.stage = 3
    x = b.add("gap", {}, x, "head.gap")
    b.linear(x, "head.fc", cin, classes)
    graph = ArchGraph(name, b.nodes, (in_channels, image_size, image_size), classes, b.stage_of)
    infer_shapes(graph)
    return graph


def with_options(graph: ArchGraph, **changes) -> ArchGraph:
    """Copy of ``graph`` with FreConv node settings (e.g. split_mode) replaced."""
    nodes = []
    for n in graph.nodes:
        spec = dict(n.spec)
        if n.kind == "freconv":
            spec = replace(n.freconv_config(), **changes).to_dict()
        nodes.append(LayerNode(n.id, n.kind, spec, list(n.inputs)))
    return ArchGraph(graph.name, nodes, graph.input_shape, graph.classes, dict(graph.stage_of))


# -- shape propagation ---------------------------------------------------------

def _node_shape(node: LayerNode, shapes_in: list) -> tuple:
    kind, spec = node.kind, node.spec
    c, h, w = shapes_in[0]
    if kind == "conv":
        cs = node.conv_spec()
        if c != cs.in_channels:
            raise GraphError(f"expects {cs.in_channels} channels, gets {c}", node.id)
        oh, ow = cs.output_hw(h, w)
        if oh < 1 or ow < 1:
            raise GraphError(f"non-positive output extent {oh}x{ow}", node.id)
        return (cs.out_channels, oh, ow)
    if kind == "freconv":
        cfg = node.freconv_config()
        if c != cfg.in_channels:
            raise GraphError(f"expects {cfg.in_channels} channels, gets {c}", node.id)
        oh, ow = cfg.output_hw(h, w)
        for _, sub in cfg.sub_convs():
            if sub.output_hw(h, w) != (oh, ow):
                raise GraphError("branch outputs disagree in spatial size", node.id)
        return (cfg.out_channels, oh, ow)
    if kind == "batchnorm":
        if c != spec["channels"]:
            raise GraphError(f"expects {spec['channels']} channels, gets {c}", node.id)
        return (c, h, w)
    if kind == "activation":
        return (c, h, w)
    if kind == "pool":
        k, s, p = spec["kernel"], spec["stride"], spec.get("padding", 0)
        oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise GraphError(f"non-positive output extent {oh}x{ow}", node.id)
        return (c, oh, ow)
    if kind == "gap":
        return (c, 1, 1)
    if kind == "linear":
        if c * h * w != spec["in_features"]:
            raise GraphError(f"expects {spec['in_features']} features, gets {c * h * w}", node.id)
        return (spec["out_features"], 1, 1)
    if kind == "add":
        if any(s != shapes_in[0] for s in shapes_in):
            raise GraphError(f"add inputs disagree: {shapes_in}", node.id)
        return shapes_in[0]
    if kind == "concat":
        if any(s[1:] != (h, w) for s in shapes_in):
            raise GraphError(f"concat inputs disagree spatially: {shapes_in}", node.id)
        return (sum(s[0] for s in shapes_in), h, w)
    raise GraphError(f"unknown node kind {kind!r}", node.id)


def infer_shapes(graph: ArchGraph, input_shape=None) -> dict:
    """Output ``(c, h, w)`` of every node, computed without touching data."""
    shapes = {INPUT: tuple(input_shape or graph.input_shape)}
    for node in graph.nodes:
        try:
            shapes[node.id] = _node_shape(node, [shapes[s] for s in node.inputs])
        except GraphError:
            raise
        except (FreConvError, KeyError, TypeError) as e:
            raise GraphError(str(e), node.id) from e
    return shapes


# -- parameters ----------------------------------------------------------------

def init_graph_params(graph: ArchGraph, seed: int, dtype=np.float64):
    """``(params, buffers)``: per-node dicts of learnable arrays and running statistics."""
    root = Rng(seed)
    params, buffers = {}, {}
    for i, node in enumerate(graph.nodes):
        rng = root.spawn(i)
        if node.kind == "conv":
            cs = node.conv_spec()
            fan_in = cs.weight_shape[1] * cs.kernel ** 2
            p = {"w": rng.normal(0.0, math.sqrt(2.0 / fan_in), cs.weight_shape).astype(dtype)}
            if cs.has_bias:
                p["b"] = np.zeros(cs.out_channels, dtype)
            params[node.id] = p
        elif node.kind == "freconv":
            params[node.id], buffers[node.id] = layer.init_params(node.freconv_config(), rng, dtype)
        elif node.kind == "batchnorm":
            ch = node.spec["channels"]
            params[node.id] = {"gamma": np.ones(ch, dtype), "beta": np.zeros(ch, dtype)}
            buffers[node.id] = {"mean": np.zeros(ch, dtype), "var": np.ones(ch, dtype)}
        elif node.kind == "linear":
            fin, fout = node.spec["in_features"], node.spec["out_features"]
            bound = 1.0 / math.sqrt(fin)
            params[node.id] = {"w": rng.uniform(-bound, bound, (fout, fin)).astype(dtype),
                               "b": np.zeros(fout, dtype)}
    return params, buffers


# -- execution -----------------------------------------------------------------

def _forward_node(node, xs, p, buf, mode):
    kind, spec = node.kind, node.spec
    x = xs[0]
    if kind == "conv":
        cs = node.conv_spec()
        out, cols = ops.conv_forward_cached(x, cs, p["w"], p.get("b") if cs.has_bias else None)
        return out, (cols, x.shape, cs)
    if kind == "freconv":
        cfg = node.freconv_config()
        out, cache = layer.freconv_forward(x, cfg, p, buf, mode, return_cache=True)
        return out, (cache, cfg)
    if kind == "batchnorm":
        stats = BNStats(buf["mean"], buf["var"]) if buf else BNStats.fresh(x.shape[1], x.dtype)
        return ops.batchnorm_forward(x, p["gamma"], p["beta"], stats, mode, return_cache=True)
    if kind == "activation":
        if spec["kind"] == "relu":
            return ops.relu(x), x
        y = ops.sigmoid(x)
        return y, y
    if kind == "pool":
        k, s, pad = spec["kernel"], spec["stride"], spec.get("padding", 0)
        if spec["mode"] == "max":
            out, arg = ops.max_pool_forward(x, k, s, pad)
            return out, (x.shape, arg)
        return ops.avg_pool_forward(x, k, s, pad), x.shape
    if kind == "gap":
        return ops.global_avg_pool(x), x.shape
    if kind == "linear":
        out = ops.linear_forward(x, p["w"], p["b"])
        return out.reshape(out.shape[0], -1, 1, 1), x
    if kind == "add":
        out = xs[0].copy()
        for other in xs[1:]:
            out += other
        return out, len(xs)
    if kind == "concat":
        return np.concatenate(xs, axis=1), [a.shape[1] for a in xs]
    raise GraphError(f"unknown node kind {kind!r}", node.id)


def _backward_node(node, cache, p, g):
    """Gradients w.r.t. each input of ``node`` and w.r.t. its parameters."""
    kind, spec = node.kind, node.spec
    if kind == "conv":
        cols, x_shape, cs = cache
        gx, gw, gb = ops.conv_backward_cached(cols, x_shape, cs, p["w"], g)
        pg = {"w": gw}
        if cs.has_bias:
            pg["b"] = gb
        return [gx], pg
    if kind == "freconv":
        fc, cfg = cache
        gx, pg = layer.freconv_backward(fc, cfg, p, g)
        return [gx], pg
    if kind == "batchnorm":
        gx, gg, gb = ops.batchnorm_backward(cache, g)
        return [gx], {"gamma": gg, "beta": gb}
    if kind == "activation":
        if spec["kind"] == "relu":
            return [ops.relu_backward(cache, g)], {}
        return [ops.sigmoid_backward(cache, g)], {}
    if kind == "pool":
        k, s, pad = spec["kernel"], spec["stride"], spec.get("padding", 0)
        if spec["mode"] == "max":
            x_shape, arg = cache
            return [ops.max_pool_backward(x_shape, arg, g, k, s, pad)], {}
        return [ops.avg_pool_backward(cache, g, k, s, pad)], {}
    if kind == "gap":
        return [ops.global_avg_pool_backward(cache, g)], {}
    if kind == "linear":
        gx, gw, gb = ops.linear_backward(cache, p["w"], g.reshape(g.shape[0], -1))
        return [gx], {"w": gw, "b": gb}
    if kind == "add":
        return [g] * cache, {}
    if kind == "concat":
        return np.split(g, np.cumsum(cache)[:-1], axis=1), {}
    raise GraphError(f"unknown node kind {kind!r}", node.id)


@dataclass
class Trace:
    """Forward record needed by :func:`backward`."""
    caches: dict
    outputs: dict | None = None


def forward(graph: ArchGraph, x, params, buffers=None, mode="eval", keep=None, trace=False):
    """Run the graph; returns logits ``[n, classes]`` and optionally a :class:`Trace`.

    ``keep`` lists node ids whose outputs are retained in ``Trace.outputs``.
    Intermediate tensors are freed once their last consumer has run.
    """
    if x.ndim != 4:
        raise GraphError(f"input must be rank 4, got shape {x.shape}")
    if tuple(x.shape[1:]) != graph.input_shape:
        infer_shapes(graph, x.shape[1:])  # raises on an incompatible resolution
    buffers = buffers or {}
    last_use = {}
    for i, node in enumerate(graph.nodes):
        for s in node.inputs:
            last_use[s] = i
    values = {INPUT: x}
    caches = {}
    kept = {}
    keep = set(keep or ())
    for i, node in enumerate(graph.nodes):
        try:
            xs = [values[s] for s in node.inputs]
            out, cache = _forward_node(node, xs, params.get(node.id, {}), buffers.get(node.id), mode)
        except GraphError:
            raise
        except (FreConvError, ValueError) as e:
            raise GraphError(str(e), node.id) from e
        if trace:
            caches[node.id] = cache
        if node.id in keep:
            kept[node.id] = out
        values[node.id] = out
        for s in node.inputs:
            if last_use.get(s) == i:
                del values[s]
    logits = values[graph.nodes[-1].id]
    logits = logits.reshape(logits.shape[0], -1)
    if trace or keep:
        return logits, Trace(caches, kept)
    return logits


def execute(graph: ArchGraph, x, params, buffers=None, mode="eval"):
    """Logits ``[n, classes]`` for input ``x`` of shape ``[n, *graph.input_shape]``."""
    return forward(graph, x, params, buffers, mode)


def backward(graph: ArchGraph, trace: Trace, params, grad_logits, need_input=False):
    """Parameter gradients (keyed like ``params``) given d(loss)/d(logits)."""
    last = graph.nodes[-1]
    grads_act = {last.id: grad_logits.reshape(grad_logits.shape[0], -1, 1, 1)}
    grads = {}
    for node in reversed(graph.nodes):
        g = grads_act.pop(node.id, None)
        if g is None:
            continue
        try:
            gins, pg = _backward_node(node, trace.caches[node.id], params.get(node.id, {}), g)
        except (FreConvError, ValueError) as e:
            raise GraphError(str(e), node.id) from e
        if pg:
            grads[node.id] = pg
        for src, gi in zip(node.inputs, gins):
            if src == INPUT and not need_input:
                continue
            if src in grads_act:
                grads_act[src] = grads_act[src] + gi
            else:
                grads_act[src] = gi
    if need_input:
        return grads, grads_act.get(INPUT)
    return grads
