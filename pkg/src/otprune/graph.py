"""Network intermediate representation: typed layer nodes wired into a DAG.

Tensors live on the nodes as float32 arrays (the on-disk dtype), so a
save/load round trip is bit exact.  Numerical kernels upcast to float64.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

KINDS = (
    "Input", "Output", "Conv2D", "Linear", "BatchNorm", "ReLU", "AvgPool",
    "MaxPool", "GlobalAvgPool", "Add", "Concat", "ChannelSelect",
)

# tensor slots per kind, in sidecar order
TENSOR_SLOTS = {
    "Conv2D": ("weight", "bias"),
    "Linear": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta", "running_mean", "running_var"),
}

# kinds whose output channel layout is a per-channel copy of the input
PASSTHROUGH = ("ReLU", "AvgPool", "MaxPool", "GlobalAvgPool")
JUNCTIONS = ("Add", "Concat")


class GraphError(ValueError):
    pass


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list[str] = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "LayerNode":
        return LayerNode(
            self.name, self.kind, list(self.inputs), copy.deepcopy(self.attrs),
            {k: v.copy() for k, v in self.tensors.items()},
        )

    @property
    def gamma(self) -> np.ndarray:
        return self.tensors["gamma"]


@dataclass
class NetworkGraph:
    nodes: list[LayerNode]
    input_shape: tuple[int, int, int]

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)

    # -- lookup --------------------------------------------------------
    def node(self, name: str) -> LayerNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def index(self) -> dict[str, LayerNode]:
        return {n.name: n for n in self.nodes}

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.name: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src in out:
                    out[src].append(n.name)
        return out

    def of_kind(self, kind: str) -> list[LayerNode]:
        return [n for n in self.nodes if n.kind == kind]

    @property
    def input_node(self) -> LayerNode:
        return self.of_kind("Input")[0]

    @property
    def output_node(self) -> LayerNode:
        return self.of_kind("Output")[0]

    def copy(self) -> "NetworkGraph":
        return NetworkGraph([n.copy() for n in self.nodes], self.input_shape)

    def topo_order(self) -> list[str]:
        """Kahn's algorithm; raises GraphError on a cycle or dangling input."""
        idx = self.index()
        indeg = {n.name: 0 for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                if src not in idx:
                    raise GraphError(f"{n.name}: unknown input {src!r}")
                indeg[n.name] += 1
        cons = self.consumers()
        ready = [n.name for n in self.nodes if indeg[n.name] == 0]
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            for c in cons[name]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            stuck = sorted(k for k, v in indeg.items() if v > 0)
            raise GraphError(f"not acyclic: cycle through {stuck}")
        return order

    def shapes(self) -> dict[str, tuple[int, int, int]]:
        """Output (channels, height, width) of every node.  Assumes a valid graph."""
        shapes: dict[str, tuple[int, int, int]] = {}
        idx = self.index()
        for name in self.topo_order():
            shapes[name] = _infer_shape(idx[name], [shapes[s] for s in idx[name].inputs], self.input_shape)
        return shapes

    # -- parameter views ---------------------------------------------------
    def batchnorms(self) -> list[LayerNode]:
        return self.of_kind("BatchNorm")

    def gammas(self) -> dict[str, np.ndarray]:
        return {n.name: n.gamma for n in self.batchnorms()}

    def num_channels(self) -> dict[str, int]:
        return {n.name: int(n.attrs["channels"]) for n in self.batchnorms()}


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _infer_shape(node: LayerNode, ins: list[tuple], input_shape) -> tuple[int, int, int]:
    a = node.attrs
    k = node.kind
    if k == "Input":
        return tuple(input_shape)
    if k in ("Output", "ReLU", "BatchNorm"):
        return ins[0]
    c, h, w = ins[0]
    if k == "Conv2D":
        kh, kw = a["kernel"]
        return (a["out_channels"], _conv_out(h, kh, a["stride"], a["padding"]),
                _conv_out(w, kw, a["stride"], a["padding"]))
    if k == "Linear":
        return (a["out_features"], 1, 1)
    if k in ("AvgPool", "MaxPool"):
        kk, s, p = a["kernel"], a["stride"], a.get("padding", 0)
        return (c, _conv_out(h, kk, s, p), _conv_out(w, kk, s, p))
    if k == "GlobalAvgPool":
        return (c, 1, 1)
    if k == "Add":
        return ins[0]
    if k == "Concat":
        return (sum(s[0] for s in ins), h, w)
    if k == "ChannelSelect":
        return (int(np.count_nonzero(a["mask"])), h, w)
    raise GraphError(f"{node.name}: unknown layer kind {k!r}")


_ARITY = {"Input": (0, 0), "Output": (1, 1), "Add": (1, None), "Concat": (1, None)}


def validate(graph: NetworkGraph) -> list[str]:
    """Return every violated invariant as ``"<node>: <message>"``; empty means ok."""
    errs: list[str] = []
    names = [n.name for n in graph.nodes]
    seen = set()
    for nm in names:
        if nm in seen:
            errs.append(f"{nm}: duplicate node name")
        seen.add(nm)
    for n in graph.nodes:
        if n.kind not in KINDS:
            errs.append(f"{n.name}: unknown layer kind {n.kind!r}")
    if errs:
        return errs

    for kind in ("Input", "Output"):
        found = graph.of_kind(kind)
        if len(found) != 1:
            errs.append(f"<graph>: expected exactly one {kind} node, found {len(found)}")

    for n in graph.nodes:
        lo, hi = _ARITY.get(n.kind, (1, 1))
        if len(n.inputs) < lo or (hi is not None and len(n.inputs) > hi):
            errs.append(f"{n.name}: {n.kind} takes {lo}..{hi or 'n'} inputs, got {len(n.inputs)}")
        for src in n.inputs:
            if src not in seen:
                errs.append(f"{n.name}: unknown input {src!r}")
        errs.extend(_check_params(n))
    if errs:
        return errs

    try:
        graph.topo_order()
    except GraphError as e:
        return errs + [f"<graph>: {e}"]

    cons = graph.consumers()
    for n in graph.nodes:
        if n.kind != "Output" and not cons[n.name]:
            errs.append(f"{n.name}: output is never consumed")

    idx = graph.index()
    shapes: dict[str, tuple] = {}
    for name in graph.topo_order():
        n = idx[name]
        ins = [shapes.get(s) for s in n.inputs]
        if any(s is None for s in ins):
            continue
        errs.extend(_check_channels(n, ins, idx))
        try:
            shp = _infer_shape(n, ins, graph.input_shape)
        except (GraphError, KeyError, TypeError) as e:
            errs.append(f"{name}: cannot infer shape ({e})")
            continue
        if min(shp) < 1:
            errs.append(f"{name}: empty output shape {shp}")
            continue
        shapes[name] = shp
    return errs


def _check_params(n: LayerNode) -> list[str]:
    a, t, errs = n.attrs, n.tensors, []
    try:
        if n.kind == "Conv2D":
            kh, kw = a["kernel"]
            want = a["out_channels"] * a["in_channels"] * kh * kw
            if t["weight"].size != want:
                errs.append(f"{n.name}: conv weight has {t['weight'].size} entries, expected {want}")
            if "bias" in t and t["bias"].size != a["out_channels"]:
                errs.append(f"{n.name}: conv bias length {t['bias'].size} != out_channels")
            if a["stride"] < 1 or a["padding"] < 0:
                errs.append(f"{n.name}: bad stride/padding")
        elif n.kind == "Linear":
            want = a["out_features"] * a["in_features"]
            if t["weight"].size != want:
                errs.append(f"{n.name}: linear weight has {t['weight'].size} entries, expected {want}")
            if "bias" in t and t["bias"].size != a["out_features"]:
                errs.append(f"{n.name}: linear bias length != out_features")
        elif n.kind == "BatchNorm":
            c = a["channels"]
            for slot in TENSOR_SLOTS["BatchNorm"]:
                if t[slot].size != c:
                    errs.append(f"{n.name}: {slot} length {t[slot].size} != channels {c}")
            if np.any(t["running_var"] < 0):
                errs.append(f"{n.name}: negative running variance")
            if not a["eps"] > 0:
                errs.append(f"{n.name}: eps must be > 0")
        elif n.kind == "ChannelSelect":
            if not np.any(a["mask"]):
                errs.append(f"{n.name}: channel-select mask keeps nothing")
    except KeyError as e:
        errs.append(f"{n.name}: missing field {e}")
    return errs


def _check_channels(n: LayerNode, ins: list[tuple], idx: dict) -> list[str]:
    a, errs = n.attrs, []
    c = ins[0][0] if ins else None
    if n.kind == "Conv2D" and a["in_channels"] != c:
        errs.append(f"{n.inputs[0]}->{n.name}: channel mismatch ({c} produced, {a['in_channels']} expected)")
    elif n.kind == "Linear":
        feats = ins[0][0] * ins[0][1] * ins[0][2]
        if a["in_features"] != feats:
            errs.append(f"{n.inputs[0]}->{n.name}: channel mismatch ({feats} features produced, "
                        f"{a['in_features']} expected)")
    elif n.kind == "BatchNorm":
        if a["channels"] != c:
            errs.append(f"{n.inputs[0]}->{n.name}: channel mismatch ({c} produced, {a['channels']} expected)")
        prod = idx[n.inputs[0]]
        # pre-activation designs put BN behind a junction or a pool; those are
        # still single producers with matching width
        if prod.kind in ("Input", "Output", "BatchNorm"):
            errs.append(f"{n.name}: batch-norm must follow a conv/linear (or junction/pool), got {prod.kind}")
    elif n.kind == "ChannelSelect":
        if len(a["mask"]) != c:
            errs.append(f"{n.inputs[0]}->{n.name}: mask length {len(a['mask'])} != {c} input channels")
    elif n.kind == "Add":
        if len(set(ins)) > 1:
            errs.append(f"{n.name}: add inputs disagree in shape {ins}")
    elif n.kind == "Concat":
        if len({s[1:] for s in ins}) > 1:
            errs.append(f"{n.name}: concat inputs disagree in spatial size {ins}")
    return errs


def check(graph: NetworkGraph) -> NetworkGraph:
    errs = validate(graph)
    if errs:
        raise GraphError("invalid graph:\n  " + "\n  ".join(errs))
    return graph


class GraphBuilder:
    """Small helper for wiring graphs by hand; every method returns the new node name."""

    def __init__(self, input_shape, rng: np.random.Generator | None = None, gamma_init: float = 0.5):
        self.input_shape = tuple(input_shape)
        self.nodes: list[LayerNode] = [LayerNode("input", "Input")]
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.gamma_init = gamma_init
        self._shapes = {"input": self.input_shape}
        self._count: dict[str, int] = {}

    def _name(self, prefix):
        i = self._count.get(prefix, 0)
        self._count[prefix] = i + 1
        return f"{prefix}{i}"

    def _add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        self._shapes[node.name] = _infer_shape(node, [self._shapes[s] for s in node.inputs], self.input_shape)
        return node.name

    def shape(self, name):
        return self._shapes[name]

    def _uniform(self, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def conv(self, src, out_channels, kernel=3, stride=1, padding=None, bias=False, name=None):
        cin = self._shapes[src][0]
        padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        t = {"weight": self._uniform((out_channels, cin, kernel, kernel), fan_in)}
        if bias:
            t["bias"] = np.zeros(out_channels, np.float32)
        attrs = dict(in_channels=cin, out_channels=out_channels, kernel=[kernel, kernel],
                     stride=stride, padding=padding)
        return self._add(LayerNode(name or self._name("conv"), "Conv2D", [src], attrs, t))

    def linear(self, src, out_features, bias=True, name=None):
        c, h, w = self._shapes[src]
        fin = c * h * w
        t = {"weight": self._uniform((out_features, fin), fin)}
        if bias:
            t["bias"] = np.zeros(out_features, np.float32)
        attrs = dict(in_features=fin, out_features=out_features)
        return self._add(LayerNode(name or self._name("fc"), "Linear", [src], attrs, t))

    def bn(self, src, eps=1e-5, name=None):
        c = self._shapes[src][0]
        t = {
            "gamma": np.full(c, self.gamma_init, np.float32),
            "beta": np.zeros(c, np.float32),
            "running_mean": np.zeros(c, np.float32),
            "running_var": np.ones(c, np.float32),
        }
        return self._add(LayerNode(name or self._name("bn"), "BatchNorm", [src], dict(channels=c, eps=eps), t))

    def relu(self, src, name=None):
        return self._add(LayerNode(name or self._name("relu"), "ReLU", [src]))

    def maxpool(self, src, kernel=2, stride=None, padding=0, name=None):
        attrs = dict(kernel=kernel, stride=stride or kernel, padding=padding)
        return self._add(LayerNode(name or self._name("maxpool"), "MaxPool", [src], attrs))

    def avgpool(self, src, kernel=2, stride=None, name=None):
        attrs = dict(kernel=kernel, stride=stride or kernel, padding=0)
        return self._add(LayerNode(name or self._name("avgpool"), "AvgPool", [src], attrs))

    def gap(self, src, name=None):
        return self._add(LayerNode(name or self._name("gap"), "GlobalAvgPool", [src]))

    def add(self, *srcs, name=None):
        return self._add(LayerNode(name or self._name("add"), "Add", list(srcs)))

    def concat(self, *srcs, name=None):
        return self._add(LayerNode(name or self._name("cat"), "Concat", list(srcs)))

    def select(self, src, mask=None, name=None):
        c = self._shapes[src][0]
        mask = [True] * c if mask is None else [bool(m) for m in mask]
        return self._add(LayerNode(name or self._name("select"), "ChannelSelect", [src], dict(mask=mask)))

    def conv_bn_relu(self, src, out_channels, kernel=3, stride=1, padding=None, relu=True):
        x = self.bn(self.conv(src, out_channels, kernel, stride, padding))
        return self.relu(x) if relu else x

    def build(self, src) -> NetworkGraph:
        self._add(LayerNode("output", "Output", [src]))
        return NetworkGraph(self.nodes, self.input_shape)
