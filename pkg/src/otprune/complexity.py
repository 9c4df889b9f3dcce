"""FLOPs and parameter accounting.

Counting follows the convention of the network-slimming tooling: conv and
linear layers count one FLOP per multiply-accumulate (plus one per output for
a bias), batch-norm costs 2 per element, ReLU 1 per element, pooling one per
window element of every output.  Junctions and channel selection are free.
``macs`` keeps the conv/linear-only multiply-accumulate count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import NetworkGraph


@dataclass(frozen=True)
class ComplexityCount:
    flops: int
    params: int
    macs: int = 0

    def __sub__(self, other):
        return ComplexityCount(self.flops - other.flops, self.params - other.params, self.macs - other.macs)


def node_complexity(node, in_shape, out_shape) -> ComplexityCount:
    k, a = node.kind, node.attrs
    params = int(sum(t.size for t in node.tensors.values()))
    co, ho, wo = out_shape
    if k == "Conv2D":
        kh, kw = a["kernel"]
        macs = ho * wo * co * a["in_channels"] * kh * kw
        flops = macs + (ho * wo * co if "bias" in node.tensors else 0)
    elif k == "Linear":
        macs = a["in_features"] * a["out_features"]
        flops = macs + (a["out_features"] if "bias" in node.tensors else 0)
    elif k == "BatchNorm":
        macs, flops = 0, 2 * int(np.prod(in_shape))
    elif k == "ReLU":
        macs, flops = 0, int(np.prod(in_shape))
    elif k in ("MaxPool", "AvgPool"):
        macs, flops = 0, a["kernel"] ** 2 * co * ho * wo
    elif k == "GlobalAvgPool":
        macs, flops = 0, int(np.prod(in_shape))
    else:
        macs, flops = 0, 0
    return ComplexityCount(int(flops), params, int(macs))


def per_node(graph: NetworkGraph) -> dict[str, ComplexityCount]:
    shapes = graph.shapes()
    out = {}
    for n in graph.nodes:
        in_shape = shapes[n.inputs[0]] if n.inputs else graph.input_shape
        out[n.name] = node_complexity(n, in_shape, shapes[n.name])
    return out


def count_complexity(graph: NetworkGraph) -> ComplexityCount:
    parts = per_node(graph).values()
    return ComplexityCount(sum(p.flops for p in parts), sum(p.params for p in parts),
                           sum(p.macs for p in parts))
