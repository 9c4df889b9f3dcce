"""Channel surgery on a residual block and a dense (concat) block.

Channels whose BN scale and shift are both zero are removed; the network
output does not move.  In the dense block the BN reads a tensor shared with
the concat chain, so a ChannelSelect mask is inserted instead of slicing
the producer.

    python3 demos/surgery_topologies.py
"""
import numpy as np

from otprune.complexity import count_complexity
from otprune.engine import forward
from otprune.graph import GraphBuilder
from otprune.surgery import apply_prune, bn_modes, plan_prune


def residual():
    b = GraphBuilder((3, 8, 8), np.random.default_rng(0))
    stem = b.conv_bn_relu("input", 8)
    y = b.conv_bn_relu(stem, 6)
    y = b.conv_bn_relu(y, 8, relu=False)
    x = b.relu(b.add(stem, y))
    return b.build(b.linear(b.gap(x), 4))


def dense():
    b = GraphBuilder((3, 8, 8), np.random.default_rng(0))
    x = b.conv("input", 6)
    for growth in (4, 4):
        x = b.concat(x, b.conv(b.relu(b.bn(x)), growth))
    return b.build(b.linear(b.gap(b.relu(b.bn(x))), 4))


def silence(g, bn, channels):
    g.node(bn).tensors["gamma"][channels] = 0.0
    g.node(bn).tensors["beta"][channels] = 0.0


x = np.random.default_rng(1).normal(size=(16, 3, 8, 8))
for name, g, bn, chans in [("residual", residual(), "bn1", [0, 2, 5]), ("dense", dense(), "bn1", [1, 7])]:
    rng = np.random.default_rng(2)
    for b in g.batchnorms():
        b.tensors["gamma"][:] = rng.uniform(0.5, 1.5, b.attrs["channels"])
    silence(g, bn, chans)
    plan = plan_prune(g, "OT")
    h = apply_prune(g, plan)
    c0, c1 = count_complexity(g), count_complexity(h)
    print(f"{name}: BN modes {bn_modes(g)}")
    print(f"  {bn} keeps {plan.per_bn[bn].kept}/{len(plan.per_bn[bn].keep)} channels;"
          f" FLOPs {c0.flops} -> {c1.flops}, params {c0.params} -> {c1.params}")
    print(f"  new nodes: {sorted({n.name for n in h.nodes} - {n.name for n in g.nodes}) or 'none'}")
    print(f"  max output change {np.abs(forward(g, x) - forward(h, x)).max():.1e}")
