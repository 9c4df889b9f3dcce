"""Architecture presets.

CIFAR variants of ResNet-50 and DenseNet-121 use a 3x3/stride 1/pad 1 stem
convolution and drop the stem max-pool.  VGG-14 is the batch-normalized VGG-16
with the three fully connected layers replaced by one.

``toy_cnn`` uses unpadded convolutions: a channel that has collapsed to a
constant then feeds the next layer a constant, which pruning can fold into
that layer exactly.  Zero padding would turn the constant into a border
pattern the network can learn to rely on.
"""
from __future__ import annotations

from .graph import GraphBuilder, NetworkGraph, check
from .seeding import stream

VGG14_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]


def vgg14(num_classes=10, input_shape=(3, 32, 32), seed=0) -> NetworkGraph:
    b = GraphBuilder(input_shape, stream(seed, "init"))
    x = "input"
    for v in VGG14_CFG:
        x = b.maxpool(x, 2) if v == "M" else b.conv_bn_relu(x, v)
    x = b.avgpool(x, b.shape(x)[1])
    return b.build(b.linear(x, num_classes))


def _bottleneck(b: GraphBuilder, x: str, planes: int, stride: int) -> str:
    inp = b.shape(x)[0]
    y = b.conv_bn_relu(x, planes, kernel=1, stride=stride)
    y = b.conv_bn_relu(y, planes, kernel=3)
    y = b.conv_bn_relu(y, planes * 4, kernel=1, relu=False)
    skip = x
    if stride != 1 or inp != planes * 4:
        skip = b.conv_bn_relu(x, planes * 4, kernel=1, stride=stride, relu=False)
    return b.relu(b.add(y, skip))


def resnet50_cifar(num_classes=10, input_shape=(3, 32, 32), seed=0, blocks=(3, 4, 6, 3)) -> NetworkGraph:
    b = GraphBuilder(input_shape, stream(seed, "init"))
    x = b.conv_bn_relu("input", 64, kernel=3, stride=1, padding=1)
    for i, (planes, n) in enumerate(zip((64, 128, 256, 512), blocks)):
        for j in range(n):
            x = _bottleneck(b, x, planes, 2 if (i > 0 and j == 0) else 1)
    return b.build(b.linear(b.gap(x), num_classes))


def densenet121_cifar(num_classes=10, input_shape=(3, 32, 32), seed=0, growth=32,
                      blocks=(6, 12, 24, 16), bn_size=4, stem=64) -> NetworkGraph:
    b = GraphBuilder(input_shape, stream(seed, "init"))
    x = b.conv_bn_relu("input", stem, kernel=3, stride=1, padding=1)
    for i, n in enumerate(blocks):
        for _ in range(n):
            y = b.relu(b.bn(x))
            y = b.conv_bn_relu(y, bn_size * growth, kernel=1)
            y = b.conv(y, growth, kernel=3)
            x = b.concat(x, y)
        if i < len(blocks) - 1:
            y = b.relu(b.bn(x))
            y = b.conv(y, b.shape(x)[0] // 2, kernel=1)
            x = b.avgpool(y, 2)
    x = b.relu(b.bn(x))
    return b.build(b.linear(b.gap(x), num_classes))


def toy_cnn(num_classes=4, input_shape=(3, 8, 8), seed=0, widths=(16, 16, 32)) -> NetworkGraph:
    """Three unpadded conv-bn-relu layers (8x8 -> 6x6 -> 4x4 -> 2x2), GAP, linear."""
    b = GraphBuilder(input_shape, stream(seed, "init"))
    x = "input"
    for w in widths:
        x = b.conv_bn_relu(x, w, padding=0)
    return b.build(b.linear(b.gap(x), num_classes))


def toy_mlp(num_classes=4, input_shape=(3, 4, 4), seed=0, hidden=(24, 16)) -> NetworkGraph:
    b = GraphBuilder(input_shape, stream(seed, "init"))
    x = "input"
    for h in hidden:
        x = b.relu(b.bn(b.linear(x, h, bias=False)))
    return b.build(b.linear(x, num_classes))


PRESETS = {
    "vgg14": vgg14,
    "resnet50_cifar": resnet50_cifar,
    "densenet121_cifar": densenet121_cifar,
    "toy_cnn": toy_cnn,
    "toy_mlp": toy_mlp,
}


def build_preset(name: str, num_classes: int = 10, input_shape=None, seed: int = 0, **kw) -> NetworkGraph:
    """Build a named architecture with BN scales initialised to 0.5."""
    try:
        fn = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    if input_shape is not None:
        kw["input_shape"] = tuple(input_shape)
    return check(fn(num_classes=num_classes, seed=seed, **kw))
