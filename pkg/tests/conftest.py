import numpy as np
import pytest

from otprune.graph import GraphBuilder, check


def random_small_graph(seed: int):
    """Small random conv net mixing BN, pooling, and optionally a residual
    add or a concat, sized for finite-difference checks."""
    rng = np.random.default_rng(seed)
    c_in = int(rng.integers(1, 3))
    size = int(rng.choice([4, 6]))
    b = GraphBuilder((c_in, size, size), rng, gamma_init=float(rng.uniform(0.5, 1.5)))
    w = int(rng.integers(2, 4))
    x = b.conv_bn_relu("input", w, kernel=int(rng.choice([1, 3])))
    topo = seed % 3
    if topo == 1:
        y = b.conv_bn_relu(x, w, relu=False)
        x = b.relu(b.add(x, y))
    elif topo == 2:
        y = b.conv_bn_relu(x, int(rng.integers(1, 3)))
        x = b.concat(x, y)
    x = b.maxpool(x, 2) if rng.random() < 0.5 else b.avgpool(x, 2)
    x = b.bn(b.conv(x, int(rng.integers(2, 4)), kernel=1, bias=True))
    head = b.gap(x) if rng.random() < 0.5 else x
    g = b.build(b.linear(head, 3))
    for bn in g.batchnorms():
        bn.tensors["beta"][:] = rng.normal(0, 0.3, bn.attrs["channels"])
        bn.tensors["running_mean"][:] = rng.normal(0, 0.2, bn.attrs["channels"])
        bn.tensors["running_var"][:] = rng.uniform(0.5, 1.5, bn.attrs["channels"])
    return check(g)


@pytest.fixture
def small_graph_factory():
    return random_small_graph


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
