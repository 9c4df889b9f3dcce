import numpy as np
import pytest

from otprune.data import make_synthetic
from otprune.engine import backward, forward_train, graph_params, softmax_cross_entropy
from otprune.graph import GraphBuilder
from otprune.presets import build_preset
from otprune.trainer import (TrainConfig, TrainingDiverged, fine_tune, gradient_check, l1_penalty,
                           scratch_epochs, train, train_from_scratch)


@pytest.fixture(scope="module")
def small_data():
    return make_synthetic(4, 60, 8, seed=2)


def same_weights(g, h):
    return all(a.tensors[k].tobytes() == b.tensors[k].tobytes()
               for a, b in zip(g.nodes, h.nodes) for k in a.tensors)


# -- configuration -----------------------------------------------------------------

def test_fine_tune_forces_zero_lambda():
    assert TrainConfig(lam=0.5, mode="fine_tune").lam == 0.0


@pytest.mark.parametrize("kw", [dict(lam=-1), dict(lr=0), dict(batch_size=0), dict(mode="distill")])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_step_schedule():
    cfg = TrainConfig(lr=0.1, epochs=160, lr_steps=[(80, 0.1), (120, 0.1)])
    assert [cfg.lr_at(e) for e in (0, 79, 80, 119, 120)] == pytest.approx([0.1, 0.1, 0.01, 0.01, 0.001])
    frac = TrainConfig(lr=0.1, epochs=40, lr_steps=[(0.5, 0.1)])
    assert frac.lr_at(19) == pytest.approx(0.1) and frac.lr_at(20) == pytest.approx(0.01)


def test_scratch_budget():
    assert scratch_epochs(10, 100, 80) == 12      # same total FLOPs
    assert scratch_epochs(10, 100, 50) == 20      # >= 2x saving: doubled
    assert scratch_epochs(10, 100, 10) == 20


# -- gradients ---------------------------------------------------------------------

def test_gradient_toy_mlp():
    g = build_preset("toy_mlp", 4, seed=1)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6,) + g.input_shape)
    assert gradient_check(g, x, rng.integers(0, 4, 6)) < 1e-3


def test_single_linear_quadratic_loss_exact():
    b = GraphBuilder((3, 1, 1), np.random.default_rng(0))
    g = b.build(b.linear("input", 2))
    params = graph_params(g)
    x = np.random.default_rng(1).normal(size=(5, 3, 1, 1))
    target = np.random.default_rng(2).normal(size=(5, 2))
    logits, state = forward_train(g, x, params)
    grads = backward(g, state, params, logits - target)   # d/dy of 0.5|y - t|^2
    w, bias = params["fc0"]["weight"], params["fc0"]["bias"]
    analytic_w = (x.reshape(5, 3).T @ (x.reshape(5, 3) @ w.T + bias - target)).T
    assert np.abs(grads["fc0"]["weight"] - analytic_w).max() < 1e-6
    assert np.abs(grads["fc0"]["bias"] - (logits - target).sum(0)).max() < 1e-6


def test_gradient_through_batch_statistics():
    b = GraphBuilder((2, 4, 4), np.random.default_rng(3))
    x = b.maxpool(b.relu(b.bn(b.conv("input", 3))))
    g = b.build(b.linear(b.bn(b.conv(x, 2, kernel=1)), 3))
    rng = np.random.default_rng(4)
    assert gradient_check(g, rng.normal(size=(5, 2, 4, 4)), rng.integers(0, 3, 5), training=True) < 1e-3


def test_gradient_random_graphs_sample(small_graph_factory):
    for seed in (1, 2, 5):
        g = small_graph_factory(seed)
        rng = np.random.default_rng(100 + seed)
        x = rng.normal(size=(4,) + g.input_shape)
        assert gradient_check(g, x, rng.integers(0, 3, 4)) < 1e-3


def test_softmax_cross_entropy_gradient():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    loss, d = softmax_cross_entropy(logits, np.array([1, 2]))
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    assert loss == pytest.approx(-(np.log(p[0, 1]) + np.log(p[1, 2])) / 2)
    onehot = np.eye(3)[[1, 2]]
    assert np.allclose(d, (p - onehot) / 2)


# -- training behaviour ------------------------------------------------------------

def test_zero_epochs_is_identity(small_data):
    g = build_preset("toy_cnn", 4)
    h, trace = train(g, small_data, TrainConfig(epochs=0))
    assert same_weights(g, h) and len(trace) == 0
    h2, _ = fine_tune(g, small_data, TrainConfig(epochs=0, mode="fine_tune"))
    assert same_weights(g, h2)


def test_input_graph_untouched(small_data):
    g = build_preset("toy_cnn", 4)
    before = g.copy()
    train(g, small_data, TrainConfig(epochs=1, lam=1e-2))
    assert same_weights(g, before)


def test_deterministic(small_data):
    g = build_preset("toy_cnn", 4, seed=3)
    cfg = TrainConfig(epochs=2, lam=1e-2, seed=11)
    a, ta = train(g, small_data, cfg)
    b, tb = train(g, small_data, cfg)
    assert same_weights(a, b) and ta.loss == tb.loss


def test_seed_changes_result(small_data):
    g = build_preset("toy_cnn", 4)
    a, _ = train(g, small_data, TrainConfig(epochs=1, seed=1))
    b, _ = train(g, small_data, TrainConfig(epochs=1, seed=2))
    assert not same_weights(a, b)


def test_trace_and_penalty_bookkeeping(small_data):
    g = build_preset("toy_cnn", 4)
    h, trace = train(g, small_data, TrainConfig(epochs=3, lam=3e-2))
    assert len(trace.loss) == len(trace.l1_penalty) == len(trace.test_acc) == 3
    recomputed = l1_penalty(trace.gammas.values(), 3e-2)
    assert trace.l1_penalty[-1] == pytest.approx(recomputed, rel=1e-6)
    assert trace.to_csv().splitlines()[0] == "epoch,loss,l1_penalty,test_acc"


def test_divergence_reports_epoch(small_data):
    g = build_preset("toy_cnn", 4)
    with pytest.raises(TrainingDiverged) as err, np.errstate(all="ignore"):
        train(g, small_data, TrainConfig(epochs=3, lr=1e300, lr_steps=[]))
    assert err.value.epoch == 1


def test_learns_separable_data():
    data = make_synthetic(4, 500, 8, seed=1)
    g = build_preset("toy_cnn", 4)
    _, trace = train(g, data, TrainConfig(epochs=20, lam=0.0))
    assert trace.test_acc[-1] >= 95.0


def test_l1_shrinks_scales_monotonically():
    data = make_synthetic(4, 100, 8, seed=1)
    means = []
    for lam in (0.0, 1e-3, 1e-2, 1e-1):
        totals = []
        for seed in range(5):
            g = build_preset("toy_cnn", 4, seed=seed)
            _, tr = train(g, data, TrainConfig(epochs=4, lam=lam, seed=seed))
            totals.append(sum(np.abs(v).sum() for v in tr.gammas.values()))
        means.append(np.mean(totals))
    assert all(a >= b for a, b in zip(means, means[1:])), means


def test_train_from_scratch_reinitializes(small_data):
    g = build_preset("toy_cnn", 4)
    trained, _ = train(g, small_data, TrainConfig(epochs=1))
    h, trace = train_from_scratch(trained, small_data, TrainConfig(epochs=1), flops_before=None)
    assert len(trace) == 1
    assert not same_weights(trained, h)
