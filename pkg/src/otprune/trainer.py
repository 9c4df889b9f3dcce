"""SGD training with an L1 penalty on batch-norm scales, plus fine-tuning and
training from scratch of pruned architectures."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, augment_batch
from .engine import (Params, accuracy, backward, forward_train, graph_params,
                     softmax_cross_entropy, write_params)
from .graph import NetworkGraph, check
from .seeding import stream

log = logging.getLogger(__name__)

MODES = ("sparse_train", "fine_tune", "train_from_scratch")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss} in epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    lam: float = 0.0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.1
    lr_steps: list = field(default_factory=lambda: [(0.5, 0.1), (0.75, 0.1)])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    decay_bn: bool = False
    seed: int = 0
    mode: str = "sparse_train"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "fine_tune":
            self.lam = 0.0
        if self.lam < 0 or self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError(f"invalid TrainConfig: {self}")
        self.lr_steps = [tuple(s) for s in self.lr_steps]

    @classmethod
    def cifar(cls, lam=1e-4, seed=0, **kw):
        """Hyper-parameters used for CIFAR sparsity training (160 epochs, decay at 80/120)."""
        return cls(lam=lam, epochs=160, batch_size=64, lr=0.1, lr_steps=[(80, 0.1), (120, 0.1)],
                   momentum=0.9, weight_decay=1e-4, seed=seed, **kw)

    def lr_at(self, epoch: int) -> float:
        """Step schedule; a step epoch below 1 is read as a fraction of ``epochs``."""
        lr = self.lr
        for at, factor in self.lr_steps:
            at_epoch = at * self.epochs if at < 1 else at
            if epoch >= at_epoch:
                lr *= factor
        return lr


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    l1_penalty: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)
    gammas: dict = field(default_factory=dict)
    lam: float = 0.0

    def __len__(self):
        return len(self.loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "l1_penalty", "test_acc"])
        for i, row in enumerate(zip(self.loss, self.l1_penalty, self.test_acc), start=1):
            w.writerow([i] + [repr(float(v)) for v in row])
        return buf.getvalue()


def l1_penalty(gammas, lam) -> float:
    return float(lam * sum(np.abs(np.asarray(g, dtype=np.float64)).sum() for g in gammas))


def train(graph: NetworkGraph, data: Dataset, cfg: TrainConfig) -> tuple[NetworkGraph, TrainTrace]:
    """Minimise cross-entropy + lam * sum|gamma| with Nesterov SGD.

    Returns a new graph; the input graph is not modified.
    """
    check(graph)
    graph = graph.copy()
    params = graph_params(graph)
    bn_names = [n.name for n in graph.batchnorms()]
    eps = {n.name: n.attrs["eps"] for n in graph.batchnorms()}
    decayed = [(n.name, "weight") for n in graph.nodes if n.kind in ("Conv2D", "Linear")]
    if cfg.decay_bn:
        decayed += [(b, "gamma") for b in bn_names]
    velocity = {(name, slot): np.zeros_like(v) for name, p in params.items() for slot, v in p.items()
                if slot in ("weight", "bias", "gamma", "beta")}

    order_rng = stream(cfg.seed, "order")
    aug_rng = stream(cfg.seed, "augment")
    x_all, y_all = data.train.images, data.train.labels
    trace = TrainTrace(lam=cfg.lam)

    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        perm = order_rng.permutation(len(y_all))
        losses, counts = [], []
        for start in range(0, len(perm), cfg.batch_size):
            ids = perm[start:start + cfg.batch_size]
            if len(ids) < 2 and len(perm) > 1:
                continue  # batch statistics need at least two samples
            xb = x_all[ids]
            if data.augment:
                xb = augment_batch(xb, aug_rng)
            logits, state = forward_train(graph, xb, params)
            loss, dlogits = softmax_cross_entropy(logits, y_all[ids])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch + 1, loss)
            grads = backward(graph, state, params, dlogits)

            for name, (mean, var, m) in state["stats"].items():
                p = params[name]
                unbiased = var * m / max(m - 1, 1)
                p["running_mean"] = (1 - cfg.bn_momentum) * p["running_mean"] + cfg.bn_momentum * mean
                p["running_var"] = (1 - cfg.bn_momentum) * p["running_var"] + cfg.bn_momentum * unbiased
            for key in decayed:
                grads[key[0]][key[1]] = grads[key[0]][key[1]] + cfg.weight_decay * params[key[0]][key[1]]
            if cfg.lam:
                for b in bn_names:
                    # np.sign gives the 0 subgradient at gamma == 0
                    grads[b]["gamma"] = grads[b]["gamma"] + cfg.lam * np.sign(params[b]["gamma"])
            for name, g in grads.items():
                for slot, gv in g.items():
                    v = velocity[(name, slot)]
                    v *= cfg.momentum
                    v += gv
                    params[name][slot] = params[name][slot] - lr * (gv + cfg.momentum * v)
            losses.append(loss * len(ids))
            counts.append(len(ids))

        mean_loss = float(np.sum(losses) / max(np.sum(counts), 1))
        if not np.isfinite(mean_loss) or not all(np.all(np.isfinite(v)) for p in params.values() for v in p.values()):
            raise TrainingDiverged(epoch + 1, mean_loss)
        trace.loss.append(mean_loss)
        trace.l1_penalty.append(l1_penalty([params[b]["gamma"] for b in bn_names], cfg.lam))
        trace.test_acc.append(accuracy(graph, data.test.images, data.test.labels, params))
        log.debug("epoch %d lr %.4g loss %.4f acc %.2f", epoch + 1, lr, mean_loss, trace.test_acc[-1])

    if cfg.epochs:
        write_params(graph, params)
    trace.gammas = {b: graph.node(b).gamma.copy() for b in bn_names}
    return graph, trace


def fine_tune(graph: NetworkGraph, data: Dataset, cfg: TrainConfig) -> tuple[NetworkGraph, TrainTrace]:
    """Continue training without sparsity at a flat learning rate (``cfg.lr``)."""
    cfg = replace(cfg, mode="fine_tune", lam=0.0, lr_steps=[])
    return train(graph, data, cfg)


def reinitialize(graph: NetworkGraph, seed: int, gamma_init: float = 0.5) -> NetworkGraph:
    """Fresh weights for the same architecture (for training a pruned model from scratch)."""
    g = graph.copy()
    rng = stream(seed, "init")
    for n in g.nodes:
        if n.kind in ("Conv2D", "Linear"):
            w = n.tensors["weight"]
            fan_in = int(np.prod(w.shape[1:]))
            n.tensors["weight"] = rng.uniform(-1, 1, size=w.shape).astype(np.float32) / np.float32(np.sqrt(fan_in))
            if "bias" in n.tensors:
                n.tensors["bias"] = np.zeros_like(n.tensors["bias"])
        elif n.kind == "BatchNorm":
            c = n.attrs["channels"]
            n.tensors.update(gamma=np.full(c, gamma_init, np.float32), beta=np.zeros(c, np.float32),
                             running_mean=np.zeros(c, np.float32), running_var=np.ones(c, np.float32))
    return g


def scratch_epochs(base_epochs: int, flops_before: int, flops_after: int) -> int:
    """Epoch budget for training a pruned model from scratch.

    Below a 2x FLOPs saving the budget keeps total training FLOPs equal to the
    original run; from 2x upward it is twice the original epoch count.
    """
    ratio = flops_before / max(flops_after, 1)
    if ratio < 2:
        return int(round(base_epochs * ratio))
    return 2 * base_epochs


def train_from_scratch(graph: NetworkGraph, data: Dataset, cfg: TrainConfig,
                       flops_before: int | None = None) -> tuple[NetworkGraph, TrainTrace]:
    from .complexity import count_complexity

    epochs = cfg.epochs
    if flops_before is not None:
        epochs = scratch_epochs(cfg.epochs, flops_before, count_complexity(graph).flops)
    cfg = replace(cfg, mode="train_from_scratch", lam=0.0, epochs=epochs)
    return train(reinitialize(graph, cfg.seed), data, cfg)


def _loss_of(graph, params, x, labels, training):
    logits, _ = forward_train(graph, x, params, training=training)
    return softmax_cross_entropy(logits, labels)[0]


def gradient_check(graph: NetworkGraph, x: np.ndarray, labels, step: float = 1e-4,
                   training: bool = True, floor: float = 1e-6, params: Params | None = None) -> float:
    """Max relative error between backprop gradients and central differences.

    The relative error of a scalar is ``|a - n| / max(|a| + |n|, floor)``;
    ``floor`` keeps vanishing gradients from amplifying round-off.  An entry
    that disagrees at ``step`` is re-measured at ``step / 10`` and
    ``step / 100`` and the smallest error counts: a difference quotient that
    straddles a ReLU or max-pool kink is wrong at the large steps only, while
    a backprop bug is wrong at all of them.
    """
    labels = np.atleast_1d(np.asarray(labels))
    params = graph_params(graph) if params is None else params
    logits, state = forward_train(graph, x, params, training=training)
    _, dlogits = softmax_cross_entropy(logits, labels)
    grads = backward(graph, state, params, dlogits)

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        up = _loss_of(graph, params, x, labels, training)
        flat[i] = orig - h
        down = _loss_of(graph, params, x, labels, training)
        flat[i] = orig
        return (up - down) / (2 * h)

    worst = 0.0
    for name, g in grads.items():
        for slot, ga in g.items():
            flat = params[name][slot].reshape(-1)
            for i in range(flat.size):
                a = ga.reshape(-1)[i]
                err = None
                for h in (step, step / 10, step / 100):
                    num = central(flat, i, h)
                    e = abs(a - num) / max(abs(a) + abs(num), floor)
                    err = e if err is None else min(err, e)
                    if err < 1e-6:
                        break
                worst = max(worst, err)
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["lr_steps"] = [list(s) for s in cfg.lr_steps]
    return d
