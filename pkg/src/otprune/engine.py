"""Forward and reverse-mode execution of a NetworkGraph in float64 numpy.

Parameters are passed as ``{node_name: {slot: array}}`` so the trainer can keep
float64 master copies while the graph itself stores float32.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph import NetworkGraph, TENSOR_SLOTS

Params = dict[str, dict[str, np.ndarray]]


def graph_params(graph: NetworkGraph) -> Params:
    return {n.name: {k: v.astype(np.float64) for k, v in n.tensors.items()}
            for n in graph.nodes if n.kind in TENSOR_SLOTS}


def write_params(graph: NetworkGraph, params: Params) -> None:
    for n in graph.nodes:
        if n.name in params:
            for k, v in params[n.name].items():
                n.tensors[k] = np.asarray(v, dtype=np.float32).reshape(n.tensors[k].shape)


# -- kernels -----------------------------------------------------------------

def _windows(x, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) strided view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x, w, b, stride, padding):
    o, c, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = _windows(xp, kh, kw, stride)
    n, _, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, xp.shape)


def conv2d_backward(dout, w, cache, stride, padding):
    cols, xp_shape = cache
    o, c, kh, kw = w.shape
    n, _, ho, wo = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    dcols = np.ascontiguousarray(dcols.transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw, db


def maxpool(x, k, s, p):
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
    win = _windows(xp, k, k, s)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, xp.shape)


def maxpool_backward(dout, cache, k, s, p):
    arg, xp_shape = cache
    n, c, ho, wo = dout.shape
    dxp = np.zeros(xp_shape)
    for i in range(k):
        for j in range(k):
            hit = (arg == i * k + j)
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dout * hit
    if p:
        dxp = dxp[:, :, p:-p, p:-p]
    return dxp


def avgpool(x, k, s):
    return _windows(x, k, k, s).mean(axis=(-2, -1))


def avgpool_backward(dout, x_shape, k, s):
    n, c, ho, wo = dout.shape
    dx = np.zeros(x_shape)
    g = dout / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g
    return dx


def _bshape(v):
    return v.reshape(1, -1, 1, 1)


def batchnorm_infer(x, p, eps):
    scale = p["gamma"] / np.sqrt(p["running_var"] + eps)
    return (x - _bshape(p["running_mean"])) * _bshape(scale) + _bshape(p["beta"])


def batchnorm_train(x, p, eps):
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - _bshape(mean)) * _bshape(inv)
    out = xhat * _bshape(p["gamma"]) + _bshape(p["beta"])
    return out, (xhat, inv, mean, var)


def batchnorm_backward(dout, p, cache):
    xhat, inv, _, _ = cache
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * _bshape(p["gamma"])
    dx = _bshape(inv / m) * (m * dxhat - _bshape(dxhat.sum(axis=(0, 2, 3)))
                             - xhat * _bshape((dxhat * xhat).sum(axis=(0, 2, 3))))
    return dx, dgamma, dbeta


# -- graph execution -----------------------------------------------------------

def _run(graph: NetworkGraph, x: np.ndarray, params: Params, training: bool, keep_tape: bool):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if tuple(x.shape[1:]) != graph.input_shape:
        raise ValueError(f"input shape {x.shape[1:]} does not match graph input {graph.input_shape}")
    idx = graph.index()
    acts: dict[str, np.ndarray] = {}
    tape: dict[str, object] = {}
    stats: dict[str, tuple] = {}
    order = graph.topo_order()
    for name in order:
        n = idx[name]
        a = n.attrs
        ins = [acts[s] for s in n.inputs]
        k = n.kind
        if k == "Input":
            y = x
        elif k == "Output":
            y = ins[0]
        elif k == "Conv2D":
            p = params[name]
            y, cache = conv2d(ins[0], p["weight"], p.get("bias"), a["stride"], a["padding"])
            if keep_tape:
                tape[name] = cache
        elif k == "Linear":
            p = params[name]
            flat = ins[0].reshape(ins[0].shape[0], -1)
            y = flat @ p["weight"].T
            if "bias" in p:
                y = y + p["bias"]
            y = y[:, :, None, None]
            if keep_tape:
                tape[name] = flat
        elif k == "BatchNorm":
            p = params[name]
            if training:
                y, cache = batchnorm_train(ins[0], p, a["eps"])
                stats[name] = (cache[2], cache[3], ins[0].shape[0] * ins[0].shape[2] * ins[0].shape[3])
                if keep_tape:
                    tape[name] = cache
            else:
                y = batchnorm_infer(ins[0], p, a["eps"])
        elif k == "ReLU":
            y = np.maximum(ins[0], 0.0)
        elif k == "MaxPool":
            y, cache = maxpool(ins[0], a["kernel"], a["stride"], a.get("padding", 0))
            if keep_tape:
                tape[name] = cache
        elif k == "AvgPool":
            y = avgpool(ins[0], a["kernel"], a["stride"])
        elif k == "GlobalAvgPool":
            y = ins[0].mean(axis=(2, 3), keepdims=True)
        elif k == "Add":
            y = ins[0].copy()
            for other in ins[1:]:
                y += other
        elif k == "Concat":
            y = np.concatenate(ins, axis=1)
        elif k == "ChannelSelect":
            y = ins[0][:, np.asarray(a["mask"], dtype=bool)]
        else:  # validate() rejects unknown kinds
            raise ValueError(f"cannot execute {k}")
        acts[name] = y
    return acts, tape, stats, order


def forward(graph: NetworkGraph, x: np.ndarray, params: Params | None = None) -> np.ndarray:
    """Inference-mode logits, shape (batch, features)."""
    params = graph_params(graph) if params is None else params
    acts, _, _, _ = _run(graph, x, params, training=False, keep_tape=False)
    out = acts[graph.output_node.name]
    return out.reshape(out.shape[0], -1)


def forward_train(graph: NetworkGraph, x: np.ndarray, params: Params, training: bool = True):
    """Forward pass keeping everything backward() needs.

    Returns ``(logits, state)``; ``state["stats"]`` holds per-BN batch
    ``(mean, var, count)`` when ``training`` is set.
    """
    acts, tape, stats, order = _run(graph, x, params, training=training, keep_tape=True)
    out = acts[graph.output_node.name]
    return out.reshape(out.shape[0], -1), {"acts": acts, "tape": tape, "stats": stats,
                                          "order": order, "training": training}


def backward(graph: NetworkGraph, state, params: Params, dlogits: np.ndarray) -> Params:
    """Gradients of a scalar loss for every parameter, given d loss / d logits."""
    idx = graph.index()
    acts, tape = state["acts"], state["tape"]
    out_name = graph.output_node.name
    grads_act: dict[str, np.ndarray] = {out_name: dlogits.reshape(acts[out_name].shape)}
    grads: Params = {}

    def push(src, g):
        if src in grads_act:
            grads_act[src] = grads_act[src] + g
        else:
            grads_act[src] = g

    for name in reversed(state["order"]):
        n = idx[name]
        if name not in grads_act:
            continue
        g = grads_act.pop(name)
        k, a = n.kind, n.attrs
        if k == "Input":
            continue
        x = acts[n.inputs[0]]
        if k == "Output":
            push(n.inputs[0], g)
        elif k == "Conv2D":
            p = params[name]
            dx, dw, db = conv2d_backward(g, p["weight"], tape[name], a["stride"], a["padding"])
            grads[name] = {"weight": dw}
            if "bias" in p:
                grads[name]["bias"] = db
            push(n.inputs[0], dx)
        elif k == "Linear":
            p = params[name]
            g2 = g.reshape(g.shape[0], -1)
            grads[name] = {"weight": g2.T @ tape[name]}
            if "bias" in p:
                grads[name]["bias"] = g2.sum(axis=0)
            push(n.inputs[0], (g2 @ p["weight"]).reshape(x.shape))
        elif k == "BatchNorm":
            p = params[name]
            if state["training"]:
                dx, dgamma, dbeta = batchnorm_backward(g, p, tape[name])
            else:
                inv = 1.0 / np.sqrt(p["running_var"] + a["eps"])
                xhat = (x - _bshape(p["running_mean"])) * _bshape(inv)
                dgamma = (g * xhat).sum(axis=(0, 2, 3))
                dbeta = g.sum(axis=(0, 2, 3))
                dx = g * _bshape(p["gamma"] * inv)
            grads[name] = {"gamma": dgamma, "beta": dbeta}
            push(n.inputs[0], dx)
        elif k == "ReLU":
            push(n.inputs[0], g * (x > 0))
        elif k == "MaxPool":
            push(n.inputs[0], maxpool_backward(g, tape[name], a["kernel"], a["stride"], a.get("padding", 0)))
        elif k == "AvgPool":
            push(n.inputs[0], avgpool_backward(g, x.shape, a["kernel"], a["stride"]))
        elif k == "GlobalAvgPool":
            push(n.inputs[0], np.broadcast_to(g / (x.shape[2] * x.shape[3]), x.shape).copy())
        elif k == "Add":
            for src in n.inputs:
                push(src, g)
        elif k == "Concat":
            off = 0
            for src in n.inputs:
                c = acts[src].shape[1]
                push(src, g[:, off:off + c])
                off += c
        elif k == "ChannelSelect":
            dx = np.zeros(x.shape)
            dx[:, np.asarray(a["mask"], dtype=bool)] = g
            push(n.inputs[0], dx)
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def predict(graph: NetworkGraph, images: np.ndarray, batch_size: int = 500, params: Params | None = None) -> np.ndarray:
    params = graph_params(graph) if params is None else params
    out = [forward(graph, images[i:i + batch_size], params).argmax(axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def accuracy(graph: NetworkGraph, images: np.ndarray, labels: np.ndarray, params: Params | None = None) -> float:
    """Top-1 accuracy in percent."""
    if len(labels) == 0:
        return float("nan")
    return float(100.0 * np.mean(predict(graph, images, params=params) == labels))
