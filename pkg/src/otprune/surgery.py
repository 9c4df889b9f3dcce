"""Prune plans and their application to a NetworkGraph.

Every batch-norm layer is classified by how its channels can be removed:

* ``structural``: the BN is the only consumer of a conv/linear producer, so
  pruned channels are cut out of the producer's filters, the BN itself and
  the input slices of everything downstream.
* ``select``: the BN reads a tensor that other branches also read (e.g. a
  dense-block concatenation), so a ChannelSelect node after the BN masks
  the pruned channels and only the downstream consumers shrink.
* ``locked``: the BN output reaches an element-wise Add (or the network
  output) before any conv/linear layer.  Such layers are never thinned; they
  can only disappear with their whole branch.

A pruned channel whose scale is (near) zero still emits its constant shift
beta.  By default that constant is carried through the ReLU/pooling chain
and folded into the next conv/linear layer: into its bias, or into the
running mean of the BN it feeds.  The fold is exact for linear layers and
for conv positions away from zero padding.

A *branch* is the chain of single-consumer nodes between a fork and the
junction (Add/Concat) it merges into.  Removing it at an Add leaves the
other path as the identity; at a Concat the merged tensor loses those
channels.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import JUNCTIONS, PASSTHROUGH, GraphError, LayerNode, NetworkGraph, check
from .thresholding import (DegenerateDistribution, GammaSet, ThresholdConfig, find_threshold,
                           global_threshold, ns_threshold, separation_stats)


class SurgeryError(GraphError):
    pass


class PlanMismatch(SurgeryError):
    pass


@dataclass
class Branch:
    id: str
    junction: str
    source: str        # node feeding the junction (last node of the chain)
    fork: str          # node the chain starts from
    nodes: list[str]   # chain, fork side first
    last_bn: str


@dataclass
class LayerDecision:
    gamma_th: float
    threshold: float   # applied threshold (gamma_th shifted, or the NS threshold)
    keep: list[bool]
    mode: str          # structural | select | locked
    stats: dict | None = None

    @property
    def kept(self) -> int:
        return int(sum(self.keep))


@dataclass
class PruneConfig:
    delta: float = 1e-3
    p: float = 2.0
    ns_percent: float = 0.5
    shift: float = 0.0          # log10 offset applied to every OT threshold
    layer_cap: float | None = None  # NS only: max fraction pruned per layer
    remove_branches: bool = True

    def threshold_config(self) -> ThresholdConfig:
        return ThresholdConfig(self.delta, self.p)


@dataclass
class PrunePlan:
    method: str
    per_bn: dict[str, LayerDecision]
    gamma_g: float | None = None
    branches_to_remove: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "gamma_g": self.gamma_g,
            "branches_to_remove": list(self.branches_to_remove),
            "config": self.config,
            "warnings": list(self.warnings),
            "per_bn": {k: asdict(v) for k, v in self.per_bn.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_clean)

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        per = {k: LayerDecision(**v) for k, v in d["per_bn"].items()}
        return cls(d["method"], per, d.get("gamma_g"), list(d.get("branches_to_remove", [])),
                   d.get("config", {}), list(d.get("warnings", [])))

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        return cls.from_dict(json.loads(text))

    def pruned_channels(self) -> int:
        return sum(len(d.keep) - d.kept for d in self.per_bn.values())


def _clean(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


# -- topology analysis ---------------------------------------------------------

def _reaches_only_sliceable(name, idx, cons, seen=None) -> bool:
    seen = set() if seen is None else seen
    for c in cons[name]:
        if c in seen:
            return False
        seen.add(c)
        k = idx[c].kind
        if k in ("Conv2D", "Linear"):
            continue
        if k in ("Add", "Output"):
            return False
        if not _reaches_only_sliceable(c, idx, cons, seen):
            return False
    return True


def bn_modes(graph: NetworkGraph) -> dict[str, str]:
    idx, cons = graph.index(), graph.consumers()
    modes = {}
    for bn in graph.batchnorms():
        prod = idx[bn.inputs[0]]
        if not _reaches_only_sliceable(bn.name, idx, cons):
            modes[bn.name] = "locked"
        elif prod.kind in ("Conv2D", "Linear") and cons[prod.name] == [bn.name]:
            modes[bn.name] = "structural"
        else:
            modes[bn.name] = "select"
    return modes


def find_branches(graph: NetworkGraph) -> list[Branch]:
    idx, cons = graph.index(), graph.consumers()
    out = []
    for j in graph.nodes:
        if j.kind not in JUNCTIONS:
            continue
        for src in j.inputs:
            chain, nxt, cur = [], j.name, src
            while True:
                n = idx[cur]
                if n.kind in JUNCTIONS or n.kind == "Input" or cons[cur] != [nxt]:
                    break
                chain.insert(0, cur)
                nxt, cur = cur, n.inputs[0]
            fork = cur
            bns = [c for c in chain if idx[c].kind == "BatchNorm"]
            if chain and bns and len(cons[fork]) > 1:
                out.append(Branch(f"{j.name}<-{src}", j.name, src, fork, chain, bns[-1]))
    return out


# -- planning ------------------------------------------------------------------

def _guard(name, keep, gamma, warn_list):
    if not any(keep):
        i = int(np.argmax(np.abs(gamma)))
        keep = [False] * len(keep)
        keep[i] = True
        warn_list.append(f"{name}: every channel fell below the threshold; kept channel {i} (largest |gamma|)")
    return keep


def plan_prune(graph: NetworkGraph, method: str = "OT", cfg: PruneConfig | None = None, **provenance) -> PrunePlan:
    """Decide which channels and branches to drop.

    ``provenance`` (e.g. ``lam=1e-2, seed=3``) is copied into the plan's
    config snapshot.
    """
    cfg = cfg or PruneConfig()
    check(graph)
    method = method.upper()
    modes = bn_modes(graph)
    bns = graph.batchnorms()
    gammas = {b.name: np.abs(b.gamma.astype(np.float64)) for b in bns}
    snapshot = dict(asdict(cfg), **provenance)
    plan = PrunePlan(method, {}, config=snapshot)
    if not bns:
        return plan

    if method == "OT":
        tcfg = cfg.threshold_config()
        scale = 10.0 ** cfg.shift
        for b in bns:
            try:
                th = find_threshold(GammaSet(gammas[b.name], b.name), tcfg)
            except DegenerateDistribution as e:
                raise DegenerateDistribution(f"{b.name}: {e}") from e
            applied = th * scale
            st = separation_stats(gammas[b.name], th, cfg.p)
            keep = [bool(v) for v in gammas[b.name] >= applied]
            plan.per_bn[b.name] = LayerDecision(th, applied, keep, modes[b.name], st.to_dict())
        branches = find_branches(graph) if cfg.remove_branches else []
        if branches:
            allg = GammaSet(np.concatenate(list(gammas.values())))
            plan.gamma_g = global_threshold(allg, tcfg) * scale
            doomed = [br for br in branches if np.all(gammas[br.last_bn] < plan.gamma_g)]
            by_junction: dict[str, list[Branch]] = {}
            for br in doomed:
                by_junction.setdefault(br.junction, []).append(br)
            for jname, brs in by_junction.items():
                if len(brs) == len(graph.node(jname).inputs):
                    best = max(brs, key=lambda br: gammas[br.last_bn].max())
                    brs.remove(best)
                    plan.warnings.append(f"{jname}: every input branch fell below gamma_g; kept {best.id}")
                plan.branches_to_remove += [br.id for br in brs]
    elif method == "NS":
        pool = [b.name for b in bns if modes[b.name] != "locked"] or [b.name for b in bns]
        th = ns_threshold(GammaSet(np.concatenate([gammas[n] for n in pool])), cfg.ns_percent)
        for b in bns:
            keep = gammas[b.name] >= th
            if cfg.layer_cap is not None and modes[b.name] != "locked":
                max_drop = int(math.floor(cfg.layer_cap * keep.size))
                if keep.size - keep.sum() > max_drop:
                    order = np.argsort(-gammas[b.name], kind="stable")
                    keep = np.zeros(keep.size, bool)
                    keep[order[: keep.size - max_drop]] = True
            plan.per_bn[b.name] = LayerDecision(th, th, [bool(v) for v in keep], modes[b.name], None)
    else:
        raise ValueError(f"unknown method {method!r} (OT or NS)")

    removed_nodes = _branch_nodes(graph, plan.branches_to_remove)
    for name, dec in plan.per_bn.items():
        if dec.mode == "locked":
            dec.keep = [True] * len(dec.keep)
        elif name not in removed_nodes:
            dec.keep = _guard(name, dec.keep, gammas[name], plan.warnings)
    return plan


def identity_plan(graph: NetworkGraph, method="OT") -> PrunePlan:
    modes = bn_modes(graph)
    return PrunePlan(method, {b.name: LayerDecision(0.0, 0.0, [True] * b.attrs["channels"], modes[b.name])
                              for b in graph.batchnorms()})


def _branch_nodes(graph, branch_ids) -> set[str]:
    if not branch_ids:
        return set()
    lookup = {b.id: b for b in find_branches(graph)}
    out = set()
    for bid in branch_ids:
        if bid not in lookup:
            raise PlanMismatch(f"plan removes unknown branch {bid!r}")
        out.update(lookup[bid].nodes)
    return out


# -- application ---------------------------------------------------------------

class _Surgeon:
    def __init__(self, graph: NetworkGraph):
        self.g = graph
        self.origin = {b.name: np.arange(b.attrs["channels"]) for b in graph.batchnorms()}

    @property
    def idx(self):
        return self.g.index()

    def drop_outputs(self, name: str, drop):
        """Remove output channels ``drop`` of node ``name`` and everything that depends on them."""
        drop = np.unique(np.asarray(drop, dtype=int))
        if drop.size == 0:
            return
        shapes = self.g.shapes()
        n = self.idx[name]
        c = shapes[name][0]
        keep = np.setdiff1d(np.arange(c), drop)
        if keep.size == 0:
            raise SurgeryError(f"{name}: cannot remove all {c} channels")
        if n.kind == "Conv2D":
            n.tensors["weight"] = n.tensors["weight"][keep].copy()
            if "bias" in n.tensors:
                n.tensors["bias"] = n.tensors["bias"][keep].copy()
            n.attrs["out_channels"] = int(keep.size)
        elif n.kind == "Linear":
            n.tensors["weight"] = n.tensors["weight"][keep].copy()
            if "bias" in n.tensors:
                n.tensors["bias"] = n.tensors["bias"][keep].copy()
            n.attrs["out_features"] = int(keep.size)
        elif n.kind not in ("ChannelSelect", "Concat"):
            raise SurgeryError(f"{name}: cannot remove output channels of a {n.kind}")
        self._propagate(name, drop, shapes, set())

    def _propagate(self, name, drop, shapes, seen):
        cons = self.g.consumers()
        idx = self.idx
        for cname in cons[name]:
            if cname in seen:
                raise SurgeryError(f"{cname}: reached twice while removing channels of {name}")
            seen.add(cname)
            node = idx[cname]
            k = node.kind
            cin = shapes[name][0]
            keep = np.setdiff1d(np.arange(cin), drop)
            if k == "Conv2D":
                node.tensors["weight"] = node.tensors["weight"][:, keep].copy()
                node.attrs["in_channels"] = int(keep.size)
            elif k == "Linear":
                c, h, w = shapes[name]
                wt = node.tensors["weight"].reshape(node.attrs["out_features"], c, h * w)[:, keep]
                node.tensors["weight"] = wt.reshape(node.attrs["out_features"], -1).copy()
                node.attrs["in_features"] = int(keep.size * h * w)
            elif k == "BatchNorm":
                for slot in ("gamma", "beta", "running_mean", "running_var"):
                    node.tensors[slot] = node.tensors[slot][keep].copy()
                node.attrs["channels"] = int(keep.size)
                self.origin[cname] = self.origin[cname][keep]
                self._propagate(cname, drop, shapes, seen)
            elif k in PASSTHROUGH:
                self._propagate(cname, drop, shapes, seen)
            elif k == "ChannelSelect":
                mask = np.asarray(node.attrs["mask"], bool)
                selected = np.flatnonzero(mask)
                out_drop = np.flatnonzero(np.isin(selected, drop))
                node.attrs["mask"] = [bool(m) for m in np.delete(mask, drop)]
                if out_drop.size:
                    self._propagate(cname, out_drop, shapes, seen)
            elif k == "Concat":
                off = 0
                for src in node.inputs:
                    if src == name:
                        break
                    off += shapes[src][0]
                self._propagate(cname, drop + off, shapes, seen)
            else:
                raise SurgeryError(f"{cname}: channels of {name} cannot be removed ahead of a {k}")

    def absorb(self, bn_name: str, drop):
        """Fold the constant outputs beta[drop] of ``bn_name`` into the layers they feed."""
        drop = np.asarray(drop, dtype=int)
        vals = self.idx[bn_name].tensors["beta"][drop].astype(np.float64)
        if np.any(vals != 0):
            self._carry(bn_name, drop, vals, self.g.shapes())

    def _carry(self, name, chans, vals, shapes):
        idx = self.idx
        for cname in self.g.consumers()[name]:
            node = idx[cname]
            k = node.kind
            if k == "ReLU":
                self._carry(cname, chans, np.maximum(vals, 0.0), shapes)
            elif k in PASSTHROUGH:
                # pooling a constant map gives the same constant
                self._carry(cname, chans, vals, shapes)
            elif k == "ChannelSelect":
                selected = np.flatnonzero(node.attrs["mask"])
                live = np.isin(chans, selected)
                self._carry(cname, np.searchsorted(selected, chans[live]), vals[live], shapes)
            elif k == "Concat":
                off = 0
                for src in node.inputs:
                    if src == name:
                        break
                    off += shapes[src][0]
                self._carry(cname, chans + off, vals, shapes)
            elif k == "Conv2D":
                w = node.tensors["weight"].astype(np.float64)
                self._deposit(cname, w[:, chans].sum(axis=(2, 3)) @ vals)
            elif k == "Linear":
                c, h, wd = shapes[name]
                w = node.tensors["weight"].astype(np.float64).reshape(-1, c, h * wd)
                self._deposit(cname, w[:, chans].sum(axis=2) @ vals)
            # anything else (Add, Output, BatchNorm) keeps the shift discarded

    def _deposit(self, name, delta):
        if not np.any(delta):
            return
        node = self.idx[name]
        after = self.g.consumers()[name]
        if "bias" in node.tensors:
            node.tensors["bias"] = (node.tensors["bias"] + delta).astype(np.float32)
        elif len(after) == 1 and self.idx[after[0]].kind == "BatchNorm":
            bn = self.idx[after[0]]
            bn.tensors["running_mean"] = (bn.tensors["running_mean"] - delta).astype(np.float32)
        else:
            node.tensors["bias"] = delta.astype(np.float32)

    def remove_branch(self, br: Branch):
        shapes = self.g.shapes()
        j = self.idx[br.junction]
        if br.source not in j.inputs:
            raise PlanMismatch(f"branch {br.id} no longer feeds {br.junction}")
        if len(j.inputs) == 1:
            raise SurgeryError(f"{br.junction}: refusing to remove its last input")
        off = 0
        for src in j.inputs:
            if src == br.source:
                break
            off += shapes[src][0]
        j.inputs.remove(br.source)
        gone = set(br.nodes)
        self.g.nodes = [n for n in self.g.nodes if n.name not in gone]
        for n in gone:
            self.origin.pop(n, None)
        if j.kind == "Concat":
            drop = np.arange(off, off + shapes[br.source][0])
            shapes_after = dict(shapes)
            self._propagate(j.name, drop, shapes_after, set())

    def select_after(self, bn_name: str) -> LayerNode:
        cons = self.g.consumers()
        idx = self.idx
        after = cons[bn_name]
        if len(after) == 1 and idx[after[0]].kind == "ChannelSelect":
            return idx[after[0]]
        base = f"{bn_name}_select"
        name, i = base, 1
        while name in idx:
            name, i = f"{base}{i}", i + 1
        sel = LayerNode(name, "ChannelSelect", [bn_name], {"mask": [True] * idx[bn_name].attrs["channels"]})
        for c in after:
            node = idx[c]
            node.inputs = [name if s == bn_name else s for s in node.inputs]
        pos = [n.name for n in self.g.nodes].index(bn_name)
        self.g.nodes.insert(pos + 1, sel)
        return sel


def apply_prune(graph: NetworkGraph, plan: PrunePlan, absorb: bool = True) -> NetworkGraph:
    """Return a thinned copy of ``graph``; the input is left untouched.

    With ``absorb`` the constant shift of every removed channel is folded
    downstream (see the module notes); without it the shift is discarded.
    """
    check(graph)
    g = graph.copy()
    bns = {b.name: b for b in g.batchnorms()}
    for name, dec in plan.per_bn.items():
        if name not in bns:
            raise PlanMismatch(f"plan refers to missing batch-norm {name!r}")
        if len(dec.keep) != bns[name].attrs["channels"]:
            raise PlanMismatch(f"{name}: keep-mask has {len(dec.keep)} entries for {bns[name].attrs['channels']} channels")
    modes = bn_modes(g)
    surgeon = _Surgeon(g)

    lookup = {b.id: b for b in find_branches(g)}
    for bid in plan.branches_to_remove:
        if bid not in lookup:
            raise PlanMismatch(f"plan removes unknown branch {bid!r}")
        surgeon.remove_branch(lookup[bid])

    for name in g.topo_order():
        if name not in plan.per_bn or name not in surgeon.origin:
            continue
        dec = plan.per_bn[name]
        keep_orig = np.asarray(dec.keep, bool)
        keep = keep_orig[surgeon.origin[name]]
        if keep.all():
            continue
        mode = modes[name]
        bn = g.node(name)
        if mode == "locked":
            raise SurgeryError(f"{name}: layer feeds an element-wise junction and cannot be thinned")
        if mode == "structural":
            if not keep.any():
                keep = _apply_guard(name, bn.gamma)
            if absorb:
                surgeon.absorb(name, np.flatnonzero(~keep))
            surgeon.drop_outputs(bn.inputs[0], np.flatnonzero(~keep))
        else:
            sel = surgeon.select_after(name)
            shapes = g.shapes()   # downstream shapes before the mask narrows
            mask = np.asarray(sel.attrs["mask"], bool)
            new = mask & keep
            if not new.any():
                gm = np.where(mask, np.abs(bn.gamma), -np.inf)
                new = np.zeros_like(mask)
                new[int(np.argmax(gm))] = True
                warnings.warn(f"{name}: plan removes every selected channel; keeping one")
            selected = np.flatnonzero(mask)
            out_drop = np.flatnonzero(~new[selected])
            if absorb:
                surgeon.absorb(name, np.flatnonzero(mask & ~new))
            sel.attrs["mask"] = [bool(m) for m in new]
            if out_drop.size:
                # the select output shrinks; its consumers lose those positions
                surgeon._propagate(sel.name, out_drop, shapes, set())
    return check(g)


def _apply_guard(name, gamma):
    warnings.warn(f"{name}: plan removes every channel; keeping the largest |gamma|")
    keep = np.zeros(gamma.size, bool)
    keep[int(np.argmax(np.abs(gamma)))] = True
    return keep


def kept_channels(graph: NetworkGraph) -> dict[str, int]:
    """Channels of each BN that still reach the rest of the network."""
    cons, idx = graph.consumers(), graph.index()
    out = {}
    for b in graph.batchnorms():
        after = cons[b.name]
        if len(after) == 1 and idx[after[0]].kind == "ChannelSelect":
            out[b.name] = int(np.count_nonzero(idx[after[0]].attrs["mask"]))
        else:
            out[b.name] = int(b.attrs["channels"])
    return out
