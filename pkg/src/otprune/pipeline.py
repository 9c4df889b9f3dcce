"""Train with sparsity -> prune -> recover, plus the threshold-shift and
OT-vs-NS comparison sweeps.  All artifacts go under ``cfg.out``."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path


from .complexity import count_complexity
from .data import Dataset, load_cifar10, make_synthetic
from .engine import accuracy
from .graph import NetworkGraph
from .io import load, save
from .presets import build_preset
from .report import PruneReport, report, reports_csv
from .surgery import PruneConfig, apply_prune, bn_modes, plan_prune
from .trainer import TrainConfig, config_dict, fine_tune, train, train_from_scratch

log = logging.getLogger(__name__)

POST_MODES = ("fine_tune", "train_from_scratch", "none")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, err: Exception):
        super().__init__(f"[{stage}] {type(err).__name__}: {err}")
        self.stage = stage
        self.__cause__ = err


@dataclass
class PipelineConfig:
    preset: str = "toy_cnn"
    data: str = "synthetic"          # "synthetic" or "cifar10:<dir>"
    num_classes: int = 4
    samples_per_class: int = 500
    image_size: int = 8
    data_seed: int = 1
    method: str = "OT"
    lam: float = 1e-2
    lam_sweep: list = field(default_factory=lambda: [3e-4, 1e-3, 3e-3, 1e-2])
    delta: float = 1e-3
    ns_percent: float = 0.5
    iterations: int = 1
    post: str = "fine_tune"
    shifts: list = field(default_factory=lambda: [-6.0, -4.0, -2.0, -1.0, -0.5, 0.0, 0.25, 0.5])
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/out"
    seed: int = 0
    # sparsity training.  Weight decay on the same order as lambda keeps the
    # next layer's weights from compensating for a shrinking gamma; the third
    # lr decay lowers the floor SGD noise leaves under the negligible scales.
    epochs: int = 120
    batch_size: int = 32
    lr: float = 0.05
    lr_steps: list = field(default_factory=lambda: [[0.5, 0.1], [0.75, 0.1], [0.9, 0.1]])
    momentum: float = 0.9
    weight_decay: float = 1e-2
    # recovery
    finetune_epochs: int = 5
    finetune_lr: float = 1e-3

    def __post_init__(self):
        self.method = self.method.upper()
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.post not in POST_MODES:
            raise ValueError(f"post must be one of {POST_MODES}")
        if self.method not in ("OT", "NS"):
            raise ValueError("method must be OT or NS")

    def train_config(self, lam=None, seed=None) -> TrainConfig:
        return TrainConfig(lam=self.lam if lam is None else lam, epochs=self.epochs, batch_size=self.batch_size,
                           lr=self.lr, lr_steps=[tuple(s) for s in self.lr_steps], momentum=self.momentum,
                           weight_decay=self.weight_decay, seed=self.seed if seed is None else seed)

    def finetune_config(self, seed=None) -> TrainConfig:
        return TrainConfig(lam=0.0, epochs=self.finetune_epochs, batch_size=self.batch_size, lr=self.finetune_lr,
                           lr_steps=[], momentum=self.momentum, weight_decay=self.weight_decay,
                           seed=self.seed if seed is None else seed, mode="fine_tune")

    def prune_config(self, shift=0.0, layer_cap=None) -> PruneConfig:
        return PruneConfig(delta=self.delta, ns_percent=self.ns_percent, shift=shift, layer_cap=layer_cap)


def load_data(cfg: PipelineConfig) -> Dataset:
    if cfg.data == "synthetic":
        return make_synthetic(cfg.num_classes, cfg.samples_per_class, cfg.image_size, seed=cfg.data_seed)
    if cfg.data.startswith("cifar10:"):
        return load_cifar10(cfg.data.split(":", 1)[1])
    raise ValueError(f"unknown data source {cfg.data!r}")


class _Run:
    """Tracks artifacts written under the output directory."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write(self, rel, text: str):
        self.path(rel).write_text(text)
        self.artifacts.append(str(rel))

    def model(self, rel, graph: NetworkGraph):
        save(graph, self.path(rel))
        self.artifacts += [f"{rel}.otg.json", f"{rel}.otg.bin"]
        # every stored model must survive a reload
        load(self.path(rel))

    def manifest(self, kind: str, extra=None):
        doc = {"kind": kind, "config": asdict(self.cfg), "artifacts": sorted(self.artifacts)}
        if extra:
            doc.update(extra)
        self.path("manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except PipelineError:
        raise
    except Exception as e:
        raise PipelineError(name, e) from e


def prunable_channels(graph: NetworkGraph) -> int:
    modes = bn_modes(graph)
    return sum(b.attrs["channels"] for b in graph.batchnorms() if modes[b.name] != "locked")


def recover(pruned, data, cfg: PipelineConfig, flops_before, seed=None):
    """Post-prune training per ``cfg.post``; returns (graph, trace or None)."""
    if cfg.post == "none":
        return pruned, None
    if cfg.post == "fine_tune":
        return fine_tune(pruned, data, cfg.finetune_config(seed))
    return train_from_scratch(pruned, data, replace(cfg.train_config(0.0, seed), mode="train_from_scratch"),
                              flops_before=flops_before)


def run_pipeline(cfg: PipelineConfig, data: Dataset | None = None, graph: NetworkGraph | None = None) -> list[PruneReport]:
    run = _Run(cfg)
    data = data or _stage("data", load_data, cfg)
    graph = graph or _stage("build", build_preset, cfg.preset, data.num_classes, data.input_shape, cfg.seed)
    layer_cap = 0.5 if (cfg.method == "NS" and cfg.iterations > 1) else None
    reports = []
    for it in range(1, cfg.iterations + 1):
        tag = f"iter{it}"
        trained, trace = _stage(f"{tag}/train", train, graph, data, cfg.train_config())
        run.model(f"{tag}/trained", trained)
        run.write(f"{tag}/train_trace.csv", trace.to_csv())
        acc_base = accuracy(trained, data.test.images, data.test.labels)

        plan = _stage(f"{tag}/prune", plan_prune, trained, cfg.method, cfg.prune_config(layer_cap=layer_cap),
                      lam=cfg.lam, seed=cfg.seed)
        pruned = _stage(f"{tag}/prune", apply_prune, trained, plan)
        run.write(f"{tag}/plan.json", plan.to_json())
        run.model(f"{tag}/pruned", pruned)
        acc_pre = accuracy(pruned, data.test.images, data.test.labels)

        flops_before = count_complexity(trained).flops
        final, post_trace = _stage(f"{tag}/{cfg.post}", recover, pruned, data, cfg, flops_before)
        acc_post = None
        if post_trace is not None:
            run.write(f"{tag}/{cfg.post}_trace.csv", post_trace.to_csv())
            run.model(f"{tag}/final", final)
            acc_post = accuracy(final, data.test.images, data.test.labels)

        rep = report(trained, pruned, plan, {"base": acc_base, "pre": acc_pre, "post": acc_post},
                     lam=cfg.lam, seed=cfg.seed)
        run.write(f"{tag}/report.json", rep.to_json())
        reports.append(rep)
        log.info("%s: pruned %d/%d channels, %.1f%% FLOPs, acc %.2f -> %.2f -> %s", tag, rep.channels_pruned,
                 rep.channels_total, rep.pruned_flops_pct, acc_base, acc_pre, acc_post)
        graph = final
    run.write("reports.csv", reports_csv(reports))
    run.manifest("pipeline")
    return reports


SHIFT_FIELDS = ["shift", "pruned_flops_pct", "pruned_params_pct", "channels_kept", "acc_pre", "acc_post"]


def run_shift_sweep(cfg: PipelineConfig, data: Dataset | None = None, trained: NetworkGraph | None = None,
                    write: bool = True) -> list[dict]:
    """Scale every OT threshold by ``10**shift`` and measure the damage."""
    if cfg.method != "OT":
        raise ValueError("threshold shifts are defined for OT only")
    data = data or _stage("data", load_data, cfg)
    run = _Run(cfg) if write else None
    if trained is None:
        graph = _stage("build", build_preset, cfg.preset, data.num_classes, data.input_shape, cfg.seed)
        trained, trace = _stage("train", train, graph, data, cfg.train_config())
        if run:
            run.model("trained", trained)
            run.write("train_trace.csv", trace.to_csv())
    base = count_complexity(trained)
    rows = []
    for s in cfg.shifts:
        plan = _stage(f"shift {s}", plan_prune, trained, "OT", cfg.prune_config(shift=s), lam=cfg.lam, seed=cfg.seed)
        pruned = _stage(f"shift {s}", apply_prune, trained, plan)
        after = count_complexity(pruned)
        acc_pre = accuracy(pruned, data.test.images, data.test.labels)
        acc_post = None
        if cfg.post != "none":
            final, _ = _stage(f"shift {s}/{cfg.post}", recover, pruned, data, cfg, base.flops)
            acc_post = accuracy(final, data.test.images, data.test.labels)
        rows.append({"shift": float(s), "pruned_flops_pct": 100.0 * (1 - after.flops / base.flops),
                     "pruned_params_pct": 100.0 * (1 - after.params / base.params),
                     "channels_kept": plan_kept(plan), "acc_pre": acc_pre, "acc_post": acc_post})
    if run:
        run.write("shift_sweep.csv", rows_csv(rows, SHIFT_FIELDS))
        run.manifest("sweep-shift")
    return rows


def plan_kept(plan) -> int:
    return sum(d.kept for d in plan.per_bn.values())


def rows_csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]))
                    for k in fields})
    return buf.getvalue()


def matched_ns_percent(graph: NetworkGraph, ot_plan) -> float:
    """NS pruning fraction that removes as many prunable channels as ``ot_plan``."""
    modes = bn_modes(graph)
    pruned = sum(len(d.keep) - d.kept for n, d in ot_plan.per_bn.items() if modes[n] != "locked")
    return pruned / prunable_channels(graph)


def compare_methods(cfg: PipelineConfig, data: Dataset | None = None, trained: dict | None = None,
                    write: bool = True) -> list[PruneReport]:
    """For each (seed, lambda): OT, then NS at the channel budget OT chose.

    ``trained`` may supply already sparsity-trained graphs keyed by
    ``(seed, lam)``; missing ones are trained here.
    """
    data = data or _stage("data", load_data, cfg)
    run = _Run(cfg) if write else None
    trained = {} if trained is None else trained
    reports = []
    for seed in cfg.seeds:
        for lam in cfg.lam_sweep:
            key = (seed, lam)
            if key not in trained:
                graph = _stage("build", build_preset, cfg.preset, data.num_classes, data.input_shape, seed)
                trained[key], _ = _stage(f"train seed={seed} lam={lam}", train, graph, data,
                                         cfg.train_config(lam, seed))
            model = trained[key]
            acc_base = accuracy(model, data.test.images, data.test.labels)
            ot = plan_prune(model, "OT", cfg.prune_config(), lam=lam, seed=seed)
            pct = matched_ns_percent(model, ot)
            ns = plan_prune(model, "NS", replace(cfg.prune_config(), ns_percent=pct), lam=lam, seed=seed)
            for plan in (ot, ns):
                pruned = _stage(f"prune {plan.method}", apply_prune, model, plan)
                acc_pre = accuracy(pruned, data.test.images, data.test.labels)
                acc_post = None
                if cfg.post != "none":
                    final, _ = recover(pruned, data, cfg, count_complexity(model).flops, seed)
                    acc_post = accuracy(final, data.test.images, data.test.labels)
                rep = report(model, pruned, plan, {"base": acc_base, "pre": acc_pre, "post": acc_post},
                             lam=lam, seed=seed)
                reports.append(rep)
    if run:
        run.write("compare.csv", reports_csv(reports))
        run.write("compare.json", json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True))
        run.manifest("compare")
    return reports


def config_from_json(text: str) -> PipelineConfig:
    return PipelineConfig(**json.loads(text))


__all__ = ["PipelineConfig", "PipelineError", "run_pipeline", "run_shift_sweep", "compare_methods",
           "load_data", "matched_ns_percent", "config_dict"]
