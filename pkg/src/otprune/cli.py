"""Command-line driver.  Each verb runs one stage of the train -> prune ->
recover loop, or a whole loop / sweep.

    otprune train --preset toy_cnn --lambda 0.01 --out runs/t
    otprune prune --model runs/t/model --method OT --out runs/p
    otprune pipeline --iterations 2 --out runs/it2

Exit status is 0 on success; failures print ``otprune: [stage] message``
and exit with a code that names the failing kind of stage (see EXIT_CODES).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .data import CifarFormatError
from .engine import accuracy
from .io import ModelFileError, load
from .pipeline import (POST_MODES, SHIFT_FIELDS, PipelineConfig, PipelineError, _Run, compare_methods,
                       load_data, recover, rows_csv, run_pipeline, run_shift_sweep)
from .presets import build_preset
from .report import report
from .surgery import PrunePlan, SurgeryError, apply_prune, plan_prune
from .thresholding import DegenerateDistribution
from .complexity import count_complexity
from .trainer import TrainingDiverged, train

EXIT_CODES = {"usage": 2, "data": 3, "model": 4, "train": 5, "prune": 6, "other": 1}


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="toy_cnn")
    common.add_argument("--data", default="synthetic", help="'synthetic' or 'cifar10:<dir>'")
    common.add_argument("--method", default="OT", choices=["OT", "NS", "ot", "ns"])
    common.add_argument("--lambda", dest="lam", default=None,
                        help="L1 coefficient; comma list for compare (default 0.01, sweep 3e-4..1e-2)")
    common.add_argument("--delta", type=float, default=1e-3)
    common.add_argument("--ns-percent", type=float, default=0.5)
    common.add_argument("--iterations", type=int, default=1)
    common.add_argument("--post", default="fine_tune", choices=POST_MODES)
    common.add_argument("--shifts", default="-6,-4,-2,-1,-0.5,0,0.25,0.5")
    common.add_argument("--seed", default="0", help="integer; comma list for compare")
    common.add_argument("--out", default="runs/out")
    common.add_argument("--epochs", type=int, default=None, help="sparsity-training epochs")
    common.add_argument("--finetune-epochs", type=int, default=None)
    common.add_argument("--num-classes", type=int, default=4)
    common.add_argument("--samples-per-class", type=int, default=500)
    common.add_argument("--image-size", type=int, default=8)
    common.add_argument("--model", help="input model path (prune/finetune/report)")
    common.add_argument("--before", help="unpruned model path (report)")
    common.add_argument("--plan", help="plan.json (report)")
    common.add_argument("--shift", type=float, default=0.0, help="log10 threshold offset (prune)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="otprune", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb, text in [("train", "sparsity-train a preset"),
                       ("prune", "plan and apply pruning to a saved model"),
                       ("finetune", "recover a pruned model (fine-tune or train from scratch)"),
                       ("report", "compare a model before and after pruning"),
                       ("pipeline", "train -> prune -> recover, possibly iterated"),
                       ("sweep-shift", "shift all OT thresholds by 10**s"),
                       ("compare", "OT vs NS at matched channel budgets")]:
        sub.add_parser(verb, parents=[common], help=text)
    return p


def config_from_args(a) -> PipelineConfig:
    base = PipelineConfig()
    lams = _floats(a.lam) if a.lam else [base.lam]
    seeds = _ints(a.seed)
    cfg = PipelineConfig(preset=a.preset, data=a.data, num_classes=a.num_classes,
                         samples_per_class=a.samples_per_class, image_size=a.image_size,
                         method=a.method, lam=lams[-1], lam_sweep=lams if len(lams) > 1 else
                         base.lam_sweep, delta=a.delta, ns_percent=a.ns_percent,
                         iterations=a.iterations, post=a.post, shifts=_floats(a.shifts),
                         seeds=seeds, seed=seeds[0], out=a.out)
    if a.epochs is not None:
        cfg.epochs = a.epochs
    if a.finetune_epochs is not None:
        cfg.finetune_epochs = a.finetune_epochs
    return cfg


def _need(a, *names):
    for n in names:
        if not getattr(a, n):
            raise _Usage(f"--{n} is required for '{a.verb}'")


class _Usage(ValueError):
    pass


def _eval(graph, data):
    return accuracy(graph, data.test.images, data.test.labels)


def cmd_train(a, cfg):
    data = load_data(cfg)
    graph = build_preset(cfg.preset, data.num_classes, data.input_shape, cfg.seed)
    try:
        trained, trace = train(graph, data, cfg.train_config())
    except Exception as e:
        raise PipelineError("train", e) from e
    run = _Run(cfg)
    run.model("model", trained)
    run.write("train_trace.csv", trace.to_csv())
    run.manifest("train", {"test_acc": trace.test_acc[-1] if trace.test_acc else None})
    print(f"trained {cfg.preset}: test accuracy {_eval(trained, data):.2f}%")


def cmd_prune(a, cfg):
    _need(a, "model")
    graph = load(a.model)
    try:
        plan = plan_prune(graph, cfg.method, cfg.prune_config(shift=a.shift), lam=cfg.lam, seed=cfg.seed)
        pruned = apply_prune(graph, plan)
    except Exception as e:
        raise PipelineError("prune", e) from e
    run = _Run(cfg)
    run.write("plan.json", plan.to_json())
    run.model("model", pruned)
    run.manifest("prune", {"source": str(a.model)})
    b, af = count_complexity(graph), count_complexity(pruned)
    print(f"pruned {plan.pruned_channels()} channels; FLOPs {b.flops} -> {af.flops}")


def cmd_finetune(a, cfg):
    _need(a, "model")
    data = load_data(cfg)
    graph = load(a.model)
    flops_before = count_complexity(load(a.before)).flops if a.before else None
    if cfg.post == "train_from_scratch" and flops_before is None:
        raise _Usage("--before is required with --post train_from_scratch")
    try:
        final, trace = recover(graph, data, cfg, flops_before)
    except Exception as e:
        raise PipelineError(cfg.post, e) from e
    run = _Run(cfg)
    run.model("model", final)
    if trace is not None:
        run.write(f"{cfg.post}_trace.csv", trace.to_csv())
    run.manifest("finetune", {"source": str(a.model)})
    print(f"{cfg.post}: test accuracy {_eval(final, data):.2f}%")


def cmd_report(a, cfg):
    _need(a, "before", "model")
    before, after = load(a.before), load(a.model)
    plan = PrunePlan.from_json(Path(a.plan).read_text()) if a.plan else None
    acc = {}
    if a.data:
        data = load_data(cfg)
        acc = {"base": _eval(before, data), "pre": _eval(after, data)}
    rep = report(before, after, plan, acc, seed=cfg.seed)
    run = _Run(cfg)
    run.write("report.json", rep.to_json())
    run.write("report.csv", rep.to_csv())
    run.manifest("report", {"before": str(a.before), "after": str(a.model)})
    print(f"FLOPs pruned {rep.pruned_flops_pct:.2f}%, params pruned {rep.pruned_params_pct:.2f}%")


def cmd_pipeline(a, cfg):
    for r in run_pipeline(cfg):
        print(f"{r.method}: pruned {r.channels_pruned}/{r.channels_total} channels, "
              f"{r.pruned_flops_pct:.2f}% FLOPs, acc {r.acc_base:.2f} -> {r.acc_pre:.2f} -> {r.acc_post}")


def cmd_sweep(a, cfg):
    trained = load(a.model) if a.model else None
    rows = run_shift_sweep(cfg, trained=trained)
    sys.stdout.write(rows_csv(rows, SHIFT_FIELDS))


def cmd_compare(a, cfg):
    reps = compare_methods(cfg)
    print(f"{len(reps)} rows written to {Path(cfg.out) / 'compare.csv'}")


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "finetune": cmd_finetune, "report": cmd_report,
            "pipeline": cmd_pipeline, "sweep-shift": cmd_sweep, "compare": cmd_compare}


def _classify(err: BaseException) -> str:
    if isinstance(err, PipelineError):
        err = err.__cause__ or err
    if isinstance(err, (_Usage, argparse.ArgumentError)):
        return "usage"
    if isinstance(err, (FileNotFoundError, CifarFormatError)):
        return "data"
    if isinstance(err, ModelFileError):
        return "model"
    if isinstance(err, TrainingDiverged):
        return "train"
    if isinstance(err, (SurgeryError, DegenerateDistribution)):
        return "prune"
    return "other"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        COMMANDS[args.verb](args, cfg)
    except Exception as e:
        kind = _classify(e)
        stage = e.stage if isinstance(e, PipelineError) else args.verb
        msg = str(e) if isinstance(e, PipelineError) else f"[{stage}] {type(e).__name__}: {e}"
        print(f"otprune: {msg}", file=sys.stderr)
        return EXIT_CODES[kind]
    return 0


if __name__ == "__main__":
    sys.exit(main())
