"""Sparsity training, optimal-threshold pruning and recovery on toy_cnn.

Trains toy_cnn on the synthetic 4-class data with the L1 penalty on BN
scales, shows that each layer's scales split into two modes, prunes at the
per-layer thresholds, sweeps the thresholds up and down, and compares with
a global percentile cut that removes the same number of channels.

Takes about a minute.  Artifacts of the final pipeline run go to
runs/demo_pipeline.

    python3 demos/toy_pipeline.py
"""
from dataclasses import replace

import numpy as np

from otprune.engine import accuracy
from otprune.pipeline import PipelineConfig, compare_methods, load_data, run_pipeline, run_shift_sweep
from otprune.presets import build_preset
from otprune.thresholding import find_threshold, histogram, separation_stats
from otprune.trainer import train

cfg = PipelineConfig(out="runs/demo_pipeline")
data = load_data(cfg)
print(f"training toy_cnn, lambda={cfg.lam}, {cfg.epochs} epochs ...")
graph = build_preset(cfg.preset, data.num_classes, data.input_shape, cfg.seed)
trained, trace = train(graph, data, cfg.train_config())
print(f"test accuracy {trace.test_acc[-1]:.2f}%, L1 penalty {trace.l1_penalty[-1]:.4f}\n")

for name, g in trace.gammas.items():
    th = find_threshold(g, cfg.prune_config().threshold_config())
    st = separation_stats(g, th)
    edges, counts = histogram(g, bins=14, log10_scale=True)
    bars = "".join(" .:-=+*#"[min(int(c), 7)] for c in counts[1:])
    print(f"{name}: keep {int((np.abs(g) >= th).sum())}/{g.size}  alpha {st.alpha:.1e}  "
          f"log10|gamma| {edges[1]:.1f} [{bars}] {edges[-1]:.1f}")

print("\nthreshold shift sweep (log10 offset of every layer's threshold)")
print("  shift  FLOPs pruned  channels kept  accuracy")
for r in run_shift_sweep(replace(cfg, post="none"), data, trained=trained, write=False):
    print(f"  {r['shift']:5.2f}  {r['pruned_flops_pct']:11.1f}%  {r['channels_kept']:13d}  {r['acc_pre']:7.2f}%")

ot, ns = compare_methods(replace(cfg, post="none", lam_sweep=[cfg.lam]), data,
                         trained={(cfg.seed, cfg.lam): trained}, write=False)
print(f"\nsame channel budget: OT {ot.acc_pre:.2f}% vs global percentile {ns.acc_pre:.2f}% before fine-tuning")

print("\nfull pipeline, two rounds of train -> prune -> fine-tune")
for i, rep in enumerate(run_pipeline(replace(cfg, iterations=2), data), start=1):
    print(f"  round {i}: pruned {rep.channels_pruned} channels, {rep.pruned_flops_pct:.1f}% FLOPs, "
          f"accuracy {rep.acc_base:.2f} -> {rep.acc_pre:.2f} -> {rep.acc_post:.2f}")
print(f"artifacts under {cfg.out}/")
