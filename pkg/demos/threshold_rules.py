"""Per-layer optimal thresholds versus one global percentile.

Two layers whose important scales live at different magnitudes: the global
percentile cut (network slimming) strips the quieter layer, while the
per-layer rule finds each layer's own gap.

    python3 demos/threshold_rules.py
"""
import numpy as np

from otprune.thresholding import find_threshold, histogram, ns_threshold, prune_mask, separation_stats

rng = np.random.default_rng(0)
loud = np.concatenate([rng.uniform(1e-7, 1e-6, 12), rng.uniform(0.6, 1.4, 10)])
quiet = np.concatenate([rng.uniform(1e-8, 1e-7, 6), rng.uniform(0.04, 0.09, 10)])
layers = {"loud": loud, "quiet": quiet}

print("optimal thresholds (delta = 1e-3)")
for name, g in layers.items():
    th = find_threshold(g)
    st = separation_stats(g, th)
    print(f"  {name:5s} threshold {th:.3g}  kept {prune_mask(g, th).sum():2d}/{g.size}"
          f"  alpha {st.alpha:.1e}  beta {st.beta:.1f}  delta band ({st.lower_bound:.1e}, {st.upper_bound:.1e})")

# a global cut sized to remove as many channels as the per-layer rule did
n_pruned = sum((~prune_mask(g, find_threshold(g))).sum() for g in layers.values())
pooled = np.concatenate(list(layers.values()))
pct = (n_pruned + 6) / pooled.size      # a few more, as a coarse percentile sweep would
th_ns = ns_threshold(pooled, pct)
print(f"\nglobal percentile {pct:.0%} -> threshold {th_ns:.3g}")
for name, g in layers.items():
    print(f"  {name:5s} kept {prune_mask(g, th_ns).sum():2d}/{g.size}")

print("\nlog10 histogram of the quiet layer")
edges, counts = histogram(quiet, bins=8, log10_scale=True)
for lo, hi, c in zip(edges[:-1], edges[1:], counts):
    print(f"  [{lo:6.2f}, {hi:6.2f})  {'#' * int(c)}")
