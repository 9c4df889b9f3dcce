"""Channel pruning of batch-normalized CNNs.

Sparsity training puts an L1 penalty on batch-norm scales; a per-layer
"optimal threshold" then separates negligible channels from important ones,
and graph surgery removes them (or masks them where channels are shared).
"""
from .complexity import ComplexityCount, count_complexity
from .data import Dataset, load_cifar10, make_synthetic
from .engine import accuracy, forward
from .graph import GraphError, LayerNode, NetworkGraph, check, validate
from .io import ModelFileError, load, save
from .pipeline import PipelineConfig, compare_methods, run_pipeline, run_shift_sweep
from .presets import build_preset
from .report import PruneReport, report
from .surgery import PruneConfig, PrunePlan, SurgeryError, apply_prune, plan_prune
from .thresholding import (DegenerateDistribution, GammaSet, ThresholdConfig, find_threshold,
                           global_threshold, histogram, ns_threshold, separation_stats)
from .trainer import TrainConfig, TrainTrace, fine_tune, train, train_from_scratch

__version__ = "0.1.0"
