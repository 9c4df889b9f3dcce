"""Per-layer optimal thresholds for batch-norm scale magnitudes.

The threshold of a set of scales is the first value, in ascending order, at
which the running sum of squares reaches ``delta`` times the total.  Every
scale strictly below it is negligible.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np


class DegenerateDistribution(ValueError):
    """All scales of a set are zero, so no threshold is defined."""


@dataclass(frozen=True)
class GammaSet:
    values: np.ndarray
    origin: str = "network-global"

    def __post_init__(self):
        v = np.abs(np.asarray(self.values, dtype=np.float64)).reshape(-1)
        if v.size == 0:
            raise ValueError(f"{self.origin}: empty scale set")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @classmethod
    def union(cls, sets: Iterable["GammaSet"], origin="network-global") -> "GammaSet":
        return cls(np.concatenate([s.values for s in sets]), origin)


@dataclass(frozen=True)
class ThresholdConfig:
    delta: float = 1e-3
    p: float = 2.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.p < 1:
            raise ValueError("p must be >= 1")


def _as_set(gammas) -> GammaSet:
    return gammas if isinstance(gammas, GammaSet) else GammaSet(gammas)


def find_threshold(gammas, cfg: ThresholdConfig = ThresholdConfig()) -> float:
    g = _as_set(gammas)
    v = np.sort(g.values)
    powered = v ** cfg.p
    total = powered.sum()
    if not total > 0:
        raise DegenerateDistribution(f"{g.origin}: all scaling factors are zero")
    cum = np.cumsum(powered)
    i = int(np.searchsorted(cum, cfg.delta * total, side="left"))
    return float(v[min(i, v.size - 1)])


def global_threshold(all_gammas, cfg: ThresholdConfig = ThresholdConfig()) -> float:
    return find_threshold(all_gammas, cfg)


def ns_threshold(all_gammas, percent: float) -> float:
    """Network-slimming threshold: the sorted value at index floor(percent * n)."""
    if not 0 <= percent < 1:
        raise ValueError("percent must lie in [0, 1)")
    v = np.sort(_as_set(all_gammas).values)
    # the tiny slack keeps e.g. 0.29 * 100 from flooring to 28
    k = int(math.floor(percent * v.size + 1e-9))
    return float(v[min(k, v.size - 1)])


def prune_mask(gammas, threshold: float) -> np.ndarray:
    """Keep mask: True where |gamma| >= threshold."""
    return np.abs(np.asarray(gammas, dtype=np.float64)) >= threshold


@dataclass(frozen=True)
class SeparationStats:
    alpha: float
    beta: float
    ratio_n_i: float
    lower_bound: float
    upper_bound: float
    n_negligible: int
    n_important: int
    p: float = 2.0
    one_sided: bool = False

    def admits(self, delta: float) -> bool:
        """True when ``delta`` lies in the band that guarantees a gap split."""
        return not self.one_sided and self.lower_bound < delta <= self.upper_bound

    def to_dict(self):
        d = self.__dict__.copy()
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def separation_stats(gammas, gamma_th: float, p: float = 2.0) -> SeparationStats:
    v = _as_set(gammas).values
    neg, imp = v[v < gamma_th], v[v >= gamma_th]
    if neg.size == 0 or imp.size == 0:
        nan = float("nan")
        return SeparationStats(nan, nan, nan, nan, nan, int(neg.size), int(imp.size), p, one_sided=True)
    sup_n, inf_i, sup_i = neg.max(), imp.min(), imp.max()
    alpha = inf_i / sup_n if sup_n > 0 else math.inf
    beta = sup_i / inf_i
    ratio = neg.size / imp.size
    return SeparationStats(
        alpha=float(alpha), beta=float(beta), ratio_n_i=float(ratio),
        lower_bound=float(ratio * alpha ** (-p)), upper_bound=float(beta ** (-p) / v.size),
        n_negligible=int(neg.size), n_important=int(imp.size), p=p)


def histogram(gammas, bins: int = 30, log10_scale: bool = False):
    """Histogram of magnitudes.

    In log10 mode the edges are log10 values and exact zeros are counted in a
    leading underflow bin whose lower edge is ``-inf``.
    """
    if bins < 1:
        raise ValueError("bins must be >= 1")
    v = _as_set(gammas).values
    if not log10_scale:
        counts, edges = np.histogram(v, bins=bins)
        return edges, counts
    pos = v[v > 0]
    zeros = int(v.size - pos.size)
    if pos.size:
        counts, edges = np.histogram(np.log10(pos), bins=bins)
    else:
        counts, edges = np.zeros(bins, dtype=int), np.linspace(-1, 0, bins + 1)
    return np.concatenate([[-np.inf], edges]), np.concatenate([[zeros], counts])


def histogram_csv(edges, counts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_low", "bin_high", "count"])
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    return buf.getvalue()
