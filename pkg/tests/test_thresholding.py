import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from otprune.thresholding import (DegenerateDistribution, GammaSet, ThresholdConfig, find_threshold,
                                  global_threshold, histogram, histogram_csv, ns_threshold, prune_mask,
                                  separation_stats)


def brute_force_threshold(values, delta=1e-3, p=2.0):
    """Direct reading of the definition: the sorted element x_k such that the
    mass strictly before it is < delta*S and the mass through it is >= delta*S."""
    v = sorted(abs(x) for x in values)
    total = sum(x ** p for x in v)
    before = 0.0
    for x in v:
        through = before + x ** p
        if before < delta * total <= through:
            return x
        before = through
    return None


# -- worked examples -------------------------------------------------------------

def test_two_mode_example():
    th = find_threshold([1e-4, 2e-4, 0.5, 0.6, 0.7])
    assert th == 0.5
    assert prune_mask([1e-4, 2e-4, 0.5, 0.6, 0.7], th).tolist() == [False, False, True, True, True]


def test_sign_is_ignored():
    assert find_threshold([-1e-4, 2e-4, -0.5, 0.6]) == 0.5


def test_all_equal_keeps_everything():
    th = find_threshold([0.3] * 8)
    assert th == pytest.approx(0.3)
    assert prune_mask([0.3] * 8, th).all()


def test_single_value():
    assert find_threshold([0.2]) == pytest.approx(0.2)


def test_all_zero_raises():
    with pytest.raises(DegenerateDistribution):
        find_threshold([0.0, 0.0, 0.0])


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        GammaSet([])


def test_zeros_are_pruned():
    g = [0.0, 0.0, 0.4, 0.5]
    th = find_threshold(g)
    assert th == 0.4
    assert prune_mask(g, th).tolist() == [False, False, True, True]


def test_delta_bounds():
    with pytest.raises(ValueError):
        ThresholdConfig(delta=0.0)
    with pytest.raises(ValueError):
        ThresholdConfig(delta=1.0)


def test_larger_delta_prunes_more():
    g = np.array([0.01, 0.02, 0.05, 0.1, 0.3, 0.5, 0.9])
    ths = [find_threshold(g, ThresholdConfig(d)) for d in (1e-4, 1e-3, 1e-2, 1e-1)]
    assert ths == sorted(ths)


def test_global_threshold_on_union():
    a, b = GammaSet([1e-5, 0.4], "bn0"), GammaSet([1e-6, 0.3, 0.5], "bn1")
    allg = GammaSet.union([a, b])
    assert len(allg) == 5
    assert global_threshold(allg) == 0.3


# -- network slimming threshold ----------------------------------------------------

def test_ns_threshold_index():
    v = np.arange(1, 101) / 100.0
    assert ns_threshold(v, 0.29) == pytest.approx(0.30)   # index floor(29) -> 30th value
    assert ns_threshold(v, 0.0) == pytest.approx(0.01)
    assert (prune_mask(v, ns_threshold(v, 0.5)) == False).sum() == 50  # noqa: E712


def test_ns_percent_range():
    with pytest.raises(ValueError):
        ns_threshold([0.1, 0.2], 1.0)


# -- oracle and invariants ---------------------------------------------------------

magnitudes = st.floats(min_value=1e-8, max_value=10.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=400, deadline=None)
@given(st.lists(magnitudes, min_size=1, max_size=12, unique=True))
def test_matches_brute_force(vals):
    assert find_threshold(vals) == brute_force_threshold(vals)


@settings(max_examples=300, deadline=None)
@given(st.lists(magnitudes, min_size=1, max_size=40), st.floats(1e-6, 0.5))
def test_pruned_mass_below_delta(vals, delta):
    g = np.abs(np.array(vals))
    th = find_threshold(g, ThresholdConfig(delta))
    pruned = g[g < th]
    assert (pruned ** 2).sum() < delta * (g ** 2).sum() * (1 + 1e-12)
    assert (g >= th).any()


@settings(max_examples=200, deadline=None)
@given(st.lists(magnitudes, min_size=1, max_size=30), st.floats(1e-3, 1e3))
def test_scale_invariant(vals, c):
    g = np.array(vals)
    m1 = prune_mask(g, find_threshold(g))
    m2 = prune_mask(g * c, find_threshold(g * c))
    assert (m1 == m2).all()


@settings(max_examples=200, deadline=None)
@given(st.lists(magnitudes, min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_permutation_invariant(vals, rnd):
    perm = list(vals)
    rnd.shuffle(perm)
    assert find_threshold(vals) == find_threshold(perm)


# -- separation statistics ---------------------------------------------------------

def test_separation_stats_values():
    g = [1e-4, 2e-4, 0.5, 1.0]
    s = separation_stats(g, 0.5)
    assert s.alpha == pytest.approx(0.5 / 2e-4)
    assert s.beta == pytest.approx(2.0)
    assert s.lower_bound == pytest.approx(1.0 * s.alpha ** -2)
    assert s.upper_bound == pytest.approx(0.25 / 4)
    assert s.admits(1e-3)
    assert not s.admits(0.5)


def test_one_sided_split_flagged():
    s = separation_stats([0.3, 0.4], 0.1)
    assert s.one_sided and not s.admits(1e-3)
    assert s.to_dict()["alpha"] is None


def constructed_bimodal(rng, n_neg, n_imp, alpha, beta):
    inf_i = 1.0
    imp = inf_i * np.exp(rng.uniform(0, np.log(beta), n_imp))
    imp[0], imp[-1] = inf_i, inf_i * beta
    sup_n = inf_i / alpha
    neg = sup_n * rng.uniform(0, 1, n_neg)
    neg[0] = sup_n
    return neg, imp


def test_gap_split_when_delta_in_band():
    rng = np.random.default_rng(0)
    hits = trials = 0
    while trials < 200:
        alpha = 10 ** rng.uniform(3, 6)
        beta = rng.uniform(2, 100)
        neg, imp = constructed_bimodal(rng, int(rng.integers(1, 40)), int(rng.integers(1, 40)), alpha, beta)
        g = np.concatenate([neg, imp])
        s = separation_stats(g, 1.0)
        if not s.admits(1e-3):
            continue
        trials += 1
        th = find_threshold(g)
        hits += set(np.flatnonzero(g < th)) == set(range(neg.size))
    assert hits == trials


# -- histograms --------------------------------------------------------------------

def test_histogram_linear_counts():
    edges, counts = histogram([0.1, 0.2, 0.3, 0.9], bins=4)
    assert counts.sum() == 4 and edges.size == 5


def test_histogram_log_mode_zero_bin():
    edges, counts = histogram([0.0, 0.0, 1e-5, 1e-4, 0.5], bins=5, log10_scale=True)
    assert edges[0] == -math.inf
    assert counts[0] == 2 and counts.sum() == 5


def test_histogram_bimodal_clusters():
    g = np.concatenate([np.full(10, 1e-5) * np.linspace(1, 2, 10), np.linspace(0.3, 0.9, 6)])
    _, counts = histogram(g, bins=12, log10_scale=True)
    occupied = np.flatnonzero(counts[1:])
    assert np.diff(occupied).max() > 1


def test_histogram_csv_header():
    edges, counts = histogram([0.1, 0.5], bins=2)
    lines = histogram_csv(edges, counts).splitlines()
    assert lines[0] == "bin_low,bin_high,count" and len(lines) == 3


# -- further worked examples -------------------------------------------------------

def test_example_two_tiny_values():
    assert find_threshold([0.001, 0.002, 0.5, 0.6]) == 0.5


def test_example_uniform_set_prunes_nothing():
    th = find_threshold([1, 1, 1, 1])
    assert th == 1 and prune_mask([1, 1, 1, 1], th).all()


def test_example_three_micro_values():
    g = [1e-6, 1e-6, 1e-6, 0.1, 0.2]
    th = find_threshold(g)
    assert th == 0.1
    assert (~prune_mask(g, th)).sum() == 3


def test_global_threshold_duplication_invariant():
    layer = [1e-5, 1e-5, 0.3, 0.4]
    assert global_threshold(layer + layer) == find_threshold(layer)


def test_ns_ten_values():
    v = np.linspace(0.1, 1.0, 10)
    th = ns_threshold(v, 0.3)
    assert th == pytest.approx(0.4)
    assert np.allclose(v[~prune_mask(v, th)], [0.1, 0.2, 0.3])


def test_ns_over_prunes_layer_with_small_important_mode():
    # layer A: important scales around 1; layer B: important mode an order of
    # magnitude lower but still far above its own negligible mode
    a = np.concatenate([np.full(10, 1e-6), np.linspace(0.8, 1.2, 10)])
    b = np.concatenate([np.full(10, 1e-7), np.linspace(0.05, 0.09, 10)])
    th = ns_threshold(np.concatenate([a, b]), 0.73)
    ns_kept_b = prune_mask(b, th).sum()
    ot_kept_b = prune_mask(b, find_threshold(b)).sum()
    assert ot_kept_b == 10 and ns_kept_b < ot_kept_b


def test_separation_example():
    g = [1e-6, 1e-6, 1e-6, 0.1, 0.2]
    s = separation_stats(g, 0.1)
    assert s.alpha == pytest.approx(1e5)
    assert s.beta == pytest.approx(2.0)
    assert s.ratio_n_i == pytest.approx(1.5)
    assert s.lower_bound == pytest.approx(1.5e-10)
    assert s.upper_bound == pytest.approx(0.05)


def test_histogram_single_bin():
    _, counts = histogram([1, 1, 1], bins=1)
    assert counts.tolist() == [3]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 5, allow_nan=False), min_size=1, max_size=50), st.integers(1, 20), st.booleans())
def test_histogram_conserves_count(vals, bins, log_mode):
    _, counts = histogram(vals, bins=bins, log10_scale=log_mode)
    assert counts.sum() == len(vals)


@settings(max_examples=200, deadline=None)
@given(st.lists(magnitudes, min_size=1, max_size=30), st.floats(1e-6, 0.3), st.floats(1e-6, 0.3))
def test_monotone_in_delta(vals, d1, d2):
    lo, hi = sorted((d1, d2))
    assert find_threshold(vals, ThresholdConfig(lo)) <= find_threshold(vals, ThresholdConfig(hi))


@settings(max_examples=300, deadline=None)
@given(st.lists(magnitudes, min_size=1, max_size=40, unique=True))
def test_double_inequality_holds(vals):
    g = np.array(vals)
    th = find_threshold(g)
    total = (g ** 2).sum()
    before = (g[g < th] ** 2).sum()
    assert th in g
    assert before < 1e-3 * total <= before + th ** 2 * (1 + 1e-12)


def test_ties_return_crossing_element():
    # no member satisfies the double inequality here: the two 0.25s share one
    # strict-less prefix; the crossing element is returned and both are kept
    g = [8.0, 0.25, 0.25]
    assert brute_force_threshold(g) is not None  # sequential reading still finds it
    th = find_threshold(g)
    assert th == 0.25 and prune_mask(g, th).all()
