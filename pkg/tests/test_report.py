import csv
import io

import numpy as np
import pytest

from otprune.complexity import count_complexity
from otprune.graph import GraphBuilder
from otprune.presets import build_preset
from otprune.report import CSV_FIELDS, PruneReport, report, reports_csv
from otprune.surgery import apply_prune, identity_plan, plan_prune


def seq_net():
    b = GraphBuilder((3, 6, 6), np.random.default_rng(0))
    x = b.relu(b.bn(b.conv("input", 8)))
    return b.build(b.conv(x, 4))


def test_identity_plan_reports_zero():
    g = build_preset("toy_cnn", 4)
    rep = report(g, apply_prune(g, identity_plan(g)), identity_plan(g))
    assert rep.pruned_flops_pct == 0 and rep.pruned_params_pct == 0 and rep.channels_pruned == 0


def test_sequential_percentages_match_hand_count():
    g = seq_net()
    plan = identity_plan(g)
    plan.per_bn["bn0"].keep = [True, False, True, False, True, True, False, True]
    h = apply_prune(g, plan)
    rep = report(g, h, plan, {"pre": 50.0})
    params_before = 8 * 3 * 9 + 4 * 8 + 4 * 8 * 9
    params_after = 5 * 3 * 9 + 4 * 5 + 4 * 5 * 9
    assert rep.params_before == params_before and rep.params_after == params_after
    assert rep.pruned_params_pct == pytest.approx(100 * (1 - params_after / params_before))
    assert rep.channels == {"bn0": [5, 8]}
    assert rep.flops_after <= rep.flops_before


def test_json_round_trip():
    g = build_preset("toy_cnn", 4)
    g.node("bn1").tensors["gamma"][:3] = 0
    plan = plan_prune(g, "OT", lam=0.03, seed=2)
    rep = report(g, apply_prune(g, plan), plan, {"base": 99.0, "pre": 98.5, "post": 99.25}, lam=0.03, seed=2)
    back = PruneReport.from_json(rep.to_json())
    assert back == rep
    assert back.to_json() == rep.to_json()


def test_csv_row_and_empty_post():
    g = build_preset("toy_cnn", 4)
    rep = report(g, g, None, {"pre": 97.5}, method="OT", lam=1e-2, delta=1e-3, seed=0)
    rows = list(csv.DictReader(io.StringIO(reports_csv([rep, rep]))))
    assert list(rows[0].keys()) == CSV_FIELDS
    assert len(rows) == 2
    assert rows[0]["acc_post"] == "" and rows[0]["acc_pre"] == "97.5"
    assert rows[0]["flops_before"] == str(count_complexity(g).flops)


def test_counts_never_increase():
    g = build_preset("toy_cnn", 4)
    for bn in g.batchnorms():
        bn.tensors["gamma"][::3] = 1e-7
    plan = plan_prune(g, "OT")
    rep = report(g, apply_prune(g, plan), plan)
    assert rep.flops_after < rep.flops_before and rep.params_after < rep.params_before
    assert all(k <= t for k, t in rep.channels.values())
