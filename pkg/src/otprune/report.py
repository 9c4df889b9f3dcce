"""Before/after accounting for a pruning step."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

from .complexity import count_complexity
from .graph import NetworkGraph, check
from .surgery import PrunePlan, kept_channels

CSV_FIELDS = ["method", "lambda", "delta", "flops_before", "flops_after", "params_before",
              "params_after", "acc_pre", "acc_post", "seed"]


@dataclass
class PruneReport:
    method: str
    flops_before: int
    flops_after: int
    params_before: int
    params_after: int
    channels: dict = field(default_factory=dict)   # bn -> [kept, total]
    acc_base: float | None = None    # unpruned model
    acc_pre: float | None = None     # pruned, before any recovery training
    acc_post: float | None = None    # after fine-tuning / training from scratch
    lam: float | None = None
    delta: float | None = None
    ns_percent: float | None = None
    seed: int | None = None
    branches_removed: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def pruned_flops_pct(self) -> float:
        return 100.0 * (1 - self.flops_after / self.flops_before) if self.flops_before else 0.0

    @property
    def pruned_params_pct(self) -> float:
        return 100.0 * (1 - self.params_after / self.params_before) if self.params_before else 0.0

    @property
    def channels_total(self) -> int:
        return sum(t for _, t in self.channels.values())

    @property
    def channels_kept(self) -> int:
        return sum(k for k, _ in self.channels.values())

    @property
    def channels_pruned(self) -> int:
        return self.channels_total - self.channels_kept

    @property
    def pruned_channels_pct(self) -> float:
        return 100.0 * self.channels_pruned / self.channels_total if self.channels_total else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(pruned_flops_pct=self.pruned_flops_pct, pruned_params_pct=self.pruned_params_pct,
                 pruned_channels_pct=self.pruned_channels_pct)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_plain)

    @classmethod
    def from_json(cls, text: str) -> "PruneReport":
        d = json.loads(text)
        for k in ("pruned_flops_pct", "pruned_params_pct", "pruned_channels_pct"):
            d.pop(k, None)
        d["channels"] = {k: list(v) for k, v in d["channels"].items()}
        return cls(**d)

    def csv_row(self) -> dict:
        return {"method": self.method, "lambda": _fmt(self.lam), "delta": _fmt(self.delta),
                "flops_before": self.flops_before, "flops_after": self.flops_after,
                "params_before": self.params_before, "params_after": self.params_after,
                "acc_pre": _fmt(self.acc_pre), "acc_post": _fmt(self.acc_post), "seed": _fmt(self.seed)}

    def to_csv(self) -> str:
        return reports_csv([self])


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def _plain(o):
    if hasattr(o, "item"):
        return o.item()
    raise TypeError(type(o))


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def report(graph_before: NetworkGraph, graph_after: NetworkGraph, plan: PrunePlan | None = None,
           accuracies: dict | None = None, **meta) -> PruneReport:
    """Fill a PruneReport from the two graphs.

    ``accuracies`` may carry ``base``, ``pre`` and ``post`` (percent);
    ``meta`` fills ``lam``, ``delta``, ``ns_percent`` and ``seed``.
    """
    check(graph_before)
    check(graph_after)
    acc = accuracies or {}
    before, after = count_complexity(graph_before), count_complexity(graph_after)
    total = kept_channels(graph_before)
    kept = kept_channels(graph_after)
    channels = {name: [kept.get(name, 0), total[name]] for name in total}
    cfg = plan.config if plan else {}
    return PruneReport(
        method=plan.method if plan else meta.get("method", "none"),
        flops_before=before.flops, flops_after=after.flops,
        params_before=before.params, params_after=after.params,
        channels=channels,
        acc_base=acc.get("base"), acc_pre=acc.get("pre"), acc_post=acc.get("post"),
        lam=meta.get("lam", cfg.get("lam")),
        delta=meta.get("delta", cfg.get("delta") if plan and plan.method == "OT" else None),
        ns_percent=meta.get("ns_percent", cfg.get("ns_percent") if plan and plan.method == "NS" else None),
        seed=meta.get("seed", cfg.get("seed")),
        branches_removed=list(plan.branches_to_remove) if plan else [],
        warnings=list(plan.warnings) if plan else [],
    )
