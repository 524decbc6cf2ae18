"""Disaggregation metrics: RMSE, ANE, on/off confusion counts, accuracy, F1.

Per-appliance results roll up into an "Overall" record that is the plain
(unweighted) mean over appliances.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

DEFAULT_THRESHOLD = 10.0


class MetricError(ValueError):
    pass


def _pair(truth, pred) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(truth, dtype=float).ravel()
    p = np.asarray(pred, dtype=float).ravel()
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: truth has {t.size} samples, prediction has {p.size}")
    if t.size == 0:
        raise MetricError("empty series")
    return t, p


def rmse(truth, pred) -> float:
    t, p = _pair(truth, pred)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def ane(truth, pred) -> float:
    """|sum(truth) - sum(pred)| / sum(truth)."""
    t, p = _pair(truth, pred)
    total = float(t.sum())
    if total <= 0:
        raise MetricError("ANE undefined: true energy sums to zero")
    return abs(total - float(p.sum())) / total


def on_off_states(series, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    if threshold < 0:
        raise MetricError("threshold must be >= 0")
    return np.asarray(series, dtype=float) > threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(truth_states, pred_states) -> ConfusionCounts:
    t = np.asarray(truth_states, dtype=bool).ravel()
    p = np.asarray(pred_states, dtype=bool).ravel()
    if t.shape != p.shape:
        raise MetricError(f"length mismatch: {t.size} truth states vs {p.size} predicted")
    return ConfusionCounts(
        tp=int(np.sum(t & p)),
        fp=int(np.sum(~t & p)),
        tn=int(np.sum(~t & ~p)),
        fn=int(np.sum(t & ~p)),
    )


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise MetricError("accuracy undefined for zero time slices")
    return (c.tp + c.tn) / c.total


def precision(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fp) if c.tp else 0.0


def recall(c: ConfusionCounts) -> float:
    return c.tp / (c.tp + c.fn) if c.tp else 0.0


def f1(c: ConfusionCounts) -> float:
    """Harmonic mean of precision and recall; 0 whenever tp == 0."""
    if c.tp == 0:
        return 0.0
    p, r = precision(c), recall(c)
    return 2.0 * p * r / (p + r)


@dataclass
class ApplianceMetrics:
    ane: float
    rmse: float
    accuracy: float
    f1: float
    counts: ConfusionCounts | None = None
    n_points: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.counts is None:
            d["counts"] = None
        return d


def evaluate_appliance(truth, pred, threshold: float = DEFAULT_THRESHOLD) -> ApplianceMetrics:
    """All four metrics for one appliance.  NaN truth samples are dropped pairwise."""
    t, p = _pair(truth, pred)
    keep = ~np.isnan(t) & ~np.isnan(p)
    t, p = t[keep], p[keep]
    if t.size == 0:
        raise MetricError("no non-missing samples to evaluate")
    c = confusion(on_off_states(t, threshold), on_off_states(p, threshold))
    return ApplianceMetrics(ane(t, p), rmse(t, p), accuracy(c), f1(c), c, int(t.size))


def aggregate_overall(per_appliance: list[ApplianceMetrics]) -> ApplianceMetrics:
    if not per_appliance:
        raise MetricError("need at least one appliance to aggregate")
    def mean(attr):
        # shifted by the first value so identical records average back exactly
        vals = [float(getattr(m, attr)) for m in per_appliance]
        return vals[0] + math.fsum(v - vals[0] for v in vals) / len(vals)

    return ApplianceMetrics(
        ane=mean("ane"), rmse=mean("rmse"), accuracy=mean("accuracy"), f1=mean("f1"),
        counts=None, n_points=sum(m.n_points for m in per_appliance),
    )


@dataclass
class MetricsReport:
    per_appliance: dict[str, ApplianceMetrics]
    overall: ApplianceMetrics
    combined_ane: float | None = None
    thresholds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "appliances": {k: v.to_dict() for k, v in self.per_appliance.items()},
            "overall": self.overall.to_dict(),
            "combined_ane": self.combined_ane,
            "thresholds": self.thresholds,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def table_rows(self) -> list[list[str]]:
        """Rows laid out metric-by-appliance with a trailing Overall column.
        Accuracy and F1 are printed as percentages."""
        names = list(self.per_appliance)
        cols = [self.per_appliance[n] for n in names] + [self.overall]
        rows = [["Metrics"] + names + ["Overall"]]
        rows.append(["ANE"] + [repr(round(m.ane, 10)) for m in cols])
        rows.append(["RMSE"] + [repr(round(m.rmse, 10)) for m in cols])
        rows.append(["Accuracy (%)"] + [repr(round(100.0 * m.accuracy, 10)) for m in cols])
        rows.append(["F1 score (%)"] + [repr(round(100.0 * m.f1, 10)) for m in cols])
        return rows

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.table_rows())


def build_report(series: dict[str, tuple[np.ndarray, np.ndarray]],
                 thresholds: dict[str, float] | None = None) -> MetricsReport:
    """``series`` maps appliance name to (truth watts, predicted watts)."""
    thresholds = thresholds or {}
    per = {}
    used = {}
    for name, (t, p) in series.items():
        thr = float(thresholds.get(name, DEFAULT_THRESHOLD))
        used[name] = thr
        per[name] = evaluate_appliance(t, p, thr)
    combined = None
    lengths = {len(t) for t, _ in series.values()}
    if len(series) > 1 and len(lengths) == 1:
        tot_t = np.sum([np.asarray(t, float) for t, _ in series.values()], axis=0)
        tot_p = np.sum([np.asarray(p, float) for _, p in series.values()], axis=0)
        keep = ~np.isnan(tot_t) & ~np.isnan(tot_p)
        if tot_t[keep].sum() > 0:
            combined = ane(tot_t[keep], tot_p[keep])
    return MetricsReport(per, aggregate_overall(list(per.values())), combined, used)
