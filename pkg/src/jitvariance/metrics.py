"""Per-run evaluation and per-setting variance aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

METRICS = ("auc", "acc_faulty", "acc_clean")
DEFAULT_THRESHOLD = 0.5


class MetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Rank-based AUC; tied scores count one half per positive/negative pair.

    Works on doubled mid-ranks so the numerator is an exact integer and the
    result equals the pairwise definition bit for bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != len(y):
        raise MetricError("AUC undefined: need both classes and labels in {0, 1}")
    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    # tie groups [start, end) in sorted order; doubled mid-rank = start + end + 1
    boundaries = np.flatnonzero(np.diff(sorted_s)) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(s)]))
    doubled = np.repeat(starts + ends + 1, ends - starts)
    doubled_rank_sum = int(doubled[y[order] == 1].sum())
    numerator = doubled_rank_sum - n_pos * (n_pos + 1)  # = 2 * (wins + ties/2)
    return numerator / (2 * n_pos * n_neg)


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def acc_faulty(self) -> float:
        return self.tp / (self.tp + self.fn)

    @property
    def acc_clean(self) -> float:
        return self.tn / (self.tn + self.fp)


def classify_and_count(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> ConfusionMatrix:
    """Predict faulty iff ``score >= threshold`` (a score exactly at the
    threshold is faulty)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
    )


def _check_values(values: Sequence[float]) -> list[float]:
    vals = [float(v) for v in values]
    if len(vals) < 2:
        raise MetricError("need at least 2 values")
    return vals


def max_diff(values: Sequence[float]) -> float:
    vals = _check_values(values)
    return max(vals) - min(vals)


def std_dev(values: Sequence[float]) -> float:
    """Sample standard deviation (divisor n - 1), two-pass."""
    vals = _check_values(values)
    if max(vals) == min(vals):
        return 0.0
    n = len(vals)
    mean = math.fsum(vals) / n
    dev = [v - mean for v in vals]
    # scale first so tiny spreads do not underflow to zero when squared
    scale = max(abs(d) for d in dev)
    return scale * math.sqrt(math.fsum((d / scale) ** 2 for d in dev) / (n - 1))


def mean(values: Sequence[float]) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise MetricError("mean of no values")
    return math.fsum(vals) / len(vals)


@dataclass
class RunRecord:
    setting_id: str
    run_index: int
    auc: float | None
    acc_faulty: float | None
    acc_clean: float | None
    confusion: ConfusionMatrix | None
    runtime_seconds: float | None
    seeds: dict[str, int]
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def metric(self, name: str) -> float:
        if name == "runtime_seconds":
            return self.runtime_seconds
        if name not in METRICS:
            raise MetricError(f"unknown metric {name!r}")
        return getattr(self, name)


def evaluate_run(setting_id: str, run_index: int, scores, labels, runtime_seconds: float,
                 seeds: dict[str, int], threshold: float = DEFAULT_THRESHOLD) -> RunRecord:
    cm = classify_and_count(scores, labels, threshold)
    return RunRecord(
        setting_id=setting_id,
        run_index=run_index,
        auc=auc(scores, labels),
        acc_faulty=cm.acc_faulty,
        acc_clean=cm.acc_clean,
        confusion=cm,
        runtime_seconds=runtime_seconds,
        seeds=dict(seeds),
    )


@dataclass(frozen=True)
class VarianceSummary:
    setting_id: str
    max_diff: dict[str, float]
    std_dev: dict[str, float]
    runtime_mean: float
    runtime_std: float
    n_runs: int


def summarize_setting(records: Sequence[RunRecord]) -> VarianceSummary:
    if len(records) < 2:
        raise MetricError("need at least 2 runs to summarize")
    ids = {r.setting_id for r in records}
    if len(ids) != 1:
        raise MetricError(f"records mix settings: {sorted(ids)}")
    md, sd = {}, {}
    for m in METRICS:
        vals = [r.metric(m) for r in records]
        md[m] = max_diff(vals)
        sd[m] = std_dev(vals)
    runtimes = [r.runtime_seconds for r in records]
    return VarianceSummary(
        setting_id=ids.pop(),
        max_diff=md,
        std_dev=sd,
        runtime_mean=mean(runtimes),
        runtime_std=std_dev(runtimes),
        n_runs=len(records),
    )
