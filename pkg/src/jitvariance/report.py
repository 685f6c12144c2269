"""Markdown/CSV emitters for the variance, runtime and significance tables and
the per-setting boxplot data.

Table numbers are formatted by ``fmt_fixed``: the exact binary value of the
float (times 100 for percentages) rounded half-to-even. Markdown and CSV
share it, so the two formats can never disagree.
"""

from __future__ import annotations

import csv
import io
import json
import math
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from pathlib import Path
from typing import Sequence

from .harness import (
    CONFIG_FILE,
    DEFAULT_ALPHA,
    RUNS_FILE,
    Comparison,
    ComparisonPlan,
    compare,
    read_runs,
    setting_order,
    summarize,
)
from .metrics import METRICS, RunRecord, VarianceSummary
from .seedctl import setting

METRIC_TITLES = {
    "auc": "AUC score (%)",
    "acc_faulty": "per-class: faulty (%)",
    "acc_clean": "per-class: clean (%)",
}
VARIANCE_COLUMNS = [f"{m}_{stat}" for m in METRICS for stat in ("maxdiff", "stddev")]
QUARTILE_RULE = "linear interpolation at position (n-1)*p of the sorted values (Hyndman-Fan type 7)"


def fmt_fixed(value: float, places: int = 2, scale: int = 1) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    q = Decimal(1).scaleb(-places)
    with localcontext() as ctx:
        ctx.prec = 400  # every finite double fits, whatever its exponent
        return str((Decimal(value) * scale).quantize(q, rounding=ROUND_HALF_EVEN))


def fmt_pct(value: float) -> str:
    return fmt_fixed(value, 2, 100)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]], comments: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _md_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _p_state(sid: str) -> str:
    return "on" if setting(sid).p_on else "off"


def _filter(summaries: Sequence[VarianceSummary], p_state: str | None) -> list[VarianceSummary]:
    return [s for s in summaries if p_state is None or _p_state(s.setting_id) == p_state]


# -- variance ----------------------------------------------------------------


def _variance_values(s: VarianceSummary) -> list[float]:
    return [s.max_diff[m] if stat == "maxdiff" else s.std_dev[m] for m in METRICS for stat in ("maxdiff", "stddev")]


def column_maxima(summaries: Sequence[VarianceSummary]) -> list[set[str]]:
    """Per row, the variance columns holding that column's (positive) maximum."""
    values = [_variance_values(s) for s in summaries]
    marks = [set() for _ in summaries]
    for c, col in enumerate(VARIANCE_COLUMNS):
        top = max((v[c] for v in values), default=0.0)
        if top <= 0.0:
            continue
        for i, v in enumerate(values):
            if v[c] == top:
                marks[i].add(col)
    return marks


def emit_variance_table(summaries: Sequence[VarianceSummary], p_state: str | None = None,
                        title: str | None = None) -> tuple[str, str]:
    """(markdown, csv). Percent values with 2 decimals; markdown bolds the
    column maxima, CSV lists them in ``column_maxima``."""
    rows = _filter(summaries, p_state)
    marks = column_maxima(rows)
    md_rows, csv_rows = [], []
    for s, mk in zip(rows, marks):
        cells = [fmt_pct(v) for v in _variance_values(s)]
        md_rows.append([s.setting_id] + [f"**{c}**" if col in mk else c for c, col in zip(cells, VARIANCE_COLUMNS)])
        csv_rows.append([s.setting_id, _p_state(s.setting_id), str(s.n_runs)] + cells
                        + [";".join(c for c in VARIANCE_COLUMNS if c in mk)])
    header = ["Setting"]
    for m in METRICS:
        header += [f"{METRIC_TITLES[m]} MaxDiff", f"{METRIC_TITLES[m]} StdDev"]
    md = (f"### {title}\n\n" if title else "") + _md_table(header, md_rows)
    csv_text = _csv_text(
        ["setting", "p_state", "n_runs"] + [c + "_pct" for c in VARIANCE_COLUMNS] + ["column_maxima"], csv_rows
    )
    return md, csv_text


def variance_report(summaries: Sequence[VarianceSummary], dataset_label: str) -> tuple[str, str]:
    blocks = []
    for state in ("off", "on"):
        if _filter(summaries, state):
            blocks.append(emit_variance_table(summaries, state, f"Variance - {dataset_label} - P (GPU analog) {state}")[0])
    md = "\n".join(blocks)
    return md, emit_variance_table(summaries, None)[1]


# -- runtime -----------------------------------------------------------------


def emit_runtime_table(summaries: Sequence[VarianceSummary], contended: bool = False) -> tuple[str, str]:
    rows = [[s.setting_id, str(s.n_runs), fmt_fixed(s.runtime_mean / 60.0), fmt_fixed(s.runtime_std / 60.0)]
            for s in summaries]
    md = "### Training time (minutes)\n\n" + _md_table(["Setting", "Runs", "Mean", "StdDev"], rows)
    comments = []
    if contended:
        note = "runtimes contended: runs executed concurrently (max parallel runs > 1)"
        md += f"\n_{note}_\n"
        comments.append(note)
    return md, _csv_text(["setting", "n_runs", "mean_minutes", "stddev_minutes"], rows, comments)


# -- significance ------------------------------------------------------------


def emit_significance_table(comparisons: Sequence[Comparison], alpha: float) -> tuple[str, str]:
    """Statistic and p-value are printed with 4 decimals."""
    rows = []
    for c in comparisons:
        r = c.result
        rows.append([c.baseline, c.treatment, c.kind, c.metric, r.test, fmt_fixed(r.statistic, 4),
                     fmt_fixed(r.p_value, 4), "yes" if c.significant else "no", r.method_note])
    header = ["baseline", "treatment", "kind", "metric", "test", "statistic", "p_value", "significant", "method"]
    n_pairs = len({(c.baseline, c.treatment) for c in comparisons})
    md = f"### Significance (alpha = {alpha}; {n_pairs} setting pairs)\n\n" + _md_table(header, rows)
    return md, _csv_text(header, rows, [f"alpha={alpha}"])


# -- boxplot data ------------------------------------------------------------


def quantile(sorted_values: Sequence[float], p: float) -> float:
    n = len(sorted_values)
    pos = (n - 1) * p
    lo = math.floor(pos)
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


def five_numbers(values: Sequence[float]) -> dict[str, float]:
    v = sorted(float(x) for x in values)
    return {
        "min": v[0],
        "q1": quantile(v, 0.25),
        "median": quantile(v, 0.5),
        "q3": quantile(v, 0.75),
        "max": v[-1],
    }


def emit_boxplot_data(records: Sequence[RunRecord], metric: str, settings: Sequence[str] | None = None) -> str:
    """Long-format CSV: per setting, one ``run`` row per value then the five
    summary rows. Values are raw (unrounded) metric values."""
    rows = []
    for sid in setting_order(records, settings):
        rs = sorted((r for r in records if r.setting_id == sid and r.ok), key=lambda r: r.run_index)
        if len(rs) < 2:
            continue
        vals = [r.metric(metric) for r in rs]
        rows += [[sid, "run", str(r.run_index), repr(float(v))] for r, v in zip(rs, vals)]
        rows += [[sid, k, "", repr(v)] for k, v in five_numbers(vals).items()]
    return _csv_text(["setting", "kind", "run", metric], rows, [f"metric={metric}", f"quartiles: {QUARTILE_RULE}"])


# -- whole report ------------------------------------------------------------


def _dataset_label(cfg: dict) -> str:
    ds = cfg.get("dataset", {})
    if "path" in ds:
        return Path(ds["path"]).name
    return f"{ds.get('preset')} (n={ds.get('n_commits')})"


def load_experiment(exp_dir: str | Path) -> tuple[dict, list[RunRecord]]:
    exp_dir = Path(exp_dir)
    cfg_path = exp_dir / CONFIG_FILE
    cfg = json.loads(cfg_path.read_text(encoding="utf-8")) if cfg_path.exists() else {}
    return cfg, read_runs(exp_dir / RUNS_FILE)


def significance(records: Sequence[RunRecord], settings: Sequence[str], alpha: float) -> list[Comparison]:
    plan = ComparisonPlan.default(settings)
    out = []
    for metric in METRICS:
        out += compare(records, plan, metric, alpha)
    return out


def build_report(exp_dir: str | Path, out_dir: str | Path | None = None, formats: Sequence[str] = ("md", "csv"),
                 alpha: float = DEFAULT_ALPHA) -> list[Path]:
    """Write variance, runtime and significance tables plus boxplot CSVs."""
    cfg, records = load_experiment(exp_dir)
    out = Path(out_dir) if out_dir is not None else Path(exp_dir)
    out.mkdir(parents=True, exist_ok=True)
    settings = setting_order(records)  # canonical N, A, W, D, B, then P-prefixed
    summaries = summarize(records, settings)
    contended = cfg.get("max_parallel", 1) > 1

    tables = {
        "variance": variance_report(summaries, _dataset_label(cfg)),
        "runtime": emit_runtime_table(summaries, contended),
        "significance": emit_significance_table(significance(records, settings, alpha), alpha),
    }
    written = []
    for name, (md, csv_text) in tables.items():
        for fmt, text in (("md", md), ("csv", csv_text)):
            if fmt in formats:
                path = out / f"{name}.{fmt}"
                path.write_text(text, encoding="utf-8", newline="\n")
                written.append(path)
    for metric in METRICS:
        path = out / f"boxplot_{metric}.csv"
        path.write_text(emit_boxplot_data(records, metric, settings), encoding="utf-8", newline="\n")
        written.append(path)
    return written
