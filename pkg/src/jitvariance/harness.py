"""Experiment orchestration: every (setting, run) pair is trained, evaluated on
the frozen test split and appended to ``runs.jsonl``; aggregation and
significance testing read those records back."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from . import dataset as ds
from .metrics import METRICS, ConfusionMatrix, RunRecord, VarianceSummary, evaluate_run, summarize_setting
from .model import Hyperparams, TrainingDiverged, predict, train
from .seedctl import SETTING_IDS, plan_for_run, setting
from .stats import TestResult, levene, mann_whitney_u

log = logging.getLogger(__name__)

DEFAULT_MASTER_SEED = 1
DEFAULT_RUNS = 16
DEFAULT_ALPHA = 0.05
RUNS_FILE = "runs.jsonl"
CONFIG_FILE = "experiment.json"

# fields that must match for a resumed experiment to be the same experiment
_IDENTITY_KEYS = ("dataset", "tokenization", "hyperparams", "master_seed", "entropy")


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    out_dir: str
    dataset_path: str | None = None
    preset: str | None = "openstack-like"
    n_commits: int = 2000
    faulty_fraction: float | None = None
    gen_seed: int = 1
    message_len: int = ds.DEFAULT_MESSAGE_LEN
    code_len: int = ds.DEFAULT_CODE_LEN
    vocab_cap: int = ds.DEFAULT_VOCAB_CAP
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    settings: list[str] = field(default_factory=lambda: list(SETTING_IDS))
    runs_per_setting: int = DEFAULT_RUNS
    master_seed: int = DEFAULT_MASTER_SEED
    max_parallel: int = 1
    entropy: bool = False

    def __post_init__(self):
        if self.runs_per_setting < 2:
            raise ExperimentError("runs_per_setting must be >= 2")
        if not self.settings or len(set(self.settings)) != len(self.settings):
            raise ExperimentError("settings must be non-empty and unique")
        for sid in self.settings:
            setting(sid)
        if self.max_parallel < 1:
            raise ExperimentError("max_parallel must be >= 1")
        if self.dataset_path is None and self.preset is None:
            raise ExperimentError("need a dataset path or a synthetic preset")

    def dataset_spec(self) -> dict:
        if self.dataset_path is not None:
            return {"path": str(self.dataset_path)}
        return {
            "preset": self.preset,
            "n_commits": self.n_commits,
            "faulty_fraction": self.faulty_fraction,
            "gen_seed": self.gen_seed,
        }

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_spec(),
            "tokenization": {"message_len": self.message_len, "code_len": self.code_len, "vocab_cap": self.vocab_cap},
            "hyperparams": self.hyperparams.to_dict(),
            "settings": list(self.settings),
            "runs_per_setting": self.runs_per_setting,
            "master_seed": self.master_seed,
            "max_parallel": self.max_parallel,
            "entropy": self.entropy,
        }


def load_records(config: ExperimentConfig) -> list[ds.CommitRecord]:
    if config.dataset_path is not None:
        return ds.load_jsonl(config.dataset_path)
    return ds.generate_synthetic(config.preset, config.n_commits, config.faulty_fraction, config.gen_seed)


def prepare_split(config: ExperimentConfig) -> ds.SplitDataset:
    return ds.build_vocab_and_tokenize(
        load_records(config), config.message_len, config.code_len, config.vocab_cap
    )


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def execute_run(split: ds.SplitDataset, hp: Hyperparams, setting_id: str, master_seed: int,
                run_index: int, entropy: bool = False) -> dict:
    """Train and evaluate one model; returns its runs.jsonl object."""
    spec = setting(setting_id)
    plan = plan_for_run(spec, master_seed, run_index, entropy=entropy)
    row = {"setting": setting_id, "run": run_index, "seeds": plan.summary(), "started_at": _now()}
    try:
        outcome = train(split, hp, plan, p_on=spec.p_on)
    except TrainingDiverged as exc:
        row.update(status="failed", error=str(exc), finished_at=_now())
        return row
    test_msg, test_code, test_labels = split.arrays("test")
    scores = predict(outcome.params, (test_msg, test_code, test_labels))
    rec = evaluate_run(setting_id, run_index, scores, test_labels, outcome.runtime_seconds, plan.summary())
    cm = rec.confusion
    row.update(
        status="ok",
        auc=rec.auc,
        acc_faulty=rec.acc_faulty,
        acc_clean=rec.acc_clean,
        tp=cm.tp, fp=cm.fp, tn=cm.tn, fn=cm.fn,
        runtime_seconds=outcome.runtime_seconds,
        param_digest=outcome.params.digest(),
        stream_digests=outcome.stream_digests,
        combine_seed=outcome.combine_seed,
        finished_at=_now(),
    )
    return row


_KEY_ORDER = ("setting", "run", "status", "auc", "acc_faulty", "acc_clean", "tp", "fp", "tn", "fn",
              "runtime_seconds", "seeds", "started_at", "finished_at")


def _dump_row(row: dict) -> str:
    ordered = {k: row[k] for k in _KEY_ORDER if k in row}
    ordered.update((k, v) for k, v in row.items() if k not in ordered)
    return json.dumps(ordered, allow_nan=False)


def record_from_row(row: dict) -> RunRecord:
    ok = row.get("status") == "ok"
    known = set(_KEY_ORDER)
    return RunRecord(
        setting_id=row["setting"],
        run_index=int(row["run"]),
        auc=row.get("auc"),
        acc_faulty=row.get("acc_faulty"),
        acc_clean=row.get("acc_clean"),
        confusion=ConfusionMatrix(row["tp"], row["fp"], row["tn"], row["fn"]) if ok else None,
        runtime_seconds=row.get("runtime_seconds"),
        seeds=dict(row.get("seeds", {})),
        status=row.get("status", "ok"),
        extra={k: v for k, v in row.items() if k not in known},
    )


def read_runs(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / RUNS_FILE
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(record_from_row(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ExperimentError(f"{path}:{lineno}: unreadable run record ({exc})") from None
    return records


_worker_split: ds.SplitDataset | None = None


def _init_worker(split: ds.SplitDataset) -> None:
    global _worker_split
    _worker_split = split


def _worker_run(hp: Hyperparams, setting_id: str, master_seed: int, run_index: int, entropy: bool) -> dict:
    return execute_run(_worker_split, hp, setting_id, master_seed, run_index, entropy)


def _check_config(out: Path, config: ExperimentConfig) -> None:
    cfg_path = out / CONFIG_FILE
    current = config.to_dict()
    if cfg_path.exists():
        previous = json.loads(cfg_path.read_text(encoding="utf-8"))
        changed = [k for k in _IDENTITY_KEYS if previous.get(k) != current[k]]
        if changed:
            raise ExperimentError(
                f"{cfg_path} describes a different experiment (differs in: {', '.join(changed)}); use a new --out"
            )
        return
    cfg_path.write_text(json.dumps(current, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_experiment(config: ExperimentConfig) -> list[RunRecord]:
    """Run every missing (setting, run) pair and return all records on disk.

    Pairs already in runs.jsonl (successful or failed) are never rerun.
    """
    out = Path(config.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _check_config(out, config)
        runs_path = out / RUNS_FILE
        runs_path.touch()
        if not os.access(runs_path, os.W_OK):
            raise PermissionError(f"{runs_path} is not writable")
    except OSError as exc:
        raise ExperimentError(f"output directory {out} is not writable: {exc}") from exc

    done = {(r.setting_id, r.run_index) for r in read_runs(runs_path)}
    todo = [
        (sid, i)
        for sid in config.settings
        for i in range(config.runs_per_setting)
        if (sid, i) not in done
    ]
    if todo:
        split = prepare_split(config)
        hp = config.hyperparams
        args = [(hp, sid, config.master_seed, i, config.entropy) for sid, i in todo]
        with open(runs_path, "a", encoding="utf-8") as fh:
            if config.max_parallel == 1:
                rows = (execute_run(split, *a) for a in args)
                _write_rows(fh, rows)
            else:
                with ProcessPoolExecutor(config.max_parallel, initializer=_init_worker, initargs=(split,)) as pool:
                    futures = [pool.submit(_worker_run, *a) for a in args]
                    _write_rows(fh, (f.result() for f in futures))

    records = read_runs(runs_path)
    counts = Counter(r.setting_id for r in records if r.ok)
    failed = Counter(r.setting_id for r in records if not r.ok)
    log.info(
        "experiment complete: %s",
        ", ".join(f"{sid}={counts[sid]}" + (f" ({failed[sid]} failed)" if failed[sid] else "") for sid in config.settings),
    )
    return records


def _write_rows(fh, rows: Iterable[dict]) -> None:
    for row in rows:
        fh.write(_dump_row(row) + "\n")
        fh.flush()
        if row["status"] != "ok":
            log.warning("run %s/%d failed: %s", row["setting"], row["run"], row.get("error"))


# -- aggregation -------------------------------------------------------------


def _ok_by_setting(records: Iterable[RunRecord]) -> dict[str, list[RunRecord]]:
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        if r.ok:
            groups.setdefault(r.setting_id, []).append(r)
    for rs in groups.values():
        rs.sort(key=lambda r: r.run_index)
    return groups


def setting_order(records: Sequence[RunRecord], configured: Sequence[str] | None = None) -> list[str]:
    present = {r.setting_id for r in records}
    order = list(configured) if configured else [s for s in SETTING_IDS if s in present]
    order += sorted(present - set(order))
    return [s for s in order if s in present]


def summarize(records: Sequence[RunRecord], settings: Sequence[str] | None = None) -> list[VarianceSummary]:
    groups = _ok_by_setting(records)
    failed = Counter(r.setting_id for r in records if not r.ok)
    out = []
    for sid in setting_order(records, settings):
        if failed[sid]:
            log.warning("setting %s: %d failed run(s) excluded", sid, failed[sid])
        rs = groups.get(sid, [])
        if len(rs) < 2:
            log.warning("setting %s skipped: only %d successful run(s)", sid, len(rs))
            continue
        out.append(summarize_setting(rs))
    return out


# -- significance ------------------------------------------------------------

ALGORITHMIC = "algorithmic"
IMPLEMENTATION = "implementation"


@dataclass(frozen=True)
class ComparisonPlan:
    pairs: tuple[tuple[str, str, str], ...]

    @classmethod
    def default(cls, settings: Sequence[str] = SETTING_IDS) -> "ComparisonPlan":
        """(N, X) and (PN, PX) for X in W, D, B, A; then (X, PX) for every
        base setting. Pairs with an absent setting are dropped."""
        have = set(settings)
        pairs = []
        for base in ("N", "PN"):
            prefix = base[:-1]
            for x in ("W", "D", "B", "A"):
                pairs.append((base, prefix + x, ALGORITHMIC))
        for x in ("N", "A", "W", "D", "B"):
            pairs.append((x, "P" + x, IMPLEMENTATION))
        return cls(tuple(p for p in pairs if p[0] in have and p[1] in have))


@dataclass(frozen=True)
class Comparison:
    baseline: str
    treatment: str
    kind: str
    metric: str
    result: TestResult
    significant: bool


def compare(records: Sequence[RunRecord], plan: ComparisonPlan, metric: str = "auc",
            alpha: float = DEFAULT_ALPHA) -> list[Comparison]:
    if metric not in METRICS + ("runtime_seconds",):
        raise ExperimentError(f"unknown metric {metric!r}")
    groups = _ok_by_setting(records)
    out = []
    for base, treat, kind in plan.pairs:
        a, b = groups.get(base, []), groups.get(treat, [])
        if len(a) < 2 or len(b) < 2:
            log.warning("comparison %s vs %s skipped: needs 2+ successful runs on each side", base, treat)
            continue
        va = [r.metric(metric) for r in a]
        vb = [r.metric(metric) for r in b]
        for test in (levene, mann_whitney_u):
            res = test(va, vb)
            out.append(Comparison(base, treat, kind, metric, res, res.p_value < alpha))
    return out
