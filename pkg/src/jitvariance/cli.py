"""Command-line entry point: ``jitvar {gen-data,run,report,compare}``.

Exit codes: 0 success, 1 user error (bad flags, bad input files), 2 internal
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from pathlib import Path

from . import dataset as ds
from .harness import (
    DEFAULT_ALPHA,
    DEFAULT_MASTER_SEED,
    DEFAULT_RUNS,
    ExperimentConfig,
    ExperimentError,
    run_experiment,
    setting_order,
)
from .metrics import MetricError
from .model import Hyperparams
from .report import build_report, emit_significance_table, load_experiment, significance
from .seedctl import SETTING_IDS
from .stats import StatsError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _settings_list(text: str) -> list[str]:
    items = [s.strip().upper() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in SETTING_IDS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"unknown setting(s) {bad}; choose from {','.join(SETTING_IDS)}")
    return items


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jitvar", description="Variance analysis of NI factors in a just-in-time fault predictor.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_data_flags(sp, out_help):
        sp.add_argument("--preset", choices=sorted(ds.PRESET_FAULTY_FRACTION) + ["custom"], default="openstack-like",
                        help="synthetic dataset preset (default: openstack-like)")
        sp.add_argument("--n", type=int, default=2000, help="number of synthetic commits (default: 2000)")
        sp.add_argument("--faulty-frac", type=float, default=None,
                        help="faulty fraction; defaults to the preset's (openstack-like 0.13, qt-like 0.08)")
        sp.add_argument("--seed", type=int, default=1, help="synthetic generator seed (default: 1)")
        sp.add_argument("--out", required=True, help=out_help)

    g = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    add_data_flags(g, "output JSONL path")

    r = sub.add_parser("run", help="train runs_per_setting models for every setting")
    add_data_flags(r, "experiment output directory")
    r.add_argument("--dataset", help="JSONL dataset; overrides the synthetic flags")
    r.add_argument("--master-seed", type=int, default=DEFAULT_MASTER_SEED,
                   help=f"master seed for all factor streams (default: {DEFAULT_MASTER_SEED})")
    r.add_argument("--runs", type=int, default=DEFAULT_RUNS, help=f"runs per setting (default: {DEFAULT_RUNS})")
    r.add_argument("--settings", type=_settings_list, default=list(SETTING_IDS),
                   help=f"comma list of settings (default: {','.join(SETTING_IDS)})")
    r.add_argument("--epochs", type=int, default=Hyperparams.epochs, help="training epochs (default: 10)")
    r.add_argument("--workers", type=int, default=Hyperparams.workers,
                   help="gradient shards per step when P is on (default: 4)")
    r.add_argument("--parallel", type=int, default=1,
                   help="concurrent training runs; >1 marks runtimes as contended (default: 1)")
    r.add_argument("--entropy", action="store_true",
                   help="seed on-factors from OS entropy instead of the master seed (not replayable)")

    for name, help_text in (("report", "write variance/runtime/significance tables and boxplot data"),
                            ("compare", "print the significance table")):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--exp", required=True, help="experiment directory containing runs.jsonl")
        sp.add_argument("--format", choices=("md", "csv"), default=None,
                        help="only write this format (default: both)")
        sp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA,
                        help=f"significance level (default: {DEFAULT_ALPHA})")
        sp.add_argument("--out", default=None, help="output directory (default: the experiment directory)")
    return p


def _cmd_gen_data(args) -> None:
    records = ds.generate_synthetic(args.preset, args.n, args.faulty_frac, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ds.write_jsonl(records, args.out)
    n_faulty = sum(r.label for r in records)
    print(f"wrote {len(records)} commits ({n_faulty} faulty) to {args.out}")


def _cmd_run(args) -> None:
    if args.dataset is not None and not Path(args.dataset).exists():
        raise UsageError(f"dataset {args.dataset} does not exist")
    config = ExperimentConfig(
        out_dir=args.out,
        dataset_path=args.dataset,
        preset=None if args.dataset else args.preset,
        n_commits=args.n,
        faulty_fraction=args.faulty_frac,
        gen_seed=args.seed,
        hyperparams=Hyperparams(epochs=args.epochs, workers=args.workers),
        settings=args.settings,
        runs_per_setting=args.runs,
        master_seed=args.master_seed,
        max_parallel=args.parallel,
        entropy=args.entropy,
    )
    records = run_experiment(config)
    for sid in config.settings:
        ok = sum(1 for r in records if r.setting_id == sid and r.ok)
        failed = sum(1 for r in records if r.setting_id == sid and not r.ok)
        print(f"{sid}: {ok} ok" + (f", {failed} failed" if failed else ""))
    print(f"records in {Path(args.out) / 'runs.jsonl'}")


def _formats(args) -> tuple[str, ...]:
    return (args.format,) if args.format else ("md", "csv")


def _cmd_report(args) -> None:
    for path in build_report(args.exp, args.out, _formats(args), args.alpha):
        print(path)


def _cmd_compare(args) -> None:
    _, records = load_experiment(args.exp)
    settings = setting_order(records)
    md, csv_text = emit_significance_table(significance(records, settings, args.alpha), args.alpha)
    print(md if args.format != "csv" else csv_text, end="")
    out = Path(args.out) if args.out else Path(args.exp)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in _formats(args):
        (out / f"significance.{fmt}").write_text(md if fmt == "md" else csv_text, encoding="utf-8", newline="\n")


COMMANDS = {"gen-data": _cmd_gen_data, "run": _cmd_run, "report": _cmd_report, "compare": _cmd_compare}
USER_ERRORS = (UsageError, ds.DatasetError, ExperimentError, MetricError, StatsError, FileNotFoundError, ValueError)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
