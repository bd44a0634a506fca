"""Command line: ``gmix train | grid | check | report``.

Every config key is also a flag, ``--section.key VALUE``, overriding the file.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import GMixError
from .harness.config import DEFAULTS, build_datasets, load_config
from .harness.experiment import METRICS_FILE, RunKey, read_metrics, run_experiment, save_run, summarize
from .harness.report import emit_tables, timing_report
from .model import MlpSpec
from .trainers import train


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", type=Path, help="INI configuration file")
    g = p.add_argument_group("config overrides")
    for section, keys in DEFAULTS.items():
        for key in keys:
            g.add_argument(f"--{section}.{key}", dest=f"{section}.{key}", metavar="VALUE")


def _overrides(args) -> dict:
    return {k: v for k, v in vars(args).items() if "." in k and v is not None}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gmix", description="Mixup with sharpness-aware training")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="one training run from the [train] section")
    _add_config_flags(p)

    p = sub.add_parser("grid", help="run every combination of the [sweep] axes")
    _add_config_flags(p)

    p = sub.add_parser("check", help="run the built-in correctness oracles")
    p.add_argument("--only", nargs="*", help="subset of checks to run")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="tables and timing ratios from a metrics file")
    p.add_argument("metrics", type=Path, help=f"{METRICS_FILE} written by `grid`")
    p.add_argument("--out", type=Path, help="directory for table.md and timing.md")
    return ap


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    spec = cfg.datasets[0]
    train_ds, test_ds = build_datasets(spec, cfg.output_dir)
    tcfg = cfg.train
    hist = train(tcfg, train_ds, test_ds, MlpSpec(train_ds.p, cfg.hidden_dims, train_ds.num_classes))
    key = RunKey(spec.name, tcfg.method, tcfg.sam.rho, tcfg.gamma, tcfg.batch_size, tcfg.seed)
    run_dir = Path(cfg.output_dir) / "runs" / key.run_id
    save_run(run_dir, hist, cfg.checkpoints)
    row = summarize(key, hist)
    print(f"{key.run_id}: best Test_Acc {row.best_test_acc:.2f}  best Gap {row.best_gap:.2f}  "
          f"step time {row.wall_clock_s:.2f}s  -> {run_dir}")
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(cfg.output_dir)

    def progress(key, row):
        status = (f"Test_Acc {row.best_test_acc:.2f} Gap {row.best_gap:.2f}"
                  if row.status == "ok" else row.error)
        print(f"[{row.status}] {key.run_id}: {status}", flush=True)

    result = run_experiment(cfg, progress=progress)
    emit_tables(result.rows, out / "table.md")
    timing_report(result.rows, out / "timing.md")
    print(f"{len(result.rows) - len(result.failed)} ok, {len(result.failed)} failed; results in {out}")
    return 1 if result.failed else 0


def cmd_check(args) -> int:
    from .harness.checks import CHECKS, run_checks

    names = args.only or None
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise GMixError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
    results = run_checks(names, seed=args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    return 0 if all(r.passed for r in results) else 1


def cmd_report(args) -> int:
    rows = read_metrics(args.metrics)
    out = args.out or args.metrics.parent
    out.mkdir(parents=True, exist_ok=True)
    print(emit_tables(rows, out / "table.md"), end="")
    for t in timing_report(rows, out / "timing.md"):
        ratio = "-" if t["ratio_to_vanilla"] is None else f"{t['ratio_to_vanilla']:.2f}"
        print(f"{t['dataset']:>12} {t['method']:>8} {t['wall_clock_s']:9.2f}s  x{ratio}")
    return 1 if any(r.status != "ok" for r in rows) else 0


COMMANDS = {"train": cmd_train, "grid": cmd_grid, "check": cmd_check, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (GMixError, OSError) as exc:
        print(f"gmix: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
