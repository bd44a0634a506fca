"""Comparison tables, learning-curve files and wall-clock ratios."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from ..trainers import METHODS

CURVE_COLUMNS = ("epoch", "train_acc", "test_acc", "gap", "lr", "wall_clock_s")
TABLE_HEADER = ("dataset", "method", "rho", "gamma", "batch_size", "seeds",
                "Test_Acc", "Test_Acc rank", "Gap", "Gap rank")


def _method_key(method: str):
    return (METHODS.index(method), method) if method in METHODS else (len(METHODS), method)


def top3_mark(value: float, rank: int) -> str:
    """Markdown marks for the three best entries: bold underline, bold, underline."""
    text = f"{value:.2f}"
    if rank == 1:
        return f"**<ins>{text}</ins>**"
    if rank == 2:
        return f"**{text}**"
    if rank == 3:
        return f"<ins>{text}</ins>"
    return text


def ranks(values) -> list:
    """Competition ranking with larger values first (1 + number of strictly larger values)."""
    vals = list(values)
    return [1 + sum(v > x for v in vals) for x in vals]


def aggregate(rows) -> list:
    """Mean best Test_Acc and Gap over seeds for each (dataset, method, rho, gamma, batch) group.

    Error rows are skipped.  Output is sorted by dataset, then method in the
    canonical method order, then hyperparameters.
    """
    groups = defaultdict(list)
    for r in rows:
        if r.status != "ok":
            continue
        groups[(r.dataset, r.method, r.rho, r.gamma, r.batch_size)].append(r)
    out = []
    for (ds, m, rho, gamma, bs), rs in groups.items():
        out.append(dict(
            dataset=ds, method=m, rho=rho, gamma=gamma, batch_size=bs, seeds=len(rs),
            test_acc=float(np.mean([r.best_test_acc for r in rs])),
            test_acc_std=float(np.std([r.best_test_acc for r in rs])),
            gap=float(np.mean([r.best_gap for r in rs])),
            wall_clock_s=float(np.mean([r.wall_clock_s for r in rs])),
            upper_bound_frac=_mean_or_none([r.upper_bound_frac for r in rs]),
        ))
    out.sort(key=lambda a: (a["dataset"], _method_key(a["method"]), a["rho"], a["gamma"],
                            a["batch_size"]))
    return out


def _mean_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def table_rows(rows) -> list:
    agg = aggregate(rows)
    by_ds = defaultdict(list)
    for a in agg:
        by_ds[a["dataset"]].append(a)
    for group in by_ds.values():
        for metric in ("test_acc", "gap"):
            for a, rk in zip(group, ranks(a[metric] for a in group)):
                a[metric + "_rank"] = rk
    return agg


def emit_tables(rows, path=None) -> str:
    """Markdown comparison table; top-3 entries per dataset are marked in each metric column."""
    lines = ["| " + " | ".join(TABLE_HEADER) + " |",
             "|" + "---|" * len(TABLE_HEADER)]
    for a in table_rows(rows):
        cells = [a["dataset"], a["method"], f"{a['rho']:g}", f"{a['gamma']:g}",
                 str(a["batch_size"]), str(a["seeds"]),
                 top3_mark(a["test_acc"], a["test_acc_rank"]), str(a["test_acc_rank"]),
                 top3_mark(a["gap"], a["gap_rank"]), str(a["gap_rank"])]
        lines.append("| " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def curve_rows(hist) -> list:
    out, clock = [], 0.0
    for r in hist.records:
        clock += r.wall_clock_s
        out.append(dict(epoch=r.epoch, train_acc=r.train_acc, test_acc=r.test_acc,
                        gap=r.gap, lr=r.lr, wall_clock_s=clock))
    return out


def write_curve(hist, path) -> None:
    """Per-epoch curve; ``wall_clock_s`` is cumulative training-step time."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(curve_rows(hist))
    tmp.replace(path)


def emit_curves(histories: dict, out_dir) -> list:
    """One ``<run_id>.csv`` per history; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for run_id, hist in sorted(histories.items()):
        p = out_dir / f"{run_id}.csv"
        write_curve(hist, p)
        paths.append(p)
    return paths


def timing_report(rows, path=None) -> list:
    """Mean step wall-clock per (dataset, method) and its ratio to Vanilla on that dataset.

    The ratio is ``None`` when the dataset has no Vanilla runs.
    """
    clocks = defaultdict(list)
    for r in rows:
        if r.status == "ok":
            clocks[(r.dataset, r.method)].append(r.wall_clock_s)
    out = []
    for (ds, m) in sorted(clocks, key=lambda k: (k[0], _method_key(k[1]))):
        mean = float(np.mean(clocks[(ds, m)]))
        base = clocks.get((ds, "vanilla"))
        ratio = mean / float(np.mean(base)) if base and np.mean(base) > 0 else None
        out.append(dict(dataset=ds, method=m, wall_clock_s=mean, ratio_to_vanilla=ratio))
    if path is not None:
        lines = ["| dataset | method | wall_clock_s | ratio_to_vanilla |", "|---|---|---|---|"]
        for t in out:
            ratio = "" if t["ratio_to_vanilla"] is None else f"{t['ratio_to_vanilla']:.3f}"
            lines.append(f"| {t['dataset']} | {t['method']} | {t['wall_clock_s']:.3f} | {ratio} |")
        Path(path).write_text("\n".join(lines) + "\n")
    return out
