"""Grid runner: every (dataset, method, rho, gamma, batch size, seed) combination.

Each run draws its randomness from streams keyed only by its seed coordinate
(see :mod:`gmix.rng`), so two runs that differ in method or hyperparameters
see the same initialization, batch order and mixup draws.  Changing one seed
never affects runs at other seeds.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path

from ..errors import GMixError
from ..model import MlpSpec, save_checkpoint
from ..trainers import RunHistory, TrainConfig, config_to_dict, train
from .config import ExperimentConfig, build_datasets
from .metrics import MetricsRow
from .report import write_curve

METRICS_FILE = "metrics.csv"


@dataclass(frozen=True)
class RunKey:
    dataset: str
    method: str
    rho: float
    gamma: float
    batch_size: int
    seed: int

    @property
    def run_id(self) -> str:
        return (f"{self.dataset}__{self.method}__rho{self.rho:g}__gamma{self.gamma:g}"
                f"__bs{self.batch_size}__seed{self.seed}")


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)
    histories: dict = field(default_factory=dict)  # run_id -> RunHistory

    @property
    def failed(self) -> list:
        return [r for r in self.rows if r.status != "ok"]


def run_keys(cfg: ExperimentConfig) -> list:
    s = cfg.sweep
    return [RunKey(d.name, m, rho, g, bs, seed)
            for d, m, rho, g, bs, seed in product(cfg.datasets, s.methods, s.rho, s.gamma,
                                                  s.batch_size, s.seeds)]


def run_config(base: TrainConfig, key: RunKey) -> TrainConfig:
    return replace(base, method=key.method, sam=replace(base.sam, rho=key.rho),
                   gamma=key.gamma, batch_size=key.batch_size, seed=key.seed)


class MetricsWriter:
    """Appends one complete CSV line per write, so an interrupted grid leaves whole rows."""

    def __init__(self, path, fresh: bool = True):
        self.path = Path(path)
        self.columns = MetricsRow.columns()
        if fresh or not self.path.exists():
            tmp = self.path.with_name(self.path.name + ".tmp")
            tmp.write_text(",".join(self.columns) + "\n")
            tmp.replace(self.path)

    def append(self, row: MetricsRow) -> None:
        buf = io.StringIO()
        d = row.as_dict()
        csv.writer(buf, lineterminator="\n").writerow(
            ["" if d[c] is None else d[c] for c in self.columns])
        data = buf.getvalue().encode()
        fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)
        try:
            os.write(fd, data)
            os.fsync(fd)
        finally:
            os.close(fd)


def read_metrics(path) -> list:
    with open(path, newline="") as f:
        return [MetricsRow.from_strings(r) for r in csv.DictReader(f)]


def summarize(key: RunKey, hist: RunHistory) -> MetricsRow:
    steps = sum(r.steps for r in hist.records)
    passes = sum(r.backward_passes for r in hist.records)
    return MetricsRow(
        method=key.method, dataset=key.dataset, seed=key.seed, rho=key.rho, gamma=key.gamma,
        batch_size=key.batch_size, best_test_acc=hist.best_test_acc, best_gap=hist.best_gap,
        wall_clock_s=hist.wall_clock_s, epochs=len(hist),
        upper_bound_frac=hist.upper_bound_frac,
        sharpness_nonneg_frac=hist.sharpness_nonneg_frac,
        backward_per_step=passes / steps if steps else None,
    )


def save_run(run_dir: Path, hist: RunHistory, checkpoint: bool = True) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    hist.to_csv(run_dir / "history.csv")
    hist.to_json(run_dir / "history.json")
    write_curve(hist, run_dir / "curve.csv")
    if checkpoint and hist.params is not None:
        save_checkpoint(run_dir / "checkpoint.bin", hist.params, hist.config.seed, len(hist))


def run_experiment(cfg: ExperimentConfig, write: bool = True, progress=None) -> ExperimentResult:
    """Execute the whole grid.  A failing run yields an error row; the grid continues."""
    out = Path(cfg.output_dir)
    writer = None
    if write:
        out.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(out / METRICS_FILE)
    data = {}
    result = ExperimentResult()
    for key in run_keys(cfg):
        spec = next(d for d in cfg.datasets if d.name == key.dataset)
        try:
            if key.dataset not in data:
                data[key.dataset] = build_datasets(spec, out)
            train_ds, test_ds = data[key.dataset]
            tcfg = run_config(cfg.train, key)
            model = MlpSpec(train_ds.p, cfg.hidden_dims, train_ds.num_classes)
            hist = train(tcfg, train_ds, test_ds, model_spec=model)
            row = summarize(key, hist)
            result.histories[key.run_id] = hist
            if write:
                save_run(out / "runs" / key.run_id, hist, cfg.checkpoints)
        except (GMixError, OSError, ValueError, ArithmeticError) as exc:
            row = MetricsRow(
                method=key.method, dataset=key.dataset, seed=key.seed, rho=key.rho,
                gamma=key.gamma, batch_size=key.batch_size, best_test_acc=None, best_gap=None,
                wall_clock_s=0.0, epochs=0, status="error",
                error=f"{type(exc).__name__}: {exc}",
            )
        result.rows.append(row)
        if writer is not None:
            writer.append(row)
        if progress is not None:
            progress(key, row)
    if write:
        summary = {
            "train": config_to_dict(cfg.train),
            "runs": [r.as_dict() for r in result.rows],
        }
        tmp = out / "summary.json.tmp"
        tmp.write_text(json.dumps(summary, indent=1, sort_keys=True))
        tmp.replace(out / "summary.json")
    return result
