"""Per-method training steps, gradient decomposition and the epoch loop.

Methods and their back-propagation budget per step:

=========  ==========================================================  =========
method     update gradient                                              backward
=========  ==========================================================  =========
vanilla    grad of the clean batch loss at w                           1
mixup      grad of the mixed batch loss at w                           1
sam        grad of the clean batch loss at w + delta                   2
gmix       grad of the mixed batch loss at w + delta                   2
bgmix      grad of the mean loss over the sensitive rows at w + delta  2
dgmix      bgmix gradient plus the mean orthogonal part of the rest    2
=========  ==========================================================  =========
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import model as M
from . import tensor as T
from .augment import MixedBatch, MixupConfig, apply_mixup, passthrough
from .data import Dataset, batches, full_batch
from .errors import ConfigError, DivergenceError
from .rng import RunStreams, generator
from .sharpness import (
    SamConfig,
    SensitivityPartition,
    ascent_pass,
    lipschitz_probe,
    partition_by_sensitivity,
    perturbed_grad,
    sharpness_value,
)

METHODS = ("vanilla", "mixup", "sam", "gmix", "bgmix", "dgmix")
MIXUP_METHODS = ("mixup", "gmix", "bgmix", "dgmix")
SAM_METHODS = ("sam", "gmix", "bgmix", "dgmix")
SELECTION_METHODS = ("bgmix", "dgmix")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "gmix"
    epochs: int = 200
    batch_size: int = 128
    eta0: float = 0.1
    mixup: MixupConfig = field(default_factory=MixupConfig)
    sam: SamConfig = field(default_factory=SamConfig)
    gamma: float = 0.5
    seed: int = 0
    momentum: float = 0.0
    weight_decay: float = 0.0
    hidden_dims: tuple = (64, 64)
    probe_pairs: int = 0
    probe_radius: float = 0.05

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be > 0, got {self.eta0}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))


def lr_schedule(epoch: int, total: int, eta0: float) -> float:
    """Step decay: ``eta0`` until epoch floor(0.65 T), then x0.1, then x0.01 from floor(0.85 T)."""
    if not 0 <= epoch < total:
        raise ConfigError(f"epoch {epoch} outside [0, {total})")
    if epoch < (65 * total) // 100:
        return eta0
    if epoch < (85 * total) // 100:
        return eta0 * 0.1
    return eta0 * 0.01


class Sgd:
    """Plain SGD; momentum and weight decay stay off unless requested."""

    def __init__(self, momentum: float = 0.0, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = None

    def update(self, w: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
        if self.weight_decay:
            g = g + self.weight_decay * w
        if self.momentum:
            self.velocity = g if self.velocity is None else self.momentum * self.velocity + g
            g = self.velocity
        return w - lr * g


@dataclass
class StepReport:
    method: str
    mean_loss: float                       # objective at w (clean or mixed batch)
    grad_norm: float                       # norm of the update gradient
    backward_passes: int
    lam: float | None = None
    perturbed_loss: float | None = None    # objective at w + delta
    sharpness: float | None = None
    delta_norm: float | None = None
    skipped: bool = False
    n_plus: int | None = None
    n_minus: int | None = None
    xi: float | None = None
    upper_bound_flag: bool | None = None
    decomposition_skipped: bool | None = None
    grad: np.ndarray | None = field(default=None, repr=False)
    partition: SensitivityPartition | None = field(default=None, repr=False)
    mixed: MixedBatch | None = field(default=None, repr=False)


class Decomposition(NamedTuple):
    parallel: np.ndarray
    orthogonal: np.ndarray
    skipped: bool


def decompose_gradient(g, g_bar) -> Decomposition:
    """Split ``g`` into components parallel and orthogonal to ``g_bar``.

    A zero ``g_bar`` has no direction: the whole of ``g`` counts as orthogonal
    and the result is flagged as skipped.
    """
    g = np.asarray(g, dtype=np.float64)
    g_bar = np.asarray(g_bar, dtype=np.float64)
    nb = float(g_bar @ g_bar)
    if nb == 0.0 or not math.isfinite(nb):
        return Decomposition(np.zeros_like(g), g.copy(), True)
    par = (float(g @ g_bar) / nb) * g_bar
    return Decomposition(par, g - par, False)


def bgmix_gradient(perturbed: M.ModelParams, mixed, partition: SensitivityPartition) -> np.ndarray:
    """Gradient at ``w + delta`` of the mean loss over the sensitive rows only.

    The remaining rows enter the backward pass with an exactly zero upstream
    gradient, so their labels cannot influence the result.
    """
    return M.subset_mean_grad(M.forward_losses(perturbed, mixed), partition.plus_indices)


class DgmixDirection(NamedTuple):
    grad: np.ndarray
    g_plus: np.ndarray
    orthogonal_mean: np.ndarray
    skipped: bool


def dgmix_direction(factors, partition: SensitivityPartition, spec: M.MlpSpec) -> DgmixDirection:
    """Combine per-example gradient factors into the DG-Mix update gradient.

    ``g_plus`` is the mean per-example gradient over the sensitive rows; each
    remaining row contributes its component orthogonal to ``g_plus``.  Since
    projection is linear, the mean orthogonal part equals the mean gradient of
    the remaining rows minus ``mean_i <g_i, g_plus> / ||g_plus||^2`` times
    ``g_plus``, so no per-example gradient is materialized.
    """
    g_plus = M.factor_row_mean(factors, partition.plus_indices)
    if partition.n_minus == 0:
        return DgmixDirection(g_plus, g_plus, np.zeros_like(g_plus), False)
    minus_mean = M.factor_row_mean(factors, partition.minus_indices)
    nb = float(g_plus @ g_plus)
    if nb == 0.0 or not math.isfinite(nb):
        return DgmixDirection(g_plus + minus_mean, g_plus, minus_mean, True)
    coef = M.factor_dots(factors, g_plus, spec)[partition.minus_indices].mean() / nb
    ortho = minus_mean - coef * g_plus
    return DgmixDirection(g_plus + ortho, g_plus, ortho, False)


def _mix(batch, cfg: TrainConfig, streams, lam):
    if streams is None:
        raise ConfigError(f"method {cfg.method!r} needs RNG streams")
    return apply_mixup(batch, cfg.mixup, streams.lam, streams.perm, lam=lam)


def _finish(params, g, lr, opt, report: StepReport):
    opt = opt or Sgd()
    w = opt.update(M.params_to_vector(params), g, lr)
    report.grad = g
    report.grad_norm = float(np.linalg.norm(g))
    return M.vector_to_params(w, params.spec), report


def step_vanilla(params, batch, lr, cfg=None, streams=None, *, lam=None, opt=None):
    losses, g = M.loss_and_grad(params, batch)
    rep = StepReport("vanilla", float(losses.mean()), 0.0, 1)
    return _finish(params, g, lr, opt, rep)


def step_mixup(params, batch, lr, cfg, streams, *, lam=None, opt=None):
    mixed = _mix(batch, cfg, streams, lam)
    losses, g = M.loss_and_grad(params, mixed)
    rep = StepReport("mixup", float(losses.mean()), 0.0, 1, lam=mixed.lam, mixed=mixed)
    return _finish(params, g, lr, opt, rep)


def _sam_like(method, params, mixed, lr, cfg, opt):
    pg = perturbed_grad(params, mixed, cfg.sam)
    l0, l1 = float(pg.losses_at_w.mean()), float(pg.losses_at_w_plus_delta.mean())
    rep = StepReport(
        method, l0, 0.0, 2, lam=mixed.lam, perturbed_loss=l1,
        sharpness=sharpness_value(l0, l1), delta_norm=pg.record.norm,
        skipped=pg.record.skipped, mixed=mixed,
    )
    return _finish(params, pg.grad, lr, opt, rep)


def step_sam(params, batch, lr, cfg, streams=None, *, lam=None, opt=None):
    return _sam_like("sam", params, passthrough(batch), lr, cfg, opt)


def step_gmix(params, batch, lr, cfg, streams, *, lam=None, opt=None):
    return _sam_like("gmix", params, _mix(batch, cfg, streams, lam), lr, cfg, opt)


def _selection_report(method, first, losses_wd, part, mixed):
    l0, l1 = float(first.losses.mean()), float(losses_wd.mean())
    return StepReport(
        method, l0, 0.0, 2, lam=mixed.lam, perturbed_loss=l1,
        sharpness=sharpness_value(l0, l1), delta_norm=first.record.norm,
        skipped=first.record.skipped, n_plus=part.n_plus, n_minus=part.n_minus,
        xi=part.xi, upper_bound_flag=bool(losses_wd[part.plus_indices].mean() >= l1),
        partition=part, mixed=mixed,
    )


def step_bgmix(params, batch, lr, cfg, streams, *, lam=None, opt=None):
    mixed = _mix(batch, cfg, streams, lam)
    first = ascent_pass(params, mixed, cfg.sam)
    # scores are read off the forward pass at w + delta that the gradient reuses
    fp = M.forward_losses(first.perturbed, mixed)
    losses_wd = fp.losses.data.copy()
    part = partition_by_sensitivity(losses_wd - first.losses, cfg.gamma)
    g = M.subset_mean_grad(fp, part.plus_indices)
    rep = _selection_report("bgmix", first, losses_wd, part, mixed)
    return _finish(params, g, lr, opt, rep)


def step_dgmix(params, batch, lr, cfg, streams, *, lam=None, opt=None):
    mixed = _mix(batch, cfg, streams, lam)
    first = ascent_pass(params, mixed, cfg.sam)
    losses_wd, factors = M.losses_and_factors(first.perturbed, mixed)
    part = partition_by_sensitivity(losses_wd - first.losses, cfg.gamma)
    direction = dgmix_direction(factors, part, params.spec)
    rep = _selection_report("dgmix", first, losses_wd, part, mixed)
    rep.decomposition_skipped = direction.skipped
    return _finish(params, direction.grad, lr, opt, rep)


STEP_FUNCTIONS = {
    "vanilla": step_vanilla,
    "mixup": step_mixup,
    "sam": step_sam,
    "gmix": step_gmix,
    "bgmix": step_bgmix,
    "dgmix": step_dgmix,
}


# ---------------------------------------------------------------------------
# epoch loop


@dataclass
class EpochRecord:
    epoch: int
    train_acc: float
    test_acc: float
    gap: float
    train_loss: float
    test_loss: float
    lr: float
    steps: int
    backward_passes: int
    mean_step_loss: float
    mean_sharpness: float | None
    sharpness_nonneg_frac: float | None
    skipped_steps: int
    mean_plus: float | None
    upper_bound_frac: float | None
    kappa1: float | None = None
    kappa2: float | None = None
    wall_clock_s: float = 0.0


TIMING_FIELDS = ("wall_clock_s",)


@dataclass
class RunHistory:
    config: TrainConfig
    records: list = field(default_factory=list)
    params: M.ModelParams | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.records)

    @property
    def best_test_acc(self) -> float:
        return max(r.test_acc for r in self.records)

    @property
    def best_gap(self) -> float:
        return max(r.gap for r in self.records)

    @property
    def wall_clock_s(self) -> float:
        return sum(r.wall_clock_s for r in self.records)

    @property
    def upper_bound_frac(self) -> float | None:
        pairs = [(r.upper_bound_frac, r.steps) for r in self.records if r.upper_bound_frac is not None]
        if not pairs:
            return None
        return sum(f * n for f, n in pairs) / sum(n for _, n in pairs)

    @property
    def sharpness_nonneg_frac(self) -> float | None:
        pairs = [(r.sharpness_nonneg_frac, r.steps) for r in self.records
                 if r.sharpness_nonneg_frac is not None]
        if not pairs:
            return None
        return sum(f * n for f, n in pairs) / sum(n for _, n in pairs)

    def rows(self, include_timing: bool = False) -> list:
        out = []
        for r in self.records:
            row = asdict(r)
            if not include_timing:
                for k in TIMING_FIELDS:
                    row.pop(k)
            out.append(row)
        return out

    def to_csv(self, path, include_timing: bool = False) -> None:
        """One row per epoch.  Wall-clock columns are omitted by default so the
        file is a deterministic function of the configuration."""
        rows = self.rows(include_timing)
        names = [f.name for f in fields(EpochRecord)
                 if include_timing or f.name not in TIMING_FIELDS]
        _atomic_write(path, lambda f: _write_csv(f, names, rows))

    def to_json(self, path, include_timing: bool = False) -> None:
        payload = {"config": config_to_dict(self.config), "epochs": self.rows(include_timing)}
        _atomic_write(path, lambda f: json.dump(payload, f, indent=1, sort_keys=True))


def _write_csv(f, names, rows):
    w = csv.DictWriter(f, fieldnames=names, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in names})


def _atomic_write(path, write):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        write(f)
    tmp.replace(path)


def config_to_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["hidden_dims"] = list(cfg.hidden_dims)
    return d


def evaluate(params: M.ModelParams, ds: Dataset):
    """``(accuracy_percent, mean_cross_entropy)`` on clean one-hot labels."""
    from .harness.metrics import test_acc

    batch = full_batch(ds)
    with T.no_grad():
        fp = M.forward_losses(params, batch, track=False)
    preds = np.argmax(fp.logits.data, axis=1)
    return test_acc(preds, ds.labels), float(fp.losses.data.mean())


class _EpochStats:
    def __init__(self):
        self.reports = []

    def add(self, rep: StepReport):
        self.reports.append(rep)

    def summary(self):
        reps = self.reports
        sharp = [r.sharpness for r in reps if r.sharpness is not None]
        plus = [r.n_plus for r in reps if r.n_plus is not None]
        ub = [r.upper_bound_flag for r in reps if r.upper_bound_flag is not None]
        return dict(
            steps=len(reps),
            backward_passes=sum(r.backward_passes for r in reps),
            mean_step_loss=float(np.mean([r.mean_loss for r in reps])),
            mean_sharpness=float(np.mean(sharp)) if sharp else None,
            sharpness_nonneg_frac=float(np.mean([s >= 0 for s in sharp])) if sharp else None,
            skipped_steps=sum(bool(r.skipped) for r in reps),
            mean_plus=float(np.mean(plus)) if plus else None,
            upper_bound_frac=float(np.mean(ub)) if ub else None,
        )


def train(cfg: TrainConfig, train_ds: Dataset, test_ds: Dataset,
          model_spec: M.MlpSpec | None = None, on_step=None) -> RunHistory:
    """Run ``cfg.epochs`` epochs of ``cfg.method`` and evaluate after each.

    Deterministic for a fixed configuration.  Raises DivergenceError on a
    non-finite loss.
    """
    if cfg.batch_size > train_ds.n:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds {train_ds.n} training examples")
    spec = model_spec or M.MlpSpec(train_ds.p, cfg.hidden_dims, train_ds.num_classes)
    streams = RunStreams.from_seed(cfg.seed)
    params = M.init_model(spec, streams.init)
    probe_rng = generator(cfg.seed, "probe")
    opt = Sgd(cfg.momentum, cfg.weight_decay)
    step = STEP_FUNCTIONS[cfg.method]
    history = RunHistory(cfg)

    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg.epochs, cfg.eta0)
        stats = _EpochStats()
        elapsed = 0.0
        for i, batch in enumerate(batches(train_ds, cfg.batch_size, streams.shuffle_seed, epoch)):
            t0 = time.perf_counter()
            params, rep = step(params, batch, lr, cfg, streams, opt=opt)
            elapsed += time.perf_counter() - t0
            if not (math.isfinite(rep.mean_loss) and math.isfinite(rep.grad_norm)):
                raise DivergenceError(epoch, i)
            rep.grad = rep.partition = rep.mixed = None
            if on_step is not None:
                on_step(epoch, i, rep)
            stats.add(rep)
        train_acc, train_loss = evaluate(params, train_ds)
        test_acc_, test_loss = evaluate(params, test_ds)
        if not (math.isfinite(train_loss) and math.isfinite(test_loss)):
            raise DivergenceError(epoch)
        k1 = k2 = None
        if cfg.probe_pairs:
            k1, k2 = lipschitz_probe(params, train_ds, cfg.probe_pairs, cfg.probe_radius, probe_rng)
        history.records.append(EpochRecord(
            epoch=epoch, train_acc=train_acc, test_acc=test_acc_,
            gap=test_acc_ - train_acc, train_loss=train_loss, test_loss=test_loss,
            lr=lr, kappa1=k1, kappa2=k2, wall_clock_s=elapsed, **stats.summary(),
        ))
    history.params = params
    return history
