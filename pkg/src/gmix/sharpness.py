"""Weight perturbation, sharpness measurement and sensitivity-based batch selection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from types import SimpleNamespace
from typing import NamedTuple

import numpy as np

from . import model as M
from . import tensor as T
from .errors import ConfigError, NumericError, ValidationError


@dataclass(frozen=True)
class SamConfig:
    rho: float = 0.5
    grad_floor: float = 1e-12

    def __post_init__(self):
        if not self.rho >= 0:
            raise ConfigError(f"rho must be >= 0, got {self.rho}")
        if not self.grad_floor > 0:
            raise ConfigError(f"grad_floor must be > 0, got {self.grad_floor}")


@dataclass(frozen=True)
class PerturbationRecord:
    delta: np.ndarray
    base_grad_norm: float
    skipped: bool

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.delta))


def compute_delta(grad, cfg: SamConfig) -> PerturbationRecord:
    """First-order worst-case perturbation ``rho * grad / ||grad||``.

    A gradient with norm below ``cfg.grad_floor`` yields a zero perturbation
    flagged as skipped.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericError("gradient contains NaN or Inf")
    norm = float(np.linalg.norm(grad))
    if norm < cfg.grad_floor:
        return PerturbationRecord(np.zeros_like(grad), norm, True)
    return PerturbationRecord(grad * (cfg.rho / norm), norm, False)


def sharpness_value(loss_at_w: float, loss_at_w_plus_delta: float) -> float:
    if not (math.isfinite(loss_at_w) and math.isfinite(loss_at_w_plus_delta)):
        raise NumericError("sharpness needs finite losses")
    return float(loss_at_w_plus_delta - loss_at_w)


class FirstPass(NamedTuple):
    losses: np.ndarray   # l(w, z_i)
    grad: np.ndarray     # gradient of the batch mean at w
    record: PerturbationRecord
    perturbed: M.ModelParams


def ascent_pass(params: M.ModelParams, batch, cfg: SamConfig, loss: str = "cross_entropy") -> FirstPass:
    """Back-propagate at ``w`` and build ``w + delta``; one backward pass."""
    losses, grad = M.loss_and_grad(params, batch, loss=loss)
    record = compute_delta(grad, cfg)
    return FirstPass(losses, grad, record, M.add_scaled(params, record.delta, 1.0))


class PerturbedGradient(NamedTuple):
    grad: np.ndarray
    record: PerturbationRecord
    losses_at_w: np.ndarray
    losses_at_w_plus_delta: np.ndarray


def sam_gradient(grad_fn, w, cfg: SamConfig) -> PerturbedGradient:
    """Two-pass perturbed gradient for any objective.

    ``grad_fn(v)`` returns ``(per_example_losses, grad_of_mean)`` at the flat
    point ``v``.  The first call sets ``delta``, the second is made at ``w + delta``.
    """
    w = np.asarray(w, dtype=np.float64)
    losses_w, g0 = grad_fn(w)
    record = compute_delta(g0, cfg)
    losses_wd, g = grad_fn(w + record.delta)
    return PerturbedGradient(np.asarray(g, dtype=np.float64), record,
                             np.asarray(losses_w, dtype=np.float64),
                             np.asarray(losses_wd, dtype=np.float64))


def perturbed_grad(params: M.ModelParams, mixed, cfg: SamConfig,
                   loss: str = "cross_entropy") -> PerturbedGradient:
    """Gradient of the batch-mean loss at ``w + delta`` (two backward passes).

    ``params`` is never modified; the perturbed weights are a separate copy.
    """
    spec = params.spec
    return sam_gradient(
        lambda v: M.loss_and_grad(M.vector_to_params(v, spec), mixed, loss=loss),
        M.params_to_vector(params), cfg,
    )


@dataclass(frozen=True)
class SensitivityPartition:
    scores: np.ndarray
    xi: float
    plus_indices: np.ndarray   # ascending
    minus_indices: np.ndarray  # ascending
    gamma: float

    @property
    def n_plus(self) -> int:
        return int(self.plus_indices.size)

    @property
    def n_minus(self) -> int:
        return int(self.minus_indices.size)


def plus_size(gamma: float, n: int) -> int:
    """``max(1, round(gamma * n))`` with halves rounded up."""
    return max(1, min(n, int(math.floor(gamma * n + 0.5))))


def partition_by_sensitivity(scores, gamma: float) -> SensitivityPartition:
    """Split a batch into the ``k`` highest-scoring rows and the rest.

    ``k = max(1, round(gamma * n))``.  Equal scores are ordered by ascending
    index, so the lower index joins the sensitive set first.  ``xi`` is the
    ``k``-th largest score.
    """
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise ValidationError("cannot partition an empty score vector")
    if np.any(np.isnan(scores)):
        raise NumericError("sensitivity scores contain NaN")
    k = plus_size(gamma, scores.size)
    # a stable sort of the negated scores keeps equal scores in index order
    order = np.argsort(-scores, kind="stable")
    plus = np.sort(order[:k])
    minus = np.sort(order[k:])
    return SensitivityPartition(scores, float(scores[order[k - 1]]), plus, minus, float(gamma))


def lipschitz_probe(params: M.ModelParams, dataset, n_pairs: int, radius: float,
                    rng: np.random.Generator, loss: str = "cross_entropy",
                    max_examples: int = 256):
    """Empirical smoothness constants of the loss around ``params``.

    Returns ``(kappa1_hat, kappa2_hat)``.  ``kappa1_hat`` is the largest ratio
    ``||grad_w L(u) - grad_w L(v)|| / ||u - v||`` over weight pairs drawn
    within ``radius`` of ``params``; ``kappa2_hat`` is the same ratio for
    per-example input gradients over input pairs within ``radius`` of a data
    point.  These are lower estimates of the true constants, not bounds.
    """
    from .data import Dataset, full_batch

    if n_pairs < 1:
        raise ValidationError("n_pairs must be >= 1")
    if isinstance(dataset, Dataset):
        if dataset.n > max_examples:
            keep = np.sort(rng.choice(dataset.n, size=max_examples, replace=False))
            dataset = Dataset(dataset.features[keep], dataset.labels[keep],
                              dataset.num_classes, dataset.split)
        batch = full_batch(dataset)
    else:
        batch = dataset
    w = M.params_to_vector(params)
    d = w.size

    def ball_point(center, dim):
        u = rng.standard_normal(dim)
        return center + radius * rng.uniform() * u / np.linalg.norm(u)

    kappa1 = 0.0
    for _ in range(n_pairs):
        u, v = ball_point(w, d), ball_point(w, d)
        dist = np.linalg.norm(u - v)
        if dist == 0.0:
            continue
        _, gu = M.loss_and_grad(M.vector_to_params(u, params.spec), batch, loss=loss)
        _, gv = M.loss_and_grad(M.vector_to_params(v, params.spec), batch, loss=loss)
        kappa1 = max(kappa1, float(np.linalg.norm(gu - gv) / dist))

    def input_grad(x_row, y_row):
        one = SimpleNamespace(x=x_row[None, :], y=y_row[None, :])
        fp = M.forward_losses(params, one, loss=loss, input_grad=True, track=False)
        T.backward(fp.mean_loss)
        return fp.inputs.grad[0]

    kappa2 = 0.0
    n = batch.x.shape[0]
    for _ in range(n_pairs):
        i = int(rng.integers(n))
        p, q = ball_point(batch.x[i], batch.x.shape[1]), ball_point(batch.x[i], batch.x.shape[1])
        dist = np.linalg.norm(p - q)
        if dist == 0.0:
            continue
        gp, gq = input_grad(p, batch.y[i]), input_grad(q, batch.y[i])
        kappa2 = max(kappa2, float(np.linalg.norm(gp - gq) / dist))
    return kappa1, kappa2
