"""Mixup: one Beta(alpha, alpha) coefficient per batch and a random partner per row."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import LabeledBatch
from .errors import ConfigError, ValidationError
from .model import ModelParams, losses_only


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 1.0
    enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"mixup alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class MixedBatch:
    batch: LabeledBatch        # interpolated features and labels
    lam: float
    perm: np.ndarray           # row i was mixed with row perm[i]
    left_indices: np.ndarray   # batch positions weighted by lam
    right_indices: np.ndarray  # batch positions weighted by 1 - lam

    @property
    def x(self):
        return self.batch.x

    @property
    def y(self):
        return self.batch.y

    @property
    def size(self) -> int:
        return self.batch.size


def sample_lambda(cfg: MixupConfig, rng: np.random.Generator) -> float:
    """Draw from Beta(alpha, alpha) as ``X / (X + Y)`` with ``X, Y ~ Gamma(alpha, 1)``.

    ``alpha == 1`` is Uniform(0, 1) and takes a single uniform draw.
    """
    if cfg.alpha == 1.0:
        return float(rng.random())
    a = rng.standard_gamma(cfg.alpha)
    b = rng.standard_gamma(cfg.alpha)
    total = a + b
    if total == 0.0:
        # both gammas underflowed (tiny alpha); the limit law puts mass 1/2 on each end
        return float(rng.random() < 0.5)
    return float(a / total)


def mixup_batch(batch: LabeledBatch, lam: float, rng: np.random.Generator) -> MixedBatch:
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixup coefficient {lam} outside [0, 1]")
    if batch.size < 1:
        raise ValidationError("cannot mix an empty batch")
    perm = rng.permutation(batch.size)
    x = lam * batch.x + (1.0 - lam) * batch.x[perm]
    y = lam * batch.y + (1.0 - lam) * batch.y[perm]
    mixed = LabeledBatch(x, y, batch.source_indices)
    return MixedBatch(mixed, float(lam), perm, np.arange(batch.size), perm.copy())


def passthrough(batch: LabeledBatch) -> MixedBatch:
    ident = np.arange(batch.size)
    return MixedBatch(batch, 1.0, ident, ident, ident.copy())


def apply_mixup(batch: LabeledBatch, cfg: MixupConfig, lam_rng, perm_rng,
                lam: float | None = None) -> MixedBatch:
    """Full Mixup procedure; ``lam`` overrides the sampled coefficient.

    With ``cfg.enabled`` false the batch passes through unchanged and no
    randomness is consumed.
    """
    if not cfg.enabled:
        return passthrough(batch)
    # the coefficient is drawn even when overridden so that streams stay aligned
    drawn = sample_lambda(cfg, lam_rng)
    return mixup_batch(batch, drawn if lam is None else lam, perm_rng)


def mix_loss(params: ModelParams, mixed) -> float:
    """Mean soft-label cross-entropy of ``params`` on a mixed batch."""
    return float(losses_only(params, mixed).mean())
