"""Accuracy and generalization-gap metrics, and the per-run summary row."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ValidationError


def test_acc(preds, labels) -> float:
    """Percentage of predictions equal to their labels."""
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if preds.size == 0:
        raise ValidationError("accuracy of an empty prediction set is undefined")
    if preds.shape != labels.shape:
        raise ValidationError(f"{preds.size} predictions for {labels.size} labels")
    return 100.0 * int(np.count_nonzero(preds == labels)) / preds.size


test_acc.__test__ = False  # keep pytest from collecting it


def gap(test_acc_pct: float, train_acc_pct: float) -> float:
    """Signed difference ``test - train`` in percentage points."""
    for v in (test_acc_pct, train_acc_pct):
        if not 0.0 <= v <= 100.0:
            raise ValidationError(f"accuracy {v} outside [0, 100]")
    return float(test_acc_pct) - float(train_acc_pct)


@dataclass
class MetricsRow:
    method: str
    dataset: str
    seed: int
    rho: float
    gamma: float
    batch_size: int
    best_test_acc: float | None
    best_gap: float | None
    wall_clock_s: float
    epochs: int
    status: str = "ok"
    error: str = ""
    upper_bound_frac: float | None = None
    sharpness_nonneg_frac: float | None = None
    backward_per_step: float | None = None

    def __post_init__(self):
        if self.best_test_acc is not None and not 0.0 <= self.best_test_acc <= 100.0:
            raise ValidationError(f"best_test_acc {self.best_test_acc} outside [0, 100]")
        if self.best_gap is not None and not -100.0 <= self.best_gap <= 100.0:
            raise ValidationError(f"best_gap {self.best_gap} outside [-100, 100]")

    @classmethod
    def columns(cls) -> list:
        return [f.name for f in fields(cls)]

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_strings(cls, row: dict) -> "MetricsRow":
        """Inverse of CSV serialization (empty cells become ``None``)."""
        conv = {}
        for f in fields(cls):
            v = row.get(f.name, "")
            if f.name in ("method", "dataset", "status", "error"):
                conv[f.name] = v
            elif f.name in ("seed", "batch_size", "epochs"):
                conv[f.name] = int(v)
            else:
                conv[f.name] = None if v in ("", None) else float(v)
        if conv["wall_clock_s"] is None:
            conv["wall_clock_s"] = 0.0
        return cls(**conv)
