"""Dice overlap and continual-learning metrics over the train-test matrix.

The matrix entry p[i][j] is the DSC on dataset j's test set after training
sequentially through dataset i (0-based here; definitions below follow the
usual 1-based notation). Everything in this module is a pure function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .domain import ValidationError


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice coefficient 2|P∩G| / (|P|+|G|); two empty masks count as 1.0."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not np.isin(pred, (0, 1)).all() or not np.isin(gt, (0, 1)).all():
        raise ValidationError("masks must be binary")
    p_sum = int(pred.sum())
    g_sum = int(gt.sum())
    if p_sum + g_sum == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p_sum + g_sum)


@dataclass
class TrainTestMatrix:
    """P datasets, P sessions: dsc[i, j] is test DSC on D_j after session i+1."""

    dataset_ids: list[str]
    dsc: np.ndarray

    def __post_init__(self):
        self.dsc = np.asarray(self.dsc, dtype=float)
        p = len(self.dataset_ids)
        if self.dsc.shape != (p, p):
            raise ValidationError(
                f"matrix shape {self.dsc.shape} does not match {p} dataset ids"
            )
        if not np.isfinite(self.dsc).all():
            raise ValidationError("matrix entries must be finite")
        if (self.dsc < 0).any() or (self.dsc > 1).any():
            raise ValidationError("matrix entries must lie in [0, 1]")

    @property
    def num_datasets(self) -> int:
        return len(self.dataset_ids)


def _require_multi(matrix: TrainTestMatrix) -> int:
    p = matrix.num_datasets
    if p < 2:
        raise ValidationError("transfer metrics need at least 2 datasets")
    return p


# Sums below are sequential in row-major order on purpose: results then match
# a naive double-loop reference bit for bit, which the oracle tests assert.


def avg(matrix: TrainTestMatrix) -> float:
    """Mean of the last row: performance on every test set after the final session."""
    p = matrix.num_datasets
    total = 0.0
    for j in range(p):
        total += float(matrix.dsc[p - 1, j])
    return total / p


def ilm(matrix: TrainTestMatrix) -> float:
    """Mean of the lower triangle including the diagonal."""
    p = matrix.num_datasets
    total = 0.0
    for i in range(p):
        for j in range(i + 1):
            total += float(matrix.dsc[i, j])
    return total / (p * (p + 1) / 2)


def bwt(matrix: TrainTestMatrix) -> float:
    """Mean final-minus-diagonal retention; negative values mean forgetting."""
    p = _require_multi(matrix)
    total = 0.0
    for i in range(p - 1):
        total += float(matrix.dsc[p - 1, i]) - float(matrix.dsc[i, i])
    return total / (p - 1)


def fwt(matrix: TrainTestMatrix) -> float:
    """Mean zero-shot DSC on each dataset just before training on it."""
    p = _require_multi(matrix)
    total = 0.0
    for j in range(1, p):
        total += float(matrix.dsc[j - 1, j])
    return total / (p - 1)


def per_dataset_forgetting(matrix: TrainTestMatrix) -> list[float]:
    p = matrix.num_datasets
    return [float(matrix.dsc[-1, i] - matrix.dsc[i, i]) for i in range(p)]


def compute_all(matrix: TrainTestMatrix) -> dict:
    return {
        "avg": avg(matrix),
        "ilm": ilm(matrix),
        "bwt": bwt(matrix),
        "fwt": fwt(matrix),
        "per_dataset_forgetting": per_dataset_forgetting(matrix),
    }


def load_matrix(path) -> TrainTestMatrix:
    """Read the dsc grid out of a run's matrix.json."""
    doc = json.loads(Path(path).read_text())
    return TrainTestMatrix(dataset_ids=list(doc["datasets"]), dsc=np.array(doc["dsc"]))


def write_metrics(matrix: TrainTestMatrix, path) -> dict:
    """Compute all metrics for a matrix and persist them as metrics.json."""
    values = compute_all(matrix)
    Path(path).write_text(json.dumps(values, indent=2, sort_keys=True))
    return values


def matrix_csv(matrix: TrainTestMatrix) -> str:
    """Matrix rendered as CSV, one row per session."""
    header = "session," + ",".join(matrix.dataset_ids)
    lines = [header]
    for i, row in enumerate(matrix.dsc, start=1):
        lines.append(f"{i}," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
