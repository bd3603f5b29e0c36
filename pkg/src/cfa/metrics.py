"""Accuracy matrix and the ACC / BWT / FWT continual-learning metrics.

``R[i][j]`` (0-based here) is the test accuracy on task ``j`` after training
through task ``i``.  Unpopulated cells are NaN.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError


class RMatrix:
    def __init__(self, n_tasks: int):
        if n_tasks <= 0:
            raise ContractError("an R matrix needs at least one task")
        self.r = np.full((n_tasks, n_tasks), np.nan)
        self.baseline = np.full(n_tasks, np.nan)

    @property
    def n_tasks(self) -> int:
        return len(self.r)

    def set(self, after_task: int, on_task: int, accuracy: float) -> None:
        """1-based indices."""
        if not 0.0 <= accuracy <= 1.0:
            raise ContractError(f"accuracy {accuracy} outside [0, 1]")
        self.r[after_task - 1, on_task - 1] = accuracy

    def set_baseline(self, task: int, accuracy: float) -> None:
        self.baseline[task - 1] = accuracy

    def final_row(self) -> np.ndarray:
        return self.r[-1].copy()

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["after_task"] + [f"task_{j + 1}" for j in range(self.n_tasks)])
            for i, row in enumerate(self.r):
                writer.writerow([i + 1] + [_fmt(v) for v in row])
            writer.writerow(["baseline"] + [_fmt(v) for v in self.baseline])

    @classmethod
    def load_csv(cls, path: str | Path) -> "RMatrix":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        if len(rows) < 3 or rows[-1][0] != "baseline":
            raise FormatError(f"{path}: not an R matrix file")
        n = len(rows[0]) - 1
        if len(rows) != n + 2:
            raise FormatError(f"{path}: expected {n} task rows, found {len(rows) - 2}")
        out = cls(n)
        for i, row in enumerate(rows[1:-1]):
            out.r[i] = [float(v) for v in row[1:]]
        out.baseline[:] = [float(v) for v in rows[-1][1:]]
        return out


def _fmt(v: float) -> str:
    return "nan" if np.isnan(v) else repr(float(v))


def _as_array(R) -> np.ndarray:
    return np.asarray(R.r if isinstance(R, RMatrix) else R, dtype=np.float64)


def metric_acc(R) -> float:
    """Mean of the final row."""
    r = _as_array(R)
    last = r[-1]
    if np.isnan(last).any():
        raise ContractError("final row of R is incomplete")
    return float(last.mean())


def metric_bwt(R) -> float:
    """Mean change on earlier tasks between learning them and the end of the stream."""
    r = _as_array(R)
    t = len(r)
    if t < 2:
        raise ContractError("backward transfer needs at least two tasks")
    diffs = r[-1, : t - 1] - np.diag(r)[: t - 1]
    if np.isnan(diffs).any():
        raise ContractError("diagonal or final row of R is incomplete")
    return float(diffs.mean())


def metric_fwt(R, baseline=None) -> float:
    """Mean accuracy on each task just before learning it, relative to ``baseline``."""
    if baseline is None:
        if not isinstance(R, RMatrix):
            raise ContractError("forward transfer needs baseline accuracies")
        baseline = R.baseline
    r = _as_array(R)
    b = np.asarray(baseline, dtype=np.float64)
    t = len(r)
    if t < 2:
        raise ContractError("forward transfer needs at least two tasks")
    if len(b) != t:
        raise ContractError(f"{len(b)} baseline accuracies for {t} tasks")
    diffs = np.array([r[i - 1, i] - b[i] for i in range(1, t)])
    if np.isnan(diffs).any():
        raise ContractError("R_{i-1,i} cells or baseline accuracies are missing")
    return float(diffs.mean())


def summarize(R: RMatrix) -> dict:
    out = {"acc": metric_acc(R), "per_task_accuracy": [float(v) for v in R.final_row()]}
    if R.n_tasks >= 2:
        out["bwt"] = metric_bwt(R)
        out["fwt"] = metric_fwt(R)
    else:
        out["bwt"] = None
        out["fwt"] = None
    return out
