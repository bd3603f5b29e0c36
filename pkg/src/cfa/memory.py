"""Budgeted exemplar memory with nearest-mean-of-exemplars selection.

A candidate's score is the L2 distance between its teacher logits and the
mean teacher logits of its class; smaller is better.  Two budget policies:

``fixed``  at most ``budget`` exemplars in total.
``grow``   at most ``budget`` exemplars per task seen so far.

When the memory is full, a candidate first claims its class's fair share
(``capacity // classes_seen``) by evicting the worst exemplar of a class that
holds more than its share.  A class already at its share only replaces its
own worst exemplar.  Ties keep the older exemplar.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .nn import Network
from .serialization import load_arrays, save_arrays

POLICIES = ("fixed", "grow")
MEMORY_FORMAT_VERSION = 1


@dataclass
class Exemplar:
    input: np.ndarray
    task_id: int
    class_id: int
    teacher_logits: np.ndarray
    distance_to_class_mean: float
    order: int = -1

    @property
    def rank_key(self) -> tuple[float, int]:
        return (self.distance_to_class_mean, self.order)


class ReplayMemory:
    def __init__(self, policy: str = "fixed", budget: int = 1000):
        if policy not in POLICIES:
            raise ConfigError(f"memory policy must be one of {POLICIES}, got {policy!r}")
        if budget <= 0:
            raise ConfigError(f"memory budget must be positive, got {budget}")
        self.policy = policy
        self.budget = int(budget)
        self.tasks: list[int] = []
        self._by_class: dict[int, list[Exemplar]] = {}
        self._counter = 0
        self._input_shape: tuple[int, ...] | None = None

    # -------------------------------------------------------------- sizing

    @property
    def capacity(self) -> int:
        if self.policy == "fixed":
            return self.budget
        return self.budget * max(len(self.tasks), 1)

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_class.values())

    @property
    def entries(self) -> list[Exemplar]:
        return [e for cls in self._by_class.values() for e in cls]

    def class_counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self._by_class.items()}

    def max_distance(self, class_id: int) -> float | None:
        bucket = self._by_class.get(class_id)
        return bucket[-1].distance_to_class_mean if bucket else None

    def register(self, task_id: int, class_ids: Sequence[int] = ()) -> None:
        if task_id not in self.tasks:
            self.tasks.append(task_id)
        for c in class_ids:
            self._by_class.setdefault(int(c), [])

    # ----------------------------------------------------------- insertion

    def _place(self, ex: Exemplar) -> None:
        bucket = self._by_class[ex.class_id]
        key = ex.rank_key
        i = len(bucket)
        while i > 0 and bucket[i - 1].rank_key > key:
            i -= 1
        bucket.insert(i, ex)

    def _evict_worst(self, classes) -> None:
        victim_class = max(classes, key=lambda c: self._by_class[c][-1].rank_key)
        self._by_class[victim_class].pop()

    def try_insert(self, candidate: Exemplar, class_mean: np.ndarray | None = None) -> bool:
        """Offer ``candidate``; returns whether it was stored.

        With ``class_mean`` given the candidate's distance is recomputed from
        its teacher logits.
        """
        if class_mean is not None:
            candidate.distance_to_class_mean = float(
                np.linalg.norm(np.asarray(candidate.teacher_logits) - np.asarray(class_mean))
            )
        if candidate.distance_to_class_mean < 0 or not np.isfinite(candidate.distance_to_class_mean):
            raise ContractError("distance to class mean must be finite and non-negative")
        shape = np.shape(candidate.input)
        if self._input_shape is None:
            self._input_shape = shape
        elif shape != self._input_shape:
            raise ShapeError(f"input shape {shape} differs from stored {self._input_shape}")
        self.register(candidate.task_id, [candidate.class_id])
        candidate.order = self._counter
        self._counter += 1

        cap = self.capacity
        if len(self) < cap:
            self._place(candidate)
            return True
        share = cap // len(self._by_class)
        own = self._by_class[candidate.class_id]
        if len(own) < share:
            over = [c for c, v in self._by_class.items() if len(v) > share]
            self._evict_worst(over)
            self._place(candidate)
            return True
        scope = [candidate.class_id] if own else [c for c, v in self._by_class.items() if v]
        worst_class = max(scope, key=lambda c: self._by_class[c][-1].rank_key)
        if candidate.distance_to_class_mean < self._by_class[worst_class][-1].distance_to_class_mean:
            self._by_class[worst_class].pop()
            self._place(candidate)
            return True
        return False

    # ------------------------------------------------------------- readout

    def snapshot(self, seed: int | None = None) -> np.ndarray:
        """Stored inputs only, as an independent array.

        Without a seed the order is deterministic (class registration order,
        then distance); with a seed the rows are permuted by that seed.
        """
        if len(self) == 0:
            raise ContractError("replay memory is empty")
        inputs = np.stack([e.input for e in self.entries]).astype(np.float64)
        if seed is not None:
            inputs = inputs[np.random.default_rng(seed).permutation(len(inputs))]
        return inputs

    # --------------------------------------------------------- persistence

    def save(self, path: str | Path) -> Path:
        entries = self.entries
        arrays = {
            "inputs": np.stack([e.input for e in entries]) if entries else np.zeros((0, 0)),
            "distances": np.array([e.distance_to_class_mean for e in entries]),
            "teacher_logits": np.concatenate([e.teacher_logits for e in entries]) if entries else np.zeros(0),
        }
        meta = {
            "memory_format": MEMORY_FORMAT_VERSION,
            "policy": self.policy,
            "budget": self.budget,
            "task_count": len(self.tasks),
            "tasks": list(self.tasks),
            "classes": list(self._by_class),
            "counter": self._counter,
            # per entry: class id, task id, insertion order, logit width
            "entry_meta": [[e.class_id, e.task_id, e.order, len(e.teacher_logits)] for e in entries],
        }
        return save_arrays(path, arrays, kind="replay-memory", meta=meta)

    @classmethod
    def load(cls, path: str | Path) -> "ReplayMemory":
        arrays, meta = load_arrays(path, kind="replay-memory")
        if meta.get("memory_format") != MEMORY_FORMAT_VERSION:
            raise ContractError(f"unsupported memory format {meta.get('memory_format')}")
        mem = cls(meta["policy"], meta["budget"])
        mem.tasks = list(meta["tasks"])
        for c in meta["classes"]:
            mem._by_class[int(c)] = []
        offset = 0
        for row, (class_id, task_id, order, width) in enumerate(meta["entry_meta"]):
            logits = arrays["teacher_logits"][offset : offset + width].copy()
            offset += width
            mem._by_class[class_id].append(
                Exemplar(
                    input=arrays["inputs"][row].copy(),
                    task_id=task_id,
                    class_id=class_id,
                    teacher_logits=logits,
                    distance_to_class_mean=float(arrays["distances"][row]),
                    order=order,
                )
            )
        mem._counter = meta["counter"]
        if meta["entry_meta"]:
            mem._input_shape = arrays["inputs"].shape[1:]
        return mem


def class_mean(teacher: Network, samples: np.ndarray) -> np.ndarray:
    """Mean teacher logits over one class's samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or len(samples) == 0:
        raise ContractError("class_mean needs a non-empty [n, dim] sample set")
    return teacher.logits(samples).mean(axis=0)


def populate(
    memory: ReplayMemory,
    teacher: Network,
    task_id: int,
    x: np.ndarray,
    y: np.ndarray,
) -> int:
    """Offer every training sample of one task, in the given order; returns how many were stored."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    memory.register(task_id, teacher.classes)
    logits = teacher.logits(x)
    means = {}
    for c in teacher.classes:
        mask = y == c
        if mask.any():
            means[c] = class_mean(teacher, x[mask])
    accepted = 0
    for xi, yi, zi in zip(x, y, logits):
        candidate = Exemplar(
            input=xi.copy(),
            task_id=task_id,
            class_id=int(yi),
            teacher_logits=zi.copy(),
            distance_to_class_mean=0.0,
        )
        accepted += memory.try_insert(candidate, means[int(yi)])
    return accepted


def snapshot_for_amalgamation(memory: ReplayMemory, seed: int | None = None) -> np.ndarray:
    return memory.snapshot(seed)
