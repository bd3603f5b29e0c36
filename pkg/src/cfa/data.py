"""Task streams: synthetic Gaussian splits and IDX (MNIST-layout) image splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, FormatError, GenerationError, LookaheadError
from .serialization import load_arrays, save_arrays

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class TaskSpec:
    task_id: int
    class_ids: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        allowed = set(self.class_ids)
        for name in ("y_train", "y_test"):
            labels = getattr(self, name)
            if not set(np.unique(labels).tolist()) <= allowed:
                raise ContractError(f"task {self.task_id}: {name} has labels outside {self.class_ids}")

    @property
    def input_dim(self) -> int:
        return self.x_train.shape[1]


class TaskStream:
    """Tasks handed out strictly in order.

    Training data of a task is available only once the task has arrived.
    Test data is readable for arrived tasks, and for the next task as an
    evaluation-only peek.  Every access is appended to ``access_log``.
    """

    def __init__(self, tasks: Sequence[TaskSpec], source: str):
        seen: set[int] = set()
        for t in tasks:
            if seen & set(t.class_ids):
                raise ContractError(f"task {t.task_id} reuses classes {sorted(seen & set(t.class_ids))}")
            seen |= set(t.class_ids)
        self._tasks = list(tasks)
        self.source = source
        self.arrived = 0
        self.access_log: list[tuple[str, int]] = []

    def __len__(self) -> int:
        return len(self._tasks)

    @property
    def input_dim(self) -> int:
        return self._tasks[0].input_dim

    def class_ids(self, task_id: int) -> tuple[int, ...]:
        """Class ids of an arrived task (or the next one, for evaluation heads)."""
        self._check(task_id, allow_next=True)
        return self._tasks[task_id - 1].class_ids

    def _check(self, task_id: int, allow_next: bool) -> None:
        if not 1 <= task_id <= len(self._tasks):
            raise ContractError(f"no task {task_id}")
        limit = self.arrived + 1 if allow_next else self.arrived
        if task_id > limit:
            raise LookaheadError(f"task {task_id} has not arrived (current: {self.arrived})")

    def arrive(self) -> TaskSpec:
        if self.arrived >= len(self._tasks):
            raise ContractError("stream exhausted")
        self.arrived += 1
        self.access_log.append(("train", self.arrived))
        return self._tasks[self.arrived - 1]

    def __iter__(self) -> Iterator[TaskSpec]:
        while self.arrived < len(self._tasks):
            yield self.arrive()

    def test_set(self, task_id: int) -> tuple[np.ndarray, np.ndarray]:
        self._check(task_id, allow_next=True)
        self.access_log.append(("peek" if task_id > self.arrived else "test", task_id))
        t = self._tasks[task_id - 1]
        return t.x_test, t.y_test

    def reset(self) -> "TaskStream":
        """A fresh stream over the same tasks (new cursor, empty log)."""
        return TaskStream(self._tasks, self.source)

    def offline_tasks(self) -> list[TaskSpec]:
        """Every task at once, for offline references such as the joint upper bound."""
        self.access_log.append(("offline", 0))
        return list(self._tasks)


# ------------------------------------------------------------------ synthetic


def _draw_means(n: int, dim: int, separation: float, sigma: float, rng: np.random.Generator,
                max_tries: int = 10_000) -> np.ndarray:
    # cube of side separation * sigma; rejection enforces the minimum distance
    half_width = 0.5 * separation * sigma
    means: list[np.ndarray] = []
    for k in range(n):
        for _ in range(max_tries):
            cand = rng.uniform(-half_width, half_width, size=dim)
            if all(np.linalg.norm(cand - m) >= separation * sigma for m in means):
                means.append(cand)
                break
        else:
            raise GenerationError(
                f"could not place class {k} at distance >= {separation} sigma in {dim} dimensions"
            )
    return np.array(means)


def generate_synthetic_stream(
    n_tasks: int,
    classes_per_task: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    seed: int,
    test_per_class: int = 100,
    sigma: float = 1.0,
) -> TaskStream:
    """Isotropic Gaussian classes whose means are pairwise ``separation * sigma`` apart."""
    if min(n_tasks, classes_per_task, dim, samples_per_class, test_per_class) <= 0:
        raise ContractError("all counts must be positive")
    if separation <= 0 or sigma <= 0:
        raise ContractError("separation and sigma must be positive")
    rng = np.random.default_rng(seed)
    n_classes = n_tasks * classes_per_task
    means = _draw_means(n_classes, dim, separation, sigma, rng)
    tasks = []
    for t in range(n_tasks):
        classes = list(range(t * classes_per_task, (t + 1) * classes_per_task))
        splits = []
        for count in (samples_per_class, test_per_class):
            x = np.concatenate([means[c] + sigma * rng.standard_normal((count, dim)) for c in classes])
            y = np.repeat(classes, count)
            perm = rng.permutation(len(y))
            splits += [x[perm], y[perm]]
        tasks.append(TaskSpec(t + 1, tuple(classes), *splits))
    return TaskStream(tasks, "synthetic-gaussian")


# ------------------------------------------------------------------------ IDX


def _open(path: str | Path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else path.open("rb")


def read_idx(path: str | Path, expected_magic: int | None = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (big-endian header) into a uint8 array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX type in magic {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - header != count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise FormatError("only unsigned-byte IDX files are supported")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    data = header + np.ascontiguousarray(array).tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "wb") as fh:
            fh.write(data)
    else:
        path.write_bytes(data)


def _read_pair(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def _subsample(x, y, per_class: int | None, rng) -> tuple[np.ndarray, np.ndarray]:
    if per_class is None:
        return x, y
    keep = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        keep.append(np.sort(rng.permutation(idx)[:per_class]))
    keep = np.sort(np.concatenate(keep))
    return x[keep], y[keep]


def load_idx_split(
    images_path: str | Path,
    labels_path: str | Path,
    classes_per_task: int,
    test_images_path: str | Path | None = None,
    test_labels_path: str | Path | None = None,
    max_train_per_class: int | None = 1000,
    max_test_per_class: int | None = None,
    test_fraction: float = 0.25,
    seed: int = 0,
) -> TaskStream:
    """Split an IDX dataset into tasks of consecutive class ids.

    Without separate test files, ``test_fraction`` of each class is held out.
    """
    if classes_per_task <= 0:
        raise ContractError("classes_per_task must be positive")
    rng = np.random.default_rng(seed)
    x, y = _read_pair(images_path, labels_path)
    if test_images_path is not None:
        if test_labels_path is None:
            raise ContractError("test images given without test labels")
        x_te, y_te = _read_pair(test_images_path, test_labels_path)
    else:
        test_idx = []
        for c in np.unique(y):
            idx = rng.permutation(np.flatnonzero(y == c))
            test_idx.append(idx[: int(round(test_fraction * len(idx)))])
        mask = np.zeros(len(y), dtype=bool)
        mask[np.concatenate(test_idx)] = True
        x_te, y_te = x[mask], y[mask]
        x, y = x[~mask], y[~mask]
    x, y = _subsample(x, y, max_train_per_class, rng)
    x_te, y_te = _subsample(x_te, y_te, max_test_per_class, rng)

    classes = sorted(np.unique(y).tolist())
    tasks = []
    for t, start in enumerate(range(0, len(classes), classes_per_task)):
        ids = classes[start : start + classes_per_task]
        tr = np.isin(y, ids)
        te = np.isin(y_te, ids)
        tasks.append(TaskSpec(t + 1, tuple(ids), x[tr], y[tr], x_te[te], y_te[te]))
    return TaskStream(tasks, "idx-image-split")


# ---------------------------------------------------------------- persistence


def save_stream(path: str | Path, stream: TaskStream) -> Path:
    arrays = {}
    tasks_meta = []
    for t in stream._tasks:
        for name in ("x_train", "y_train", "x_test", "y_test"):
            arrays[f"task{t.task_id}/{name}"] = getattr(t, name)
        tasks_meta.append({"task_id": t.task_id, "class_ids": list(t.class_ids)})
    return save_arrays(path, arrays, kind="task-stream", meta={"source": stream.source, "tasks": tasks_meta})


def load_stream(path: str | Path) -> TaskStream:
    arrays, meta = load_arrays(path, kind="task-stream")
    tasks = []
    for tm in meta["tasks"]:
        k = tm["task_id"]
        tasks.append(
            TaskSpec(
                k,
                tuple(tm["class_ids"]),
                arrays[f"task{k}/x_train"],
                arrays[f"task{k}/y_train"].astype(np.int64),
                arrays[f"task{k}/x_test"],
                arrays[f"task{k}/y_test"].astype(np.int64),
            )
        )
    return TaskStream(tasks, meta["source"])
