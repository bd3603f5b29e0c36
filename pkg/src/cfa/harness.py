"""Continual-learning experiments: CFA, naive fine-tuning, and the joint upper bound.

All three share one evaluation protocol.  After each task ``i`` the current
model is tested on every task seen so far (row ``i`` of R) and on task
``i + 1`` (the forward-transfer cell).  ``baseline[i]`` is the accuracy of a
freshly initialised, untrained network on task ``i``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .amalgamation import AmalgamationConfig, StepRecord, amalgamate, stacked_classes, write_loss_history
from .data import TaskSpec, TaskStream, generate_synthetic_stream, load_idx_split
from .errors import ConfigError, NonFiniteError, TrainingError
from .losses import softmax_cross_entropy
from .memory import ReplayMemory, populate
from .metrics import RMatrix, summarize
from .nn import Network, init_parameters
from .optim import Adam
from .serialization import save_network

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    # task stream
    source: str = "synthetic"
    n_tasks: int = 5
    classes_per_task: int = 2
    dim: int = 20
    train_per_class: int = 200
    test_per_class: int = 100
    separation: float = 6.0
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    idx_max_train_per_class: int = 1000
    idx_max_test_per_class: int = 0
    # architecture shared by teachers, students and baselines
    hidden_width: int = 100
    feature_width: int = 64
    head_width: int = 32
    # supervised training (teachers and baselines)
    teacher_epochs: int = 50
    teacher_lr: float = 1e-3
    teacher_batch_size: int = 32
    # replay memory
    memory_policy: str = "fixed"
    memory_budget: int = 1000
    # amalgamation
    alpha: float = 0.5
    amalgamation_epochs: int = 100
    amalgamation_lr: float = 1e-4
    amalgamation_batch_size: int = 1
    shuffle_each_epoch: bool = True
    adaptation_width: int = 64
    reconstruction_squared: bool = False
    # run
    output_dir: str = ""
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not (self.idx_train_images and self.idx_train_labels):
            raise ConfigError("idx source needs idx_train_images and idx_train_labels")
        if self.memory_policy not in ("fixed", "grow"):
            raise ConfigError(f"memory_policy must be 'fixed' or 'grow', got {self.memory_policy!r}")
        positive = (
            "n_tasks classes_per_task dim train_per_class test_per_class hidden_width feature_width "
            "head_width teacher_epochs teacher_batch_size memory_budget amalgamation_epochs "
            "amalgamation_batch_size"
        ).split()
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.separation <= 0 or self.teacher_lr <= 0:
            raise ConfigError("separation and teacher_lr must be positive")
        self.amalgamation_config().validate()
        return self

    def amalgamation_config(self, seed: int | None = None) -> AmalgamationConfig:
        return AmalgamationConfig(
            alpha=self.alpha,
            epochs=self.amalgamation_epochs,
            lr=self.amalgamation_lr,
            batch_size=self.amalgamation_batch_size,
            shuffle_each_epoch=self.shuffle_each_epoch,
            seed=self.seed if seed is None else seed,
            adaptation_width=self.adaptation_width,
            reconstruction_squared=self.reconstruction_squared,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def coerce_field(name: str, text: str):
    types = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, keys use ExperimentConfig field names."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = coerce_field(key.replace("-", "_"), value)
    return values


def write_config_file(path: str | Path, cfg: ExperimentConfig) -> None:
    lines = [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


def derive_seed(seed: int, *tags) -> int:
    """Independent, reproducible sub-seed for a named stage."""
    entropy = [int(seed) & 0xFFFF_FFFF_FFFF_FFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0])


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.source == "synthetic":
        return generate_synthetic_stream(
            cfg.n_tasks,
            cfg.classes_per_task,
            cfg.dim,
            cfg.train_per_class,
            cfg.separation,
            seed=derive_seed(cfg.seed, "data"),
            test_per_class=cfg.test_per_class,
        )
    return load_idx_split(
        cfg.idx_train_images,
        cfg.idx_train_labels,
        cfg.classes_per_task,
        test_images_path=cfg.idx_test_images or None,
        test_labels_path=cfg.idx_test_labels or None,
        max_train_per_class=cfg.idx_max_train_per_class or None,
        max_test_per_class=cfg.idx_max_test_per_class or None,
        seed=derive_seed(cfg.seed, "data"),
    )


# ------------------------------------------------------------ supervised


def new_network(cfg: ExperimentConfig, input_dim: int, classes: Sequence[int], seed: int) -> Network:
    net = Network(input_dim, classes, cfg.hidden_width, cfg.feature_width, cfg.head_width)
    return init_parameters(net, seed)


def train_network(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
) -> float:
    """Minibatch Adam on softmax cross-entropy over the network's classes; returns the last loss."""
    if len(x) == 0:
        raise ConfigError("cannot train on an empty set")
    column = {c: i for i, c in enumerate(net.classes)}
    targets = np.array([column[int(c)] for c in y])
    net.set_trainable(True)
    opt = Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    loss_value = float("nan")
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            try:
                _, logits = net.forward(x[idx])
                loss = softmax_cross_entropy(logits, targets[idx])
                T.backward(loss)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingError(str(exc), step=step) from exc
            loss_value = loss.item()
            step += 1
    return loss_value


def accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return 0.0
    return float(np.mean(net.predict(x) == y))


def train_teacher(task: TaskSpec, cfg: ExperimentConfig, seed: int) -> Network:
    """Supervised network on one task's classes; returned frozen.

    The initial weights depend on ``seed`` only, so every teacher of a run
    starts from the same point (as if fine-tuned from one pretrained model);
    the minibatch order also depends on the task id.
    """
    net = new_network(cfg, task.input_dim, task.class_ids, derive_seed(seed, "init"))
    train_network(
        net, task.x_train, task.y_train, cfg.teacher_epochs, cfg.teacher_lr, cfg.teacher_batch_size,
        derive_seed(seed, "train", task.task_id),
    )
    net.set_trainable(False)
    log.info(
        "teacher %d: train acc %.4f, test acc %.4f",
        task.task_id, accuracy(net, task.x_train, task.y_train), accuracy(net, task.x_test, task.y_test),
    )
    return net


def _teacher_seed(cfg: ExperimentConfig) -> int:
    return derive_seed(cfg.seed, "teacher")


def _baseline(stream: TaskStream, cfg: ExperimentConfig, task_id: int, classes: Sequence[int]) -> float:
    net = new_network(cfg, stream.input_dim, classes, derive_seed(cfg.seed, "untrained", task_id))
    return accuracy(net, *stream.test_set(task_id))


def _evaluate_row(R: RMatrix, stream: TaskStream, net: Network, task_id: int) -> None:
    for j in range(1, task_id + 1):
        R.set(task_id, j, accuracy(net, *stream.test_set(j)))
    if task_id < len(stream):
        R.set(task_id, task_id + 1, accuracy(net, *stream.test_set(task_id + 1)))


# ------------------------------------------------------------- experiments


@dataclass
class ExperimentResult:
    method: str
    R: RMatrix
    metrics: dict
    networks: list[Network] = field(default_factory=list, repr=False)
    teachers: list[Network] = field(default_factory=list, repr=False)
    memory: ReplayMemory | None = field(default=None, repr=False)
    histories: dict[int, list[StepRecord]] = field(default_factory=dict, repr=False)
    access_log: list[tuple[str, int]] = field(default_factory=list, repr=False)


def _stream_for(cfg: ExperimentConfig, stream: TaskStream | None) -> TaskStream:
    return build_stream(cfg) if stream is None else stream.reset()


def run_cfa_experiment(cfg: ExperimentConfig, stream: TaskStream | None = None) -> ExperimentResult:
    cfg.validate()
    stream = _stream_for(cfg, stream)
    R = RMatrix(len(stream))
    memory = ReplayMemory(cfg.memory_policy, cfg.memory_budget)
    teachers: list[Network] = []
    students: list[Network] = []
    histories: dict[int, list[StepRecord]] = {}
    footprint = []
    for task in stream:
        i = task.task_id
        R.set_baseline(i, _baseline(stream, cfg, i, stacked_classes(teachers) + list(task.class_ids)))
        teacher = train_teacher(task, cfg, _teacher_seed(cfg))
        teachers.append(teacher)
        populate(memory, teacher, i, task.x_train, task.y_train)
        footprint.append(len(memory))
        student = new_network(cfg, task.input_dim, stacked_classes(teachers), derive_seed(cfg.seed, "student", i))
        result = amalgamate(teachers, memory, student, cfg.amalgamation_config(derive_seed(cfg.seed, "amalgamate", i)))
        students.append(result.student)
        histories[i] = result.history
        _evaluate_row(R, stream, result.student, i)
        log.info("cfa after task %d: memory %d, row %s", i, len(memory), np.round(R.r[i - 1, :i], 4))
    metrics = summarize(R)
    metrics.update(
        method="cfa",
        memory_policy=memory.policy,
        memory_budget=memory.budget,
        memory_footprint=len(memory),
        memory_capacity=memory.capacity,
        memory_per_task=footprint,
        baseline_accuracy=[float(v) for v in R.baseline],
    )
    out = ExperimentResult("cfa", R, metrics, students, teachers, memory, histories, list(stream.access_log))
    if cfg.output_dir:
        write_outputs(cfg, out)
    return out


def run_naive_baseline(cfg: ExperimentConfig, stream: TaskStream | None = None) -> ExperimentResult:
    """One network fine-tuned task after task, growing its head, with no forgetting mitigation."""
    cfg.validate()
    stream = _stream_for(cfg, stream)
    R = RMatrix(len(stream))
    net: Network | None = None
    seen: list[int] = []
    for task in stream:
        i = task.task_id
        R.set_baseline(i, _baseline(stream, cfg, i, seen + list(task.class_ids)))
        seed = _teacher_seed(cfg)
        if net is None:
            net = new_network(cfg, task.input_dim, task.class_ids, derive_seed(seed, "init"))
        else:
            net.expand_head(task.class_ids, derive_seed(seed, "head", i))
        seen += list(task.class_ids)
        train_network(
            net, task.x_train, task.y_train, cfg.teacher_epochs, cfg.teacher_lr, cfg.teacher_batch_size,
            derive_seed(seed, "train", i),
        )
        _evaluate_row(R, stream, net, i)
    metrics = summarize(R)
    metrics.update(method="naive", baseline_accuracy=[float(v) for v in R.baseline])
    out = ExperimentResult("naive", R, metrics, [net], access_log=list(stream.access_log))
    if cfg.output_dir:
        write_outputs(cfg, out)
    return out


def run_joint_upper_bound(cfg: ExperimentConfig, stream: TaskStream | None = None) -> ExperimentResult:
    """One network trained offline on the union of every task; only the final row of R is filled."""
    cfg.validate()
    stream = _stream_for(cfg, stream)
    tasks = stream.offline_tasks()
    classes = [c for t in tasks for c in t.class_ids]
    x = np.concatenate([t.x_train for t in tasks])
    y = np.concatenate([t.y_train for t in tasks])
    seed = _teacher_seed(cfg)
    net = new_network(cfg, stream.input_dim, classes, derive_seed(seed, "init"))
    train_network(
        net, x, y, cfg.teacher_epochs, cfg.teacher_lr, cfg.teacher_batch_size, derive_seed(seed, "train", 1)
    )
    R = RMatrix(len(tasks))
    for t in tasks:
        R.set(len(tasks), t.task_id, accuracy(net, t.x_test, t.y_test))
    metrics = {"method": "joint", "acc": float(R.final_row().mean()),
               "per_task_accuracy": [float(v) for v in R.final_row()]}
    out = ExperimentResult("joint", R, metrics, [net], access_log=list(stream.access_log))
    if cfg.output_dir:
        write_outputs(cfg, out)
    return out


def write_outputs(cfg: ExperimentConfig, result: ExperimentResult) -> Path:
    """R.csv, metrics.json, checkpoints and (for CFA) memory and loss history."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.R.save_csv(out / "R.csv")
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2, sort_keys=True) + "\n")
    write_config_file(out / "config.txt", cfg)
    ckpt = out / "checkpoints"
    if result.method == "cfa":
        for i, (teacher, student) in enumerate(zip(result.teachers, result.networks), 1):
            save_network(ckpt / f"teacher_{i}", teacher, {"task_id": i})
            save_network(ckpt / f"student_{i}", student, {"after_task": i})
        result.memory.save(out / "memory")
        history_path = out / "loss_history.csv"
        history_path.unlink(missing_ok=True)
        for i, hist in result.histories.items():
            write_loss_history(history_path, hist, run=f"task_{i}")
    else:
        save_network(ckpt / f"{result.method}_final", result.networks[-1])
    (out / "access_log.json").write_text(json.dumps(result.access_log) + "\n")
    return out


# ------------------------------------------------------------------ sweeps


def _seed_rows(cfg: ExperimentConfig, seeds: Sequence[int], label: dict, stream_cache: dict) -> list[dict]:
    rows = []
    for s in seeds:
        run_cfg = cfg.replace(seed=s, output_dir="")
        key = (s,)
        if key not in stream_cache:
            stream_cache[key] = build_stream(run_cfg)
        res = run_cfa_experiment(run_cfg, stream_cache[key])
        rows.append({**label, "seed": s, "acc": res.metrics["acc"], "bwt": res.metrics["bwt"],
                     "fwt": res.metrics["fwt"]})
    return rows


def ablate_alpha(cfg: ExperimentConfig, alphas: Sequence[float] = (1.0, 0.5, 0.0),
                 seeds: Sequence[int] = (0,)) -> list[dict]:
    cache: dict = {}
    rows = []
    for a in alphas:
        rows += _seed_rows(cfg.replace(alpha=a), seeds, {"alpha": a}, cache)
    return rows


def sweep_memory(cfg: ExperimentConfig, budgets: Sequence[int] = (50, 100, 200, 400),
                 seeds: Sequence[int] = (0,)) -> list[dict]:
    cache: dict = {}
    rows = []
    for b in budgets:
        rows += _seed_rows(cfg.replace(memory_budget=b), seeds, {"memory_budget": b}, cache)
    return rows


def average_by(rows: Sequence[dict], key: str) -> dict:
    """Mean and std of acc/bwt/fwt per value of ``key``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = {}
    for k, rs in groups.items():
        stats = {}
        for m in ("acc", "bwt", "fwt"):
            vals = np.array([r[m] for r in rs if r[m] is not None], dtype=float)
            stats[m] = float(vals.mean()) if len(vals) else None
            stats[m + "_std"] = float(vals.std()) if len(vals) else None
        out[k] = stats
    return out
