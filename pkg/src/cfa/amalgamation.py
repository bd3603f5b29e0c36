"""Amalgamate frozen per-task teachers into one single-head student.

Each step pushes a memory batch through the student and every teacher.
Student and teacher features are projected to a common width by per-network
adaptation layers, mapped to a half-width shared space by one shared
extractor, and compared there with a softmax KL (``l_m``).  Per-teacher
decoders map the shared vectors back to the teacher feature space
(``l_r``).  The student's output distribution is pulled towards the softmax
of the concatenated teacher logits (``d_kl_soft``).  The three terms are
blended with ``alpha`` and everything except the teachers is updated by
Adam.  No labels are read: the memory is consumed through its input-only
snapshot.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteError, ShapeError, TrainingError
from .memory import ReplayMemory
from .nn import AdaptationLayer, Module, Network, SharedExtractor, TeacherDecoder, init_parameters
from .optim import DEFAULT_LR, Adam

log = logging.getLogger(__name__)


@dataclass
class AmalgamationConfig:
    alpha: float = 0.5
    epochs: int = 100
    lr: float = DEFAULT_LR
    batch_size: int = 1
    shuffle_each_epoch: bool = True
    seed: int = 0
    adaptation_width: int = 64
    reconstruction_squared: bool = False

    def validate(self) -> "AmalgamationConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.adaptation_width <= 0 or self.adaptation_width % 2:
            raise ConfigError(f"adaptation_width must be a positive even integer, got {self.adaptation_width}")
        return self


@dataclass
class StepRecord:
    step: int
    epoch: int
    l_m: float
    l_r: float
    d_kl_soft: float
    total: float


class AmalgamationHead(Module):
    """Adaptation layers, shared extractor and decoders for one run."""

    def __init__(self, student_width: int, teacher_widths: Sequence[int], adaptation_width: int):
        self.student_adapt = AdaptationLayer(student_width, adaptation_width)
        self.teacher_adapt = [AdaptationLayer(w, adaptation_width) for w in teacher_widths]
        self.shared = SharedExtractor(adaptation_width)
        self.decoders = [TeacherDecoder(adaptation_width // 2, w) for w in teacher_widths]

    @property
    def n_teachers(self) -> int:
        return len(self.teacher_adapt)


@dataclass
class AmalgamationResult:
    student: Network
    history: list[StepRecord]
    head: AmalgamationHead = field(repr=False)


def check_disjoint(teachers: Sequence[Network]) -> None:
    seen: set[int] = set()
    for t in teachers:
        overlap = seen & set(t.classes)
        if overlap:
            raise ContractError(f"teacher class sets overlap on {sorted(overlap)}")
        seen |= set(t.classes)


def stacked_classes(teachers: Sequence[Network]) -> list[int]:
    return [c for t in teachers for c in t.classes]


def stack_teacher_outputs(teachers: Sequence[Network], x) -> np.ndarray:
    """Softmax over the concatenated teacher logits, in teacher (task) order."""
    if not teachers:
        raise ContractError("no teachers")
    x = np.asarray(x, dtype=np.float64)
    parts = []
    for t in teachers:
        z = t.logits(x)
        if z.shape[-1] != t.n_classes:
            raise ContractError(f"teacher emitted {z.shape[-1]} logits for {t.n_classes} classes")
        parts.append(z)
    return L.stacked_target(parts).data


def predict(student: Network, x) -> np.ndarray:
    """Class ids over the union of all amalgamated classes; no task id needed."""
    return student.predict(x)


def cfa_loss(
    student: Network,
    head: AmalgamationHead,
    x,
    teacher_features: Sequence[np.ndarray],
    teacher_target: np.ndarray,
    alpha: float,
    reconstruction_squared: bool = False,
) -> L.LossBreakdown:
    """Full objective for one batch; ``.tensor`` of the result is differentiable."""
    x = T.as_tensor(x)
    if x.ndim == 1:
        x = T.Tensor(x.data[None, :])
        teacher_features = [np.atleast_2d(f) for f in teacher_features]
        teacher_target = np.atleast_2d(teacher_target)
    if len(teacher_features) != head.n_teachers:
        raise ShapeError(f"{len(teacher_features)} teacher feature sets for {head.n_teachers} teachers")
    batch = x.shape[0]
    student_feats, student_logits = student.forward(x)

    adapted = [head.student_adapt(student_feats)]
    adapted += [adapt(T.Tensor(F)) for adapt, F in zip(head.teacher_adapt, teacher_features)]
    # one pass through the shared extractor for student and teachers together
    shared = head.shared(T.concat(adapted, axis=0))
    student_shared = T.slice_rows(shared, 0, batch)
    teacher_shared = [T.slice_rows(shared, (i + 1) * batch, (i + 2) * batch) for i in range(head.n_teachers)]

    l_m = L.loss_m(student_shared, teacher_shared)
    recon = [dec(f) for dec, f in zip(head.decoders, teacher_shared)]
    l_r = L.loss_r(recon, teacher_features, squared=reconstruction_squared)
    d_kl = L.kl_soft(student_logits, teacher_target)
    return L.final_loss(d_kl, l_m, l_r, alpha)


def build_head(student: Network, teachers: Sequence[Network], adaptation_width: int, seed: int) -> AmalgamationHead:
    head = AmalgamationHead(student.feature_width, [t.feature_width for t in teachers], adaptation_width)
    return init_parameters(head, seed)


def amalgamate(
    teachers: Sequence[Network],
    memory: ReplayMemory | np.ndarray,
    student_template: Network,
    config: AmalgamationConfig | None = None,
) -> AmalgamationResult:
    """Train a copy of ``student_template`` from the teachers on the memory inputs."""
    config = (config or AmalgamationConfig()).validate()
    if not teachers:
        raise ContractError("amalgamation needs at least one teacher")
    check_disjoint(teachers)
    inputs = memory.snapshot() if isinstance(memory, ReplayMemory) else np.asarray(memory, dtype=np.float64)
    if inputs.ndim != 2 or len(inputs) == 0:
        raise ContractError("amalgamation needs a non-empty memory")
    classes = stacked_classes(teachers)
    if student_template.classes != classes:
        raise ContractError(
            f"student head serves {student_template.classes}, teachers stack to {classes}"
        )

    before = [t.checksum() for t in teachers]
    teacher_features = [t.features(inputs).data for t in teachers]
    teacher_target = stack_teacher_outputs(teachers, inputs)

    rng = np.random.default_rng(config.seed)
    student = student_template.copy()
    student.set_trainable(True)
    head = build_head(student, teachers, config.adaptation_width, int(rng.integers(2**63)))
    opt = Adam(student.parameters() + head.parameters(), lr=config.lr)

    history: list[StepRecord] = []
    n = len(inputs)
    order = np.arange(n)
    step = 0
    for epoch in range(config.epochs):
        if config.shuffle_each_epoch:
            order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            try:
                parts = cfa_loss(
                    student,
                    head,
                    inputs[idx],
                    [F[idx] for F in teacher_features],
                    teacher_target[idx],
                    config.alpha,
                    config.reconstruction_squared,
                )
                T.backward(parts.tensor)
                opt.step()
            except NonFiniteError as exc:
                raise TrainingError(str(exc), step=step) from exc
            history.append(StepRecord(step, epoch, parts.l_m, parts.l_r, parts.d_kl_soft, parts.total))
            step += 1
        if log.isEnabledFor(logging.DEBUG):
            last = history[-1]
            log.debug("epoch %d total %.6f (kl %.6f, lm %.6f, lr %.6f)", epoch, last.total, last.d_kl_soft, last.l_m, last.l_r)

    if [t.checksum() for t in teachers] != before:
        raise TrainingError("teacher parameters changed during amalgamation")
    return AmalgamationResult(student=student, history=history, head=head)


HISTORY_COLUMNS = ("step", "epoch", "l_m", "l_r", "d_kl_soft", "total")


def write_loss_history(path: str | Path, history: Sequence[StepRecord], run: str | None = None) -> None:
    """Write (or append, when ``run`` labels a block) the per-step loss log as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = (("run",) if run is not None else ()) + HISTORY_COLUMNS
    new_file = run is None or not path.exists()
    with path.open("w" if run is None else "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(columns)
        for r in history:
            row = [r.step, r.epoch] + [repr(v) for v in (r.l_m, r.l_r, r.d_kl_soft, r.total)]
            writer.writerow(([run] if run is not None else []) + row)
