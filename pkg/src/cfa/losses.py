"""Loss terms of the amalgamation objective, plus supervised/KD utilities.

Every function takes a single vector ``[width]`` or a batch ``[batch, width]``
and returns a scalar :class:`~cfa.tensor.Tensor`; batched inputs are averaged
over rows.  Logarithms are natural and clamp their argument at ``LOG_FLOOR``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError, ShapeError
from .tensor import Tensor

LOG_FLOOR = 1e-12
_NORM_TOL = 1e-9


def _row_mean(per_row: Tensor) -> Tensor:
    return per_row if per_row.ndim == 0 else T.mean(per_row)


def _check_probability(p: Tensor, what: str) -> None:
    if (p.data < 0).any():
        raise DomainError(f"{what} has negative entries")
    if (np.abs(p.data.sum(axis=-1) - 1.0) > _NORM_TOL).any():
        raise DomainError(f"{what} does not sum to 1")


def _safe_log(p: Tensor) -> Tensor:
    return T.log(T.clip_min(p, LOG_FLOOR))


def entropy(p) -> Tensor:
    """-sum p log p, with 0 log 0 = 0."""
    p = T.as_tensor(p)
    _check_probability(p, "entropy input")
    return T.scale(_row_mean(T.sum(T.mul(p, _safe_log(p)), axis=-1)), -1.0)


def cross_entropy(p, q) -> Tensor:
    """-sum p log q."""
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"cross_entropy operands differ: {p.shape} vs {q.shape}")
    return T.scale(_row_mean(T.sum(T.mul(p, _safe_log(q)), axis=-1)), -1.0)


def _kl_of_probabilities(p: Tensor, q: Tensor) -> Tensor:
    return T.sub(cross_entropy(p, q), entropy(p))


def kl_features(student_shared, teacher_shared) -> Tensor:
    """KL(softmax(student) || softmax(teacher)) between shared-space vectors."""
    s, t = T.as_tensor(student_shared), T.as_tensor(teacher_shared)
    if s.shape != t.shape:
        raise ShapeError(f"kl_features widths differ: {s.shape} vs {t.shape}")
    return _kl_of_probabilities(T.softmax(s), T.softmax(t))


def loss_m(student_shared, teachers_shared: Sequence) -> Tensor:
    """Sum of the student-vs-teacher feature KLs over all teachers."""
    if len(teachers_shared) == 0:
        raise ContractError("loss_m needs at least one teacher")
    total = kl_features(student_shared, teachers_shared[0])
    for t in teachers_shared[1:]:
        total = T.add(total, kl_features(student_shared, t))
    return total


def loss_r(reconstructed: Sequence, original: Sequence, squared: bool = False) -> Tensor:
    """Sum over teachers of ||reconstruction - original||_2 (squared if asked)."""
    if len(reconstructed) != len(original):
        raise ShapeError(f"{len(reconstructed)} reconstructions for {len(original)} teachers")
    if not reconstructed:
        raise ContractError("loss_r needs at least one teacher")
    total = None
    for rec, orig in zip(reconstructed, original):
        rec, orig = T.as_tensor(rec), T.as_tensor(orig)
        if rec.shape != orig.shape:
            raise ShapeError(f"reconstruction {rec.shape} vs original {orig.shape}")
        diff = T.sub(rec, orig)
        if squared:
            term = _row_mean(T.sum(T.mul(diff, diff), axis=-1))
        else:
            term = _row_mean(T.norm(diff))
        total = term if total is None else T.add(total, term)
    return total


def stacked_target(teacher_logits: Sequence) -> Tensor:
    """Concatenate per-teacher logits in task order and softmax the result."""
    if not teacher_logits:
        raise ContractError("no teacher logits to stack")
    return T.softmax(T.concat([T.as_tensor(z) for z in teacher_logits], axis=-1))


def kl_soft(student_logits, teacher_target) -> Tensor:
    """KL(softmax(student logits) || stacked teacher distribution)."""
    z, y = T.as_tensor(student_logits), T.as_tensor(teacher_target)
    if z.shape != y.shape:
        raise ShapeError(f"student has {z.shape[-1]} classes, teacher target {y.shape[-1]}")
    _check_probability(y, "teacher target")
    return _kl_of_probabilities(T.softmax(z), y)


@dataclass
class LossBreakdown:
    l_m: float
    l_r: float
    d_kl_soft: float
    total: float
    alpha: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def final_loss(d_kl_soft, l_m, l_r, alpha: float) -> LossBreakdown:
    """alpha * d_kl_soft + (1 - alpha) * (l_m + l_r).

    The differentiable total is kept on ``.tensor``; the float fields are
    exactly the values that entered it.
    """
    alpha = _check_alpha(alpha)
    kl, lm, lr = T.as_tensor(d_kl_soft), T.as_tensor(l_m), T.as_tensor(l_r)
    total = T.add(T.scale(kl, alpha), T.scale(T.add(lm, lr), 1.0 - alpha))
    return LossBreakdown(
        l_m=lm.item(), l_r=lr.item(), d_kl_soft=kl.item(), total=total.item(), alpha=alpha, tensor=total
    )


def kd_loss(student_logits, teacher_logits) -> Tensor:
    """Squared L2 distance between logit vectors."""
    a, b = T.as_tensor(student_logits), T.as_tensor(teacher_logits)
    if a.shape != b.shape:
        raise ShapeError(f"kd_loss widths differ: {a.shape} vs {b.shape}")
    diff = T.sub(a, b)
    return _row_mean(T.sum(T.mul(diff, diff), axis=-1))


def softmax_cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` (column indices)."""
    z = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(z.shape)
    if z.ndim == 1:
        onehot[targets] = 1.0
    else:
        onehot[np.arange(z.shape[0]), targets] = 1.0
    return T.scale(_row_mean(T.sum(T.mul(T.log_softmax(z), onehot), axis=-1)), -1.0)
