"""Adam, as a pure step function plus a small stateful wrapper."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, gradients

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
DEFAULT_LR = 1e-4


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = DEFAULT_LR,
    beta1: float = BETA1,
    beta2: float = BETA2,
    eps: float = EPS,
) -> AdamState:
    """Update ``params`` in place with bias-corrected Adam and return the new state."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, state {m.shape} disagree")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return AdamState(t, state.m, state.v)


class Adam:
    """Adam over a fixed list of tensors; reads ``.grad`` and clears it after each step."""

    def __init__(self, params: Sequence[Tensor], lr: float = DEFAULT_LR):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = gradients(self.params)
        self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr)
        self.zero_grad()
