from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from cfa import tensor as T

ROOT = Path(__file__).resolve().parents[1]


def numeric_grad(f, x: np.ndarray, index, h: float = 1e-6) -> float:
    """Central difference of scalar ``f()`` with respect to ``x[index]`` (modified in place)."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def check_op_grad(build, arrays, rng, probes: int = 6, tol: float = 1e-4) -> float:
    """Compare backward() of ``build(*tensors)`` against central differences; returns the worst error."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*leaves)
    T.backward(loss)
    worst = 0.0
    for leaf in leaves:
        for _ in range(probes):
            idx = tuple(rng.integers(s) for s in leaf.shape)
            num = numeric_grad(lambda: build(*leaves).item(), leaf.data, idx)
            err = rel_err(leaf.grad[idx], num)
            worst = max(worst, err)
            assert err < tol, f"grad mismatch at {idx}: {leaf.grad[idx]} vs {num}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
