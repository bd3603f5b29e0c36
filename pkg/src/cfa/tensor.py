"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.  Calling
:func:`backward` on a scalar records the reachable graph into a
:class:`Tape` (topological order) and replays it in reverse.

Broadcasting is limited on purpose: binary ops accept identical shapes or a
single-element operand.  The bias add of a dense layer goes through the fused
:func:`linear` op instead of general row broadcasting.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError, ShapeError

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor values must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: GradFn | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: GradFn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- elementwise


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _result(a.data * c, (a,), grad_fn, "scale")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), grad_fn, "relu")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _result(out, (a,), grad_fn, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log requires strictly positive inputs")

    def grad_fn(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), grad_fn, "log")


def clip_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero where the floor is active."""
    a = as_tensor(a)
    mask = a.data >= floor

    def grad_fn(g):
        return (g * mask,)

    return _result(np.where(mask, a.data, floor), (a,), grad_fn, "clip_min")


_UNARY = {"relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, exp, log, or scale (``b`` is the factor)."""
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} takes a single operand")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2):
        raise ShapeError(f"matmul expects [m,k]·[k,n], got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} and {b.shape}")

    def grad_fn(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data @ b.data
    return _result(out, (a, b), grad_fn, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape [in] or [batch, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = x.data @ weight.data
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
        parents = (x, weight, bias)

    def grad_fn(g):
        g2 = g.reshape(-1, weight.shape[1])
        x2 = x.data.reshape(-1, weight.shape[0])
        grads = [g @ weight.data.T, x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _result(out, parents, grad_fn, "linear")


# -------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), grad_fn, "sum")


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / count)


def norm(a) -> Tensor:
    """Euclidean norm over the last axis.  The gradient at a zero vector is zero."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=-1))

    def grad_fn(g):
        safe = np.where(out > 0, out, 1.0)
        direction = np.where(out[..., None] > 0, a.data / safe[..., None], 0.0)
        return (direction * np.expand_dims(g, -1),)

    return _result(out, (a,), grad_fn, "norm")


# ----------------------------------------------------------------- softmax


def softmax(a) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), grad_fn, "softmax")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] == 0:
        raise ShapeError("log_softmax needs a non-empty last axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), grad_fn, "log_softmax")


# ------------------------------------------------------------------ layout


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return np.split(g, bounds, axis=axis)

    return _result(out, tensors, grad_fn, "concat")


def slice_rows(a, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[0]:
        raise ShapeError(f"slice_rows[{start}:{stop}] invalid for shape {a.shape}")

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _result(a.data[start:stop].copy(), (a,), grad_fn, "slice_rows")


# ---------------------------------------------------------------- backward


class Tape:
    """Differentiable nodes reachable from a root, in topological order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion depth would scale with graph depth
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.record(loss)
    if not loss.requires_grad:
        return tape
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient reached a parameter")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return tape


def gradients(params: Iterable[Tensor]) -> list[np.ndarray]:
    """Current gradients, with zeros for parameters the loss never reached."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
