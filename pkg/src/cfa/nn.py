"""Layers and networks used by teachers, students and the amalgamation head.

All modules operate on feature vectors ``[width]`` or batches ``[batch, width]``.
"""

from __future__ import annotations

import copy
import hashlib
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data[...] = state[name]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self):
        return copy.deepcopy(self)


def _check_width(x: Tensor, width: int, what: str) -> None:
    if x.ndim not in (1, 2) or x.shape[-1] != width:
        raise ShapeError(f"{what} expects width {width}, got shape {x.shape}")


class DenseLayer(Module):
    def __init__(self, d_in: int, d_out: int, activation: str = "relu", bias: bool = True):
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        self.weight = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.activation = activation

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        _check_width(x, self.d_in, "DenseLayer")
        out = T.linear(x, self.weight, self.bias)
        return T.relu(out) if self.activation == "relu" else out


class AdaptationLayer(Module):
    """Bias-free projection from any feature width onto a fixed width.

    On a flat feature vector a 1x1 convolution is exactly this map.
    """

    def __init__(self, d_in: int, d_out: int):
        self.weight = Tensor(np.zeros((d_in, d_out)), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        _check_width(x, self.weight.shape[0], "AdaptationLayer")
        return T.linear(x, self.weight)


class ResidualBlock(Module):
    """``x + fc2(relu(fc1(x)))``; width preserving."""

    def __init__(self, width: int):
        self.fc1 = DenseLayer(width, width, "relu")
        self.fc2 = DenseLayer(width, width, "none")

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        return T.add(x, self.fc2(self.fc1(x)))


class SharedExtractor(Module):
    """Residual blocks at the adaptation width, then a linear map to half that width."""

    def __init__(self, width: int, n_blocks: int = 3):
        if width % 2:
            raise ShapeError(f"shared extractor width must be even, got {width}")
        self.width = width
        self.blocks = [ResidualBlock(width) for _ in range(n_blocks)]
        self.reduce = DenseLayer(width, width // 2, "none")

    @property
    def out_width(self) -> int:
        return self.width // 2

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        _check_width(x, self.width, "SharedExtractor")
        for block in self.blocks:
            x = block(x)
        return self.reduce(x)


class TeacherDecoder(Module):
    """Maps a shared-space vector back to one teacher's feature width."""

    def __init__(self, shared_width: int, feature_width: int):
        self.fc = DenseLayer(shared_width, feature_width, "none")

    def __call__(self, x) -> Tensor:
        return self.fc(x)


class Network(Module):
    """Dense feature extractor followed by a two-layer classifier head.

    ``classes`` holds the global class id served by each output unit.
    """

    def __init__(
        self,
        input_dim: int,
        classes: Sequence[int],
        hidden_width: int = 100,
        feature_width: int = 64,
        head_width: int = 32,
    ):
        self.classes = [int(c) for c in classes]
        if not self.classes:
            raise ShapeError("a network needs at least one output class")
        self.input_dim = input_dim
        self.extractor = [
            DenseLayer(input_dim, hidden_width, "relu"),
            DenseLayer(hidden_width, feature_width, "relu"),
        ]
        self.head = [
            DenseLayer(feature_width, head_width, "relu"),
            DenseLayer(head_width, len(self.classes), "none"),
        ]

    @property
    def feature_width(self) -> int:
        return self.extractor[-1].d_out

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def arch(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "classes": list(self.classes),
            "hidden_width": self.extractor[0].d_out,
            "feature_width": self.feature_width,
            "head_width": self.head[0].d_out,
        }

    def features(self, x) -> Tensor:
        x = T.as_tensor(x)
        _check_width(x, self.input_dim, "Network")
        for layer in self.extractor:
            x = layer(x)
        return x

    def forward(self, x) -> tuple[Tensor, Tensor]:
        feats = self.features(x)
        z = feats
        for layer in self.head:
            z = layer(z)
        return feats, z

    __call__ = forward

    def logits(self, x) -> np.ndarray:
        return self.forward(x)[1].data

    def predict(self, x) -> np.ndarray:
        """Global class ids by argmax over the single head."""
        z = self.logits(np.asarray(x, dtype=np.float64))
        return np.asarray(self.classes)[np.argmax(z, axis=-1)]

    def expand_head(self, new_classes: Sequence[int], seed: int) -> None:
        """Append output units for ``new_classes``; existing units keep their weights."""
        new_classes = [int(c) for c in new_classes]
        if not new_classes:
            return
        if set(new_classes) & set(self.classes):
            raise ShapeError("expanded classes overlap the existing head")
        old = self.head[-1]
        fresh = DenseLayer(old.d_in, old.d_out + len(new_classes), "none")
        init_parameters(fresh, seed)
        fresh.weight.data[:, : old.d_out] = old.weight.data
        fresh.bias.data[: old.d_out] = old.bias.data
        self.head[-1] = fresh
        self.classes = self.classes + new_classes


def network_from_arch(arch: dict) -> Network:
    return Network(
        arch["input_dim"],
        arch["classes"],
        hidden_width=arch["hidden_width"],
        feature_width=arch["feature_width"],
        head_width=arch["head_width"],
    )


def init_parameters(module: Module, seed: int) -> Module:
    """Glorot-uniform weights, zero biases; fully determined by ``seed``."""
    rng = np.random.default_rng(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    for name, p in module.named_parameters():
        if p.ndim == 2:
            fan_in, fan_out = p.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            p.data[...] = rng.uniform(-limit, limit, size=p.shape)
        else:
            p.data[...] = 0.0
    return module


def encode_to_shared(features, adapt: AdaptationLayer, shared: SharedExtractor) -> Tensor:
    """Original features -> adapted features -> shared-space vector."""
    return shared(adapt(features))


def decode_from_shared(shared_vec, decoder: TeacherDecoder) -> Tensor:
    shared_vec = T.as_tensor(shared_vec)
    _check_width(shared_vec, decoder.fc.d_in, "TeacherDecoder")
    return decoder(shared_vec)
