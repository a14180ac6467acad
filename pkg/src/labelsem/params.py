"""Named parameter store and the small dense building blocks shared by both models."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Params:
    """Ordered mapping of parameter name to leaf tensor.

    Names starting with ``enc.`` belong to the text encoder backbone (trained
    at the encoder learning rate); everything else is a head parameter.
    """

    def __init__(self, bound: float):
        self.bound = bound
        self._store: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self._store[name]

    def __contains__(self, name: str) -> bool:
        return name in self._store

    def __iter__(self) -> Iterator[str]:
        return iter(self._store)

    def __len__(self) -> int:
        return len(self._store)

    def items(self):
        return self._store.items()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._store:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True)
        self._store[name] = t
        return t

    def matrix(self, name: str, shape, rng: np.random.Generator) -> Tensor:
        return self.add(name, rng.uniform(-self.bound, self.bound, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self.add(name, np.ones(shape))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._store.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._store) - set(values)
        if missing:
            raise KeyError(f"snapshot lacks parameters: {sorted(missing)}")
        for k, t in self._store.items():
            if values[k].shape != t.data.shape:
                raise ValueError(f"{k}: shape {values[k].shape} != {t.data.shape}")
            t.data[...] = values[k]

    def count(self) -> int:
        return sum(t.data.size for t in self._store.values())


def init_bound(d_p: int) -> float:
    return 1.0 / math.sqrt(d_p)


def add_linear(p: Params, name: str, d_in: int, d_out: int, rng) -> None:
    p.matrix(f"{name}.w", (d_in, d_out), rng)
    p.zeros(f"{name}.b", (d_out,))


def linear(p: Params, name: str, x: Tensor) -> Tensor:
    return T.add(T.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def add_mlp(p: Params, name: str, d_in: int, d_hidden: int, d_out: int, rng) -> None:
    add_linear(p, f"{name}.0", d_in, d_hidden, rng)
    add_linear(p, f"{name}.1", d_hidden, d_out, rng)


def mlp(p: Params, name: str, x: Tensor) -> Tensor:
    """Two-layer perceptron with a ReLU hidden layer; returns raw logits."""
    return linear(p, f"{name}.1", T.relu(linear(p, f"{name}.0", x)))


def mlp_probs(p: Params, name: str, x: Tensor) -> Tensor:
    return T.softmax(mlp(p, name, x), axis=-1)
