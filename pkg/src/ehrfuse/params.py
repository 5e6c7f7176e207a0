"""Flat store of named float64 parameter arrays with matching gradient slots."""

from __future__ import annotations

import numpy as np


class ParameterStore:
    """Insertion-ordered mapping name -> array, each with a gradient buffer.

    Non-trainable entries (e.g. batch-norm running statistics) are saved in
    checkpoints but skipped by optimizers and gradient checks. A single writer
    mutates values/grads during a training step; readers may share snapshots.
    """

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"parameter {name!r} already registered")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._trainable[name] = trainable
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def names(self, trainable_only: bool = False) -> list[str]:
        if trainable_only:
            return [n for n in self._values if self._trainable[n]]
        return list(self._values)

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def n_parameters(self, trainable_only: bool = True) -> int:
        return sum(
            v.size
            for n, v in self._values.items()
            if self._trainable[n] or not trainable_only
        )

    def grad_norms(self) -> dict[str, float]:
        return {n: float(np.linalg.norm(g)) for n, g in self._grads.items()}

    def value_norms(self) -> dict[str, float]:
        return {n: float(np.linalg.norm(v)) for n, v in self._values.items()}

    def copy_grads(self) -> dict[str, np.ndarray]:
        return {n: g.copy() for n, g in self._grads.items()}


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    limit = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-limit, limit, size=shape)
