"""Subtask identities, their learned representations and the distance regularizer."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear


class SubtaskEncoder:
    """Maps each one-hot subtask identity to an m-dimensional vector in (-1, 1).

    Two affine layers, each followed by tanh.
    """

    def __init__(self, rng: np.random.Generator, k: int, m: int = 64, hidden: int = 64) -> None:
        if k < 1 or m < 1:
            raise ValueError("k and m must be >= 1")
        self.k, self.m = k, m
        self.fc1 = Linear(rng, k, hidden, "encoder.fc1")
        self.fc2 = Linear(rng, hidden, m, "encoder.fc2")

    @property
    def identities(self) -> np.ndarray:
        return np.eye(self.k)

    def encode(self) -> Tensor:
        """Representations of all k subtasks, shape (k, m)."""
        return ad.tanh(self.fc2(ad.tanh(self.fc1(Tensor(self.identities)))))

    def parameters(self) -> list[Tensor]:
        return self.fc1.parameters() + self.fc2.parameters()


def encode_subtasks(encoder: SubtaskEncoder) -> Tensor:
    return encoder.encode()


def repr_regularizer(representations: Tensor) -> Tensor:
    """Negative sum of squared distances over ordered pairs i != j."""
    reps = representations if isinstance(representations, Tensor) else Tensor(representations)
    k = reps.shape[0]
    diff = reps.reshape(k, 1, -1) - reps.reshape(1, k, -1)
    # diagonal terms are exactly zero, so summing all pairs equals the i != j sum
    return -(diff * diff).sum()


def representations_csv(representations: np.ndarray) -> str:
    reps = np.asarray(representations)
    header = ",".join(f"x{j}" for j in range(reps.shape[1]))
    rows = [",".join(repr(float(v)) for v in row) for row in reps]
    return "\n".join([header, *rows]) + "\n"
