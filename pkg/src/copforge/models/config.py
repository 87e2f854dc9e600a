"""Shared training configuration for the iterative fitters."""

from __future__ import annotations

from dataclasses import dataclass

from ..core import ConfigInvalid


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for gradient-based fits.

    ``patience`` counts epochs without the train MSE improving by at least
    ``min_delta`` before stopping early. All randomness (initialization,
    batch shuffling) derives from ``seed``.
    """

    learning_rate: float = 0.001
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigInvalid("learning_rate must be positive")
        if self.patience < 1:
            raise ConfigInvalid("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigInvalid("batch_size and max_epochs must be >= 1")
