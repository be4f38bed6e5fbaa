"""SGD with momentum and the step-decay learning-rate schedule."""
from __future__ import annotations

from collections import OrderedDict
from fractions import Fraction

import numpy as np

from ..exceptions import TrainingAborted


def learning_rate(epoch: int, base_lr: float = 1e-3, decay: float = 0.65, every: int = 10) -> float:
    """Exponential step decay: ``base_lr * decay ** floor(epoch / every)``.

    The product is formed exactly from the decimal values and rounded once,
    so epoch 10 gives 0.00065 rather than 0.001 * 0.65 = 0.0006500000000000001.
    """
    if epoch < 0 or every < 1:
        raise ValueError("epoch must be >= 0 and every >= 1")
    return float(Fraction(repr(float(base_lr))) * Fraction(repr(float(decay))) ** (epoch // every))


class SGD:
    def __init__(self, params: "OrderedDict[str, object]", momentum: float = 0.9,
                 base_lr: float = 1e-3, decay: float = 0.65, decay_every: int = 10):
        self.params = params
        self.momentum = momentum
        self.base_lr = base_lr
        self.decay = decay
        self.decay_every = decay_every
        self.velocity = OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items())

    def lr(self, epoch: int) -> float:
        return learning_rate(epoch, self.base_lr, self.decay, self.decay_every)

    def step(self, grads: "OrderedDict[str, np.ndarray]", epoch: int) -> float:
        """Apply one update in place and return the learning rate used."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise TrainingAborted(f"non-finite gradient in {k} at epoch {epoch}")
        lr = self.lr(epoch)
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k]
            p.data -= (lr * v).astype(p.data.dtype, copy=False)
        return lr

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((f"velocity.{k}", v) for k, v in self.velocity.items())
