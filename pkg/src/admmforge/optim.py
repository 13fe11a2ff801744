"""SGD with momentum and weight decay, plus gradient masking support."""

from __future__ import annotations

import numpy as np

from .errors import NumericError
from .tensor import Tensor


class SGD:
    """v <- mu*v + g + wd*w ; w <- w - lr*v, applied per named parameter.

    ``grad_masks`` maps parameter names to boolean arrays; True entries
    are frozen: their velocity stays zero and their value is untouched.
    """

    def __init__(self, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor],
             grad_masks: dict[str, np.ndarray] | None = None):
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name!r}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            mask = grad_masks.get(name) if grad_masks else None
            if mask is not None:
                g = np.where(mask, 0, g)
            v = self._velocity.get(name)
            if self.momentum:
                v = g if v is None else self.momentum * v + g
                if mask is not None:
                    v[mask] = 0
                self._velocity[name] = v
            else:
                v = g
            p.data -= self.lr * v

    def zero_grad(self, params: dict[str, Tensor]):
        for p in params.values():
            p.zero_grad()
