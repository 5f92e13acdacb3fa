from __future__ import annotations

from typing import Mapping

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias correction over a fixed set of trainable leaves.

    Frozen leaves passed in ``params`` are ignored and never written.
    """

    def __init__(self, params: Mapping[str, Tensor], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = {k: p for k, p in params.items() if p.requires_grad}
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        unknown = sorted(set(grads) - set(self.params))
        if unknown:
            raise ContractError(f"Adam.step: gradients for non-trainable or unknown parameters {unknown}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
