# jointdiff/nn/optim.py
from typing import Dict, Iterable, Tuple

import numpy as np

from jointdiff.nn.autograd import Node


class Adam:
    """Adam over leaf Nodes; updates .value in place and keeps its dtype."""

    def __init__(self, params: Iterable[Node], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0.0:
            raise ValueError(f"Learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.value, dtype=np.float64) for p in self.params}
        self._v: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.value, dtype=np.float64) for p in self.params}

    def step(self) -> None:
        self.step_count += 1
        if self.lr == 0.0:
            return
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value = (p.value - update).astype(p.value.dtype)
