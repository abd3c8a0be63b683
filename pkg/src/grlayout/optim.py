"""Adam with bias correction and linear learning-rate warm-up.

Parameters are a name -> Tensor mapping so diagnostics can say which tensor
produced a non-finite gradient.  First and second moments live in matching
dicts; the step counter starts at 0 and the first call to ``step`` runs as
step 1 (bias correction uses the 1-based count).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class AdamConfig:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 100


class Adam:
    def __init__(self, params: dict[str, Tensor], config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def effective_lr(self, step: int) -> float:
        """Base lr scaled linearly during warm-up; constant afterwards."""
        c = self.config
        if c.warmup_steps > 0 and step <= c.warmup_steps:
            return c.lr * step / c.warmup_steps
        return c.lr

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update; missing gradients count as zero.

        Returns the effective learning rate used.  Raises on non-finite
        gradients, naming the offending parameter.
        """
        self.step_count += 1
        t = self.step_count
        c = self.config
        lr = self.effective_lr(t)
        bc1 = 1.0 - c.beta1 ** t
        bc2 = 1.0 - c.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + c.eps)).astype(p.data.dtype)
        return lr
