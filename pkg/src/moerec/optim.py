"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Dict, List

import numpy as np

from .errors import TrainingError
from .tensor import Tensor


def clip_grad_norm(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale all grads in place so the global L2 norm is at most `max_norm`.

    Returns the scale that was applied (1.0 when no clipping was needed,
    including the all-zero case).
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if total <= max_norm or total == 0.0:
        return 1.0
    scale = max_norm / total
    for g in grads:
        g *= scale
    return scale


class AdamW:
    """Bias-corrected adaptive moments with decoupled weight decay.

    Update per parameter p with gradient g:
        m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
        p <- p*(1 - lr*weight_decay) - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def gradients(self) -> List[np.ndarray]:
        """Grad buffers in parameter order; missing grads count as zeros."""
        out = []
        for name, p in sorted(self.params.items()):
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out.append(p.grad)
        return out

    def step(self, clip_norm: float | None = None) -> float:
        """One update over all parameters; returns the clip scale applied."""
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient on parameter {name!r}")
        scale = 1.0
        if clip_norm is not None:
            scale = clip_grad_norm(self.gradients(), clip_norm)
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, p in sorted(self.params.items()):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update
        return scale
