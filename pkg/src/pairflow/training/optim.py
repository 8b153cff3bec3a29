"""Adam with decoupled weight decay, one-cycle schedule and gradient clipping."""
from __future__ import annotations

import numpy as np

from ..config import OptimConfig
from ..tensor import Tensor


def one_cycle_lr(step: int, total: int, peak: float, warmup_frac: float = 0.05,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warm-up from ``peak/div_factor`` to ``peak``, then linear decay
    to ``peak/(div_factor*final_div)`` at ``total``."""
    total = max(total, 1)
    start = peak / div_factor
    end = start / final_div
    up = max(warmup_frac * total, 1.0)
    if step <= up:
        return start + (peak - start) * step / up
    frac = min((step - up) / max(total - up, 1.0), 1.0)
    return peak + (end - peak) * frac


def clip_gradients(params: dict[str, Tensor], clip: float) -> float:
    """Clip every gradient elementwise to [-clip, clip]; return the max |g| after."""
    worst = 0.0
    for p in params.values():
        if p.grad is None:
            continue
        np.clip(p.grad, -clip, clip, out=p.grad)
        worst = max(worst, float(np.abs(p.grad).max()))
    return worst


class AdamW:
    def __init__(self, params: dict[str, Tensor], cfg: OptimConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1.0 - lr * self.cfg.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.cfg.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
