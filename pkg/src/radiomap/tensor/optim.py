from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update, applied in place to ``params``.

    A parameter whose gradient holds NaN/Inf is left untouched for this
    step and ``state.skipped`` is incremented.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad for {name!r} has shape {g.shape}, param has {p.shape}")
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient for %s; step skipped", name)
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        t = state.step.get(name, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state.m[name] = m.astype(p.dtype)
        state.v[name] = v.astype(p.dtype)
        state.step[name] = t
    return state


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: dict[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.betas[0], self.betas[1], self.eps)
