"""AdamW with decoupled weight decay, in functional and stateful forms."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamWState:
    """Per-parameter first/second moment accumulators plus the step counter."""
    step: int
    m1: list[np.ndarray]
    m2: list[np.ndarray]
    hyper: AdamWHyper = field(default_factory=AdamWHyper)

    @classmethod
    def init(cls, params: list[np.ndarray], hyper: AdamWHyper | None = None) -> "AdamWState":
        return cls(step=0,
                   m1=[np.zeros_like(p) for p in params],
                   m2=[np.zeros_like(p) for p in params],
                   hyper=hyper or AdamWHyper())


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray],
               state: AdamWState) -> tuple[list[np.ndarray], AdamWState]:
    """One AdamW update: bias-corrected moments, decay decoupled from the gradient.

    Returns fresh parameter arrays; `state` is advanced in place (single owner).
    """
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient at parameter {i}; step rejected")
    h = state.hyper
    state.step += 1
    t = state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m1[i] = h.beta1 * state.m1[i] + (1.0 - h.beta1) * g
        state.m2[i] = h.beta2 * state.m2[i] + (1.0 - h.beta2) * g * g
        m1hat = state.m1[i] / (1.0 - h.beta1 ** t)
        m2hat = state.m2[i] / (1.0 - h.beta2 ** t)
        p_new = p - h.lr * m1hat / (np.sqrt(m2hat) + h.eps)
        if h.weight_decay != 0.0:
            p_new = p_new - h.lr * h.weight_decay * p
        out.append(p_new)
    return out, state


class AdamW:
    """Stateful wrapper around `adamw_step` for Tensor parameter lists."""

    def __init__(self, params: list[Tensor], **hyper):
        self.params = params
        self.state = AdamWState.init([p.data for p in params], AdamWHyper(**hyper))

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                grads.append(np.zeros_like(p.data))
            else:
                grads.append(p.grad)
        new, _ = adamw_step([p.data for p in self.params], grads, self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
