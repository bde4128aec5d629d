"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

__all__ = ["AdamWConfig", "AdamWState", "adamw_step", "lr_at"]


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4


@dataclass
class AdamWState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


def adamw_step(params, grads, state: AdamWState, lr: float, config: AdamWConfig | None = None) -> None:
    """One in-place AdamW update with bias correction."""
    cfg = config or AdamWConfig()
    params = list(params)
    grads = list(grads)
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    bc1 = 1 - cfg.beta1**t
    bc2 = 1 - cfg.beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if g is None:
                g = torch.zeros_like(p)
            p.mul_(1 - lr * cfg.weight_decay)
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            denom = (v / bc2).sqrt_().add_(cfg.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr_init: float = 1e-3, lr_min: float = 1e-7) -> float:
    """Linear ramp from 0 to ``lr_init``, then cosine decay to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = min(warmup_steps, total_steps)
    if step < warmup_steps:
        return lr_init * step / warmup_steps
    cosine_steps = total_steps - warmup_steps
    if step == warmup_steps:
        return lr_init
    if step == total_steps:
        return lr_min
    progress = (step - warmup_steps) / cosine_steps
    return lr_min + 0.5 * (lr_init - lr_min) * (1 + math.cos(math.pi * progress))
