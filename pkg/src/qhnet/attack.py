"""FGSM and I-FGSM against differentiable image-to-image models."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .graph import input_gradient

__all__ = [
    "EPS_GRID",
    "ITER_GRID",
    "AttackSpec",
    "ToyRestorer",
    "restoration_loss",
    "fgsm",
    "ifgsm",
    "attack_grid",
    "generate_pairs",
]

EPS_GRID = (2, 4, 6, 8, 10, 15)
ITER_GRID = (1, 3, 5, 7, 11)


@dataclass(frozen=True)
class AttackSpec:
    """Budget ``epsilon`` in 8-bit levels; ``alpha`` defaults to ``epsilon / (255 M)``."""

    epsilon: float
    iterations: int = 1
    alpha: float | None = None
    clip_lo: float = 0.0
    clip_hi: float = 1.0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    @property
    def radius(self) -> float:
        return self.epsilon / 255.0

    @property
    def step(self) -> float:
        return self.alpha if self.alpha is not None else self.radius / self.iterations

    def to_dict(self) -> dict:
        return {**asdict(self), "alpha": self.step}


class ToyRestorer(nn.Module):
    """Three-layer residual conv net standing in for a weather-removal model."""

    def __init__(self, width: int = 32, seed: int = 0):
        super().__init__()
        self.width = width
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, 3, 3, padding=1)
        with torch.no_grad():
            for conv in (self.conv1, self.conv2, self.conv3):
                fan_in = conv.weight[0].numel()
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * (2.0 / fan_in) ** 0.5)
                conv.bias.zero_()
            self.conv3.weight.mul_(0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return x + self.conv3(h)


def restoration_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((pred - target) ** 2).sum()


def _step(x, x_c, grad, spec: AttackSpec, alpha: float):
    # same arithmetic for both attacks, so one I-FGSM step equals FGSM bitwise
    x = x + alpha * torch.sign(grad)
    x = torch.maximum(torch.minimum(x, x_c + spec.radius), x_c - spec.radius)
    return x.clamp(spec.clip_lo, spec.clip_hi)


def fgsm(
    model: Callable,
    x_c: torch.Tensor,
    y_c: torch.Tensor,
    spec: AttackSpec,
    loss_fn: Callable = restoration_loss,
) -> torch.Tensor:
    """Single signed-gradient ascent step of size ``epsilon / 255``."""
    g = input_gradient(model, x_c, y_c, loss_fn)
    return _step(x_c.detach(), x_c.detach(), g, spec, spec.radius)


def ifgsm(
    model: Callable,
    x_c: torch.Tensor,
    y_c: torch.Tensor,
    spec: AttackSpec,
    loss_fn: Callable = restoration_loss,
) -> torch.Tensor:
    """``M`` signed-gradient steps, each clipped to ``[0, 1]`` and to the l-inf ball."""
    x_c = x_c.detach()
    x = x_c
    for _ in range(spec.iterations):
        g = input_gradient(model, x, y_c, loss_fn)
        x = _step(x, x_c, g, spec, spec.step)
    return x


def attack_grid() -> list[AttackSpec]:
    return [AttackSpec(e, m) for e, m in itertools.product(EPS_GRID, ITER_GRID)]


def generate_pairs(
    model: nn.Module,
    clean_set: torch.Tensor,
    targets: torch.Tensor,
    grid: Sequence[AttackSpec],
    seed: int,
    model_id: str = "toy_restorer",
) -> list[tuple[torch.Tensor, torch.Tensor, dict]]:
    """Attack each image with one spec drawn from ``grid``.

    Returns ``(attacked, clean, provenance)`` triples.
    """
    if len(clean_set) == 0:
        raise ValueError("clean_set is empty")
    if not grid:
        raise ValueError("attack grid is empty")
    rng = np.random.default_rng(seed)
    choice = rng.integers(0, len(grid), size=len(clean_set))
    out = []
    for n, (x, y) in enumerate(zip(clean_set, targets)):
        spec = grid[int(choice[n])]
        xb, yb = x.unsqueeze(0), y.unsqueeze(0)
        attack = fgsm if spec.iterations == 1 else ifgsm
        adv = attack(model, xb, yb, spec)[0]
        meta = {"index": n, "model": model_id, "seed": seed, "attack": "fgsm" if spec.iterations == 1 else "ifgsm",
                **spec.to_dict()}
        out.append((adv, x, meta))
    return out
