"""Training loops for the purifier and for the toy target model."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import sample_patches
from .metrics import psnr, ssim, ssim_loss
from .network import QHNet
from .optim import AdamWConfig, AdamWState, adamw_step, lr_at

__all__ = ["TrainConfig", "PRESETS", "DivergenceError", "TrainResult", "train", "evaluate", "train_restorer"]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training loss became NaN or infinite."""


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_min: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    epochs: int = 250
    warmup_epochs: int = 2
    batch: int = 12
    patch: int = 64
    patches_per_image: int = 1
    seed: int = 0

    def adamw(self) -> AdamWConfig:
        return AdamWConfig(self.beta1, self.beta2, self.adam_eps, self.weight_decay)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# toy: desk-scale analogue of the 250-epoch recipe, one CPU core
PRESETS: dict[str, dict] = {
    "toy": {"epochs": 20, "patches_per_image": 12, "lr_init": 5e-3},
    "full": {"epochs": 250},
}


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def _to_tensor(x, dtype):
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def evaluate(model: nn.Module, pairs: Sequence[tuple[np.ndarray, np.ndarray]], dtype=torch.float32) -> dict:
    """Mean PSNR/SSIM of ``model(attacked)`` against clean, in hard mode."""
    was_training = model.training
    model.eval()
    if isinstance(model, QHNet):
        assert model.pt_mode() <= {"hard"}, "evaluation must run hard thresholding"
    ps, ss = [], []
    with torch.no_grad():
        for a, c in pairs:
            pred = model(_to_tensor(a, dtype).unsqueeze(0))
            target = _to_tensor(c, dtype).unsqueeze(0)
            ps.append(psnr(pred, target))
            ss.append(float(ssim(pred.double(), target.double())))
    model.train(was_training)
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss))}


def train(
    model: nn.Module,
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    val_pairs: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    dtype: torch.dtype = torch.float32,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize ``1 - SSIM`` with AdamW under the warmup + cosine schedule.

    Training passes use surrogate thresholding, evaluation passes hard.
    Parameters are updated in place.
    """
    if not pairs:
        raise ValueError("no training pairs")
    result = TrainResult()
    if config.epochs == 0:
        return result
    steps_per_epoch = max(1, math.ceil(len(pairs) * config.patches_per_image / config.batch))
    total = steps_per_epoch * config.epochs
    warmup = steps_per_epoch * config.warmup_epochs
    params = [p for p in model.parameters() if p.requires_grad]
    state = AdamWState()
    opt_cfg = config.adamw()
    batches = sample_patches(pairs, config.patch, config.batch, seed=config.seed)
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        if isinstance(model, QHNet):
            assert model.pt_mode() <= {"surrogate"}, "training must run surrogate thresholding"
        epoch_loss = 0.0
        lr = 0.0
        for _ in range(steps_per_epoch):
            xa, xc = next(batches)
            xa, xc = _to_tensor(xa, dtype), _to_tensor(xc, dtype)
            # lr for the update that ends at step + 1, so the first update moves
            lr = lr_at(step + 1, total, warmup, config.lr_init, config.lr_min)
            for p in params:
                p.grad = None
            loss = ssim_loss(model(xa), xc)
            if not torch.isfinite(loss):
                raise DivergenceError(f"loss is {loss.item()} at epoch {epoch}, step {step}")
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, lr, opt_cfg)
            result.losses.append(loss.item())
            epoch_loss += loss.item()
            step += 1
        record = {"epoch": epoch, "loss": epoch_loss / steps_per_epoch, "lr": lr}
        if val_pairs:
            record.update(evaluate(model, val_pairs, dtype))
        result.log.append(record)
        log.info("epoch %d: %s", epoch, record)
        if on_epoch is not None:
            on_epoch(record)
    model.train()
    return result


def train_restorer(
    model: nn.Module,
    corrupted: np.ndarray,
    clean: np.ndarray,
    steps: int = 2000,
    batch: int = 8,
    patch: int = 32,
    lr: float = 3e-3,
    seed: int = 0,
) -> list[float]:
    """Fit the toy weather-removal model with an MSE loss and AdamW."""
    pairs = list(zip(corrupted, clean))
    params = list(model.parameters())
    state = AdamWState()
    losses = []
    model.train()
    for step, (x, y) in enumerate(sample_patches(pairs, patch, batch, seed=seed, n_batches=steps)):
        x, y = torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(y, dtype=torch.float32)
        for p in params:
            p.grad = None
        loss = ((model(x) - y) ** 2).mean()
        loss.backward()
        adamw_step(params, [p.grad for p in params], state, lr_at(step + 1, steps, steps // 10, lr, lr * 1e-2))
        losses.append(loss.item())
    model.eval()
    return losses
