"""PSNR and SSIM on images in ``[0, 1]``.

SSIM uses an 11×11 Gaussian window (sigma 1.5), ``C1 = 0.01^2`` and
``C2 = 0.03^2``, and only windows that lie fully inside the image.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

__all__ = ["PSNR_CAP", "gaussian_window", "ssim", "ssim_map", "ssim_loss", "psnr", "mse"]

PSNR_CAP = 100.0
WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2


def gaussian_window(size: int = WINDOW, sigma: float = SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _as4d(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected C×H×W or B×C×H×W, got shape {tuple(x.shape)}")
    return x


def ssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x, y = _as4d(x), _as4d(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    c = x.shape[1]
    if min(x.shape[-2:]) < WINDOW:
        raise ValueError(f"SSIM needs images at least {WINDOW}×{WINDOW}")
    w = gaussian_window(dtype=x.dtype).to(x.device).expand(c, 1, WINDOW, WINDOW)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
    den = (mu_x * mu_x + mu_y * mu_y + C1) * (sxx + syy + C2)
    return num / den


def ssim(x: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Mean SSIM; ``reduction="none"`` gives one value per image."""
    m = ssim_map(x, y)
    if reduction == "none":
        return m.mean(dim=(1, 2, 3))
    return m.mean()


def ssim_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return 1 - ssim(pred, target)


def mse(x: torch.Tensor, y: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    x, y = _as4d(x), _as4d(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    d = (x.to(torch.float64) - y.to(torch.float64)) ** 2
    return d.mean(dim=(1, 2, 3)) if reduction == "none" else d.mean()


def _psnr_value(m: float) -> float:
    if m <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / m))


def psnr(x: torch.Tensor, y: torch.Tensor, reduction: str = "mean"):
    """``10 log10(1 / MSE)`` in dB, capped at 100 dB for identical images.

    ``reduction="mean"`` is the PSNR of the pooled MSE for a single image,
    and the mean of per-image PSNRs for a batch.
    """
    per = [_psnr_value(float(m)) for m in mse(x, y, reduction="none")]
    if reduction == "none":
        return per
    return sum(per) / len(per)
