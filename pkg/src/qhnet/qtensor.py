"""Quaternion algebra for color images.

A color image is carried as a pure quaternion field ``0 + R i + G j + B k``.
Feature maps are stored component-major: a ``QTensor`` wraps one torch
tensor of shape ``(B, 4, C, H, W)`` whose second axis indexes ``r, i, j, k``.
Layers work on the flattened view ``(B, 4C, H, W)`` so that a quaternion
convolution is a single real convolution with a Hamilton-structured kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "Quaternion",
    "QTensor",
    "QKernel",
    "hamilton",
    "hamilton_product",
    "hamilton_weight",
    "from_rgb",
    "to_rgb",
    "qconv",
    "split_activation",
    "init_qkernel",
    "ACTIVATIONS",
]


@dataclass(frozen=True)
class Quaternion:
    r: float = 0.0
    i: float = 0.0
    j: float = 0.0
    k: float = 0.0

    def __mul__(self, other: "Quaternion") -> "Quaternion":
        return hamilton(self, other)

    def __add__(self, other: "Quaternion") -> "Quaternion":
        return Quaternion(self.r + other.r, self.i + other.i, self.j + other.j, self.k + other.k)

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.r, -self.i, -self.j, -self.k)

    def scale(self, s: float) -> "Quaternion":
        return Quaternion(s * self.r, s * self.i, s * self.j, s * self.k)

    def norm(self) -> float:
        return math.sqrt(self.r**2 + self.i**2 + self.j**2 + self.k**2)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.r, self.i, self.j, self.k)


ONE = Quaternion(1.0, 0.0, 0.0, 0.0)
I = Quaternion(0.0, 1.0, 0.0, 0.0)
J = Quaternion(0.0, 0.0, 1.0, 0.0)
K = Quaternion(0.0, 0.0, 0.0, 1.0)


def hamilton(p: Quaternion, q: Quaternion) -> Quaternion:
    """Hamilton product ``p ⊗ q``."""
    return Quaternion(
        p.r * q.r - p.i * q.i - p.j * q.j - p.k * q.k,
        p.r * q.i + p.i * q.r + p.j * q.k - p.k * q.j,
        p.r * q.j - p.i * q.k + p.j * q.r + p.k * q.i,
        p.r * q.k + p.i * q.j - p.j * q.i + p.k * q.r,
    )


def hamilton_product(p, q):
    """Batched Hamilton product over a trailing axis of length 4.

    Works for numpy arrays and torch tensors alike.
    """
    pr, pi, pj, pk = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    qr, qi, qj, qk = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    parts = (
        pr * qr - pi * qi - pj * qj - pk * qk,
        pr * qi + pi * qr + pj * qk - pk * qj,
        pr * qj - pi * qk + pj * qr + pk * qi,
        pr * qk + pi * qj - pj * qi + pk * qr,
    )
    if isinstance(p, torch.Tensor):
        return torch.stack(parts, dim=-1)
    return np.stack(parts, axis=-1)


@dataclass(frozen=True)
class QTensor:
    """Batched quaternion feature map, ``data`` shaped ``(B, 4, C, H, W)``."""

    data: torch.Tensor

    def __post_init__(self):
        if self.data.dim() != 5 or self.data.shape[1] != 4:
            raise ValueError(f"QTensor data must be (B, 4, C, H, W), got {tuple(self.data.shape)}")

    @classmethod
    def from_components(cls, r, i, j, k) -> "QTensor":
        shapes = {tuple(t.shape) for t in (r, i, j, k)}
        if len(shapes) != 1:
            raise ValueError(f"component shapes differ: {sorted(shapes)}")
        return cls(torch.stack([torch.as_tensor(t) for t in (r, i, j, k)], dim=1))

    @classmethod
    def from_flat(cls, x: torch.Tensor) -> "QTensor":
        b, c4, h, w = x.shape
        if c4 % 4:
            raise ValueError(f"flat channel count {c4} is not a multiple of 4")
        return cls(x.reshape(b, 4, c4 // 4, h, w))

    def flat(self) -> torch.Tensor:
        b, _, c, h, w = self.data.shape
        return self.data.reshape(b, 4 * c, h, w)

    @property
    def r(self) -> torch.Tensor:
        return self.data[:, 0]

    @property
    def i(self) -> torch.Tensor:
        return self.data[:, 1]

    @property
    def j(self) -> torch.Tensor:
        return self.data[:, 2]

    @property
    def k(self) -> torch.Tensor:
        return self.data[:, 3]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """Per-component shape ``(B, C, H, W)``."""
        b, _, c, h, w = self.data.shape
        return (b, c, h, w)

    def __add__(self, other: "QTensor") -> "QTensor":
        return QTensor(self.data + other.data)

    def __mul__(self, s) -> "QTensor":
        return QTensor(self.data * s)

    __rmul__ = __mul__


@dataclass(frozen=True)
class QKernel:
    """Quaternion filter bank, ``weight`` shaped ``(4, Cout, Cin, kh, kw)``."""

    weight: torch.Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.dim() != 5 or self.weight.shape[0] != 4:
            raise ValueError(f"QKernel weight must be (4, Cout, Cin, kh, kw), got {tuple(self.weight.shape)}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def from_components(cls, r, i, j, k, stride: int = 1, padding: int = 0) -> "QKernel":
        return cls(torch.stack([torch.as_tensor(t) for t in (r, i, j, k)]), stride, padding)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[2]

    @property
    def n_params(self) -> int:
        return self.weight.numel()


def hamilton_weight(weight: torch.Tensor) -> torch.Tensor:
    """Expand a ``(4, Cout, Cin, kh, kw)`` quaternion kernel to a real conv weight.

    The result has shape ``(4Cout, 4Cin, kh, kw)`` and realizes ``x ⊗ w``
    (input on the left) on component-major feature maps.
    """
    wr, wi, wj, wk = weight[0], weight[1], weight[2], weight[3]
    rows = (
        (wr, -wi, -wj, -wk),
        (wi, wr, wk, -wj),
        (wj, -wk, wr, wi),
        (wk, wj, -wi, wr),
    )
    return torch.cat([torch.cat(row, dim=1) for row in rows], dim=0)


def init_qkernel(
    out_channels: int,
    in_channels: int,
    kernel_size: int,
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    fan_in = in_channels * kernel_size * kernel_size
    fan_out = out_channels * kernel_size * kernel_size
    bound = math.sqrt(6.0 / (4 * fan_in + 4 * fan_out))
    shape = (4, out_channels, in_channels, kernel_size, kernel_size)
    u = torch.rand(shape, generator=generator, dtype=dtype)
    return (2.0 * u - 1.0) * bound


def from_rgb(image) -> QTensor:
    """Encode ``B×3×H×W`` RGB in ``[0, 1]`` as a one-channel pure quaternion map."""
    x = torch.as_tensor(image)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ValueError(f"expected a B×3×H×W image, got shape {tuple(x.shape)}")
    if x.numel() and (x.min() < 0 or x.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    zero = torch.zeros_like(x[:, :1])
    return QTensor.from_flat(torch.cat([zero, x], dim=1))


def to_rgb(q: QTensor) -> torch.Tensor:
    if q.channels != 1:
        raise ValueError(f"to_rgb needs exactly one quaternion channel, got {q.channels}")
    return torch.cat([q.i, q.j, q.k], dim=1).clamp(0.0, 1.0)


def qconv(x: QTensor, w: QKernel, bias: torch.Tensor | None = None) -> QTensor:
    """Quaternion convolution: sliding-window sum of ``x ⊗ w`` with zero padding."""
    if w.in_channels != x.channels:
        raise ValueError(f"kernel expects {w.in_channels} input channels, tensor has {x.channels}")
    _, _, h, wd = x.shape
    kh, kw = w.weight.shape[-2:]
    if h + 2 * w.padding < kh or wd + 2 * w.padding < kw:
        raise ValueError("kernel larger than padded input")
    out = F.conv2d(x.flat(), hamilton_weight(w.weight), bias, stride=w.stride, padding=w.padding)
    return QTensor.from_flat(out)


ACTIVATIONS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
}


def split_activation(x: QTensor, name: str) -> QTensor:
    try:
        fn = ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None
    return QTensor(fn(x.data))
