"""Orthonormal Walsh-Hadamard transform in natural (Sylvester) order.

With the ``1/sqrt(N)`` scaling per 1D pass the transform is symmetric,
orthogonal and its own inverse, so ``iwht2d`` is the same map as ``wht2d``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
import torch

__all__ = ["WhtPlan", "OpCounter", "is_power_of_two", "wht1d", "hadamard_matrix", "fwht", "wht2d", "iwht2d"]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class WhtPlan:
    size: int

    def __post_init__(self):
        if not is_power_of_two(self.size):
            raise ValueError(f"WHT size must be a power of two, got {self.size}")

    @property
    def stages(self) -> int:
        return self.size.bit_length() - 1

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.size)

    def matrix(self) -> np.ndarray:
        return hadamard_matrix(self.size) * self.scale


@dataclass
class OpCounter:
    """Tally of scalar additions and subtractions done by :func:`wht1d`."""

    adds: int = 0


def hadamard_matrix(n: int) -> np.ndarray:
    """Unnormalized Sylvester Hadamard matrix ``H_n``."""
    WhtPlan(n)
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def wht1d(x, plan: WhtPlan | None = None, counter: OpCounter | None = None) -> np.ndarray:
    """Scalar in-place butterfly on a copy of ``x``; counts every add/sub."""
    y = np.array(x, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("wht1d expects a vector")
    n = y.shape[0]
    plan = plan or WhtPlan(n)
    if plan.size != n:
        raise ValueError(f"plan size {plan.size} does not match vector length {n}")
    h = 1
    while h < n:
        for start in range(0, n, 2 * h):
            for p in range(start, start + h):
                a, b = y[p], y[p + h]
                y[p] = a + b
                y[p + h] = a - b
                if counter is not None:
                    counter.adds += 2
        h *= 2
    return y * plan.scale


def fwht(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Vectorized orthonormal WHT along one axis of a torch tensor."""
    n = x.shape[dim]
    plan = WhtPlan(n)
    y = x.movedim(dim, -1)
    lead = y.shape[:-1]
    h = 1
    while h < n:
        y = y.reshape(*lead, n // (2 * h), 2, h)
        a, b = y[..., 0, :], y[..., 1, :]
        y = torch.stack((a + b, a - b), dim=-2)
        h *= 2
    y = y.reshape(*lead, n) * plan.scale
    return y.movedim(-1, dim)


# Below this size a dense matmul beats the Python-level butterfly on CPU.
_DENSE_MAX = 128


@functools.lru_cache(maxsize=None)
def _dense(n: int, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(WhtPlan(n).matrix()).to(dtype)


def _wht2d_raw(x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    if max(h, w) > _DENSE_MAX:
        return fwht(fwht(x, -1), -2)
    return _dense(h, x.dtype) @ x @ _dense(w, x.dtype)


class _WHT2d(torch.autograd.Function):
    # The transform is symmetric and orthogonal: its adjoint is itself.
    @staticmethod
    def forward(ctx, x):
        return _wht2d_raw(x)

    @staticmethod
    def backward(ctx, grad):
        return _wht2d_raw(grad)


def wht2d(x):
    """2D WHT over the last two axes.

    Accepts a torch tensor, a numpy array, or a ``QTensor`` (each of the
    four components is transformed independently).
    """
    from .qtensor import QTensor

    if isinstance(x, QTensor):
        return QTensor(wht2d(x.data))
    if isinstance(x, np.ndarray):
        return wht2d(torch.from_numpy(x)).numpy()
    h, w = x.shape[-2:]
    if not (is_power_of_two(h) and is_power_of_two(w)):
        raise ValueError(f"spatial dims must be powers of two, got {h}x{w}")
    return _WHT2d.apply(x)


def iwht2d(x):
    """Inverse 2D WHT; identical to :func:`wht2d` under orthonormal scaling."""
    return wht2d(x)
