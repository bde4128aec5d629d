"""Polynomial thresholding in the transform domain.

Below the threshold the operator is an odd polynomial
``a0 x + a1 x^3 + ... + a_{N-2} x^{2N-3}``; above it, the affine shrinkage
``a_{N-1} x - a_N sgn(x) delta``. Coefficients are stored in the full
``N + 1`` form. The tied form (``a_N = a_{N-1}``) collapses the upper branch
to ``a_{N-1} (x - delta sgn(x))``.

The hard operator is used at inference and has no gradient. Training uses
the sigmoid blend of both branches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .graph import barrier, current_tape

__all__ = [
    "PUBLISHED_COEFFS",
    "PUBLISHED_DELTA",
    "PolyThreshold",
    "sgn",
    "apply_hard",
    "apply_surrogate",
    "feature_vector",
    "feature_matrix",
    "fit_mmse",
    "apply_tensor",
    "threshold_tensor",
    "identity_coeffs",
    "soft_coeffs",
    "PolyThresholdLayer",
]

# Tied form for N = 5: a0..a3 weight x, x^3, x^5, x^7; a4 is the linear gain.
PUBLISHED_COEFFS = (0.707, 0.014, 0.008, 0.999, 0.940)
PUBLISHED_DELTA = 1.0

_PINV_RCOND = 1e-12


def sgn(x: float) -> float:
    return float(int(x > 0) - int(x < 0))


def identity_coeffs(n_terms: int) -> np.ndarray:
    """``a`` that makes both branches the identity (``a0 = a_{N-1} = 1``)."""
    a = np.zeros(n_terms + 1)
    a[0] = 1.0
    a[n_terms - 1] = 1.0
    return a


def soft_coeffs(n_terms: int) -> np.ndarray:
    """``a = [0, ..., 0, 1, 1]``: classical soft shrinkage."""
    a = np.zeros(n_terms + 1)
    a[-2:] = 1.0
    return a


@dataclass
class PolyThreshold:
    delta: np.ndarray
    coeffs: np.ndarray
    steepness: float = 1.0
    mode: str = "hard"

    def __post_init__(self):
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 1 or self.coeffs.size < 3:
            raise ValueError("coeffs must be a vector of length N + 1 with N >= 2")
        if np.any(self.delta < 0):
            raise ValueError("thresholds must be nonnegative")
        if self.steepness <= 0:
            raise ValueError("steepness must be positive")
        if self.mode not in ("hard", "surrogate"):
            raise ValueError(f"mode must be 'hard' or 'surrogate', got {self.mode!r}")

    @classmethod
    def from_tied(cls, coeffs, delta, **kw) -> "PolyThreshold":
        """Build from ``N`` coefficients, setting ``a_N := a_{N-1}``."""
        c = np.asarray(coeffs, dtype=np.float64)
        return cls(delta=delta, coeffs=np.append(c, c[-1]), **kw)

    @classmethod
    def published(cls, delta=PUBLISHED_DELTA, **kw) -> "PolyThreshold":
        return cls.from_tied(PUBLISHED_COEFFS, delta, **kw)

    @property
    def n_terms(self) -> int:
        return self.coeffs.size - 1

    def delta_for(self, channel: int) -> float:
        return float(self.delta[channel])


def _poly(x: float, a: np.ndarray, n: int) -> float:
    # powers by repeated multiplication by x^2; the tensor path does the same
    x2 = x * x
    p = x
    acc = float(a[0]) * p
    for k in range(1, n - 1):
        p = p * x2
        acc = acc + float(a[k]) * p
    return acc


def _linear(x: float, a: np.ndarray, n: int, delta: float) -> float:
    return float(a[n - 1]) * x - float(a[n]) * sgn(x) * delta


def apply_hard(x: float, t: PolyThreshold, channel: int = 0) -> float:
    d = t.delta_for(channel)
    n = t.n_terms
    if abs(x) > d:
        return _linear(x, t.coeffs, n, d)
    return _poly(x, t.coeffs, n)


def apply_surrogate(x: float, t: PolyThreshold, channel: int = 0) -> float:
    d = t.delta_for(channel)
    n = t.n_terms
    z = t.steepness * (abs(x) - d)
    s = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
    return s * _linear(x, t.coeffs, n, d) + (1.0 - s) * _poly(x, t.coeffs, n)


def feature_vector(x: float, t: PolyThreshold, channel: int = 0) -> np.ndarray:
    d = t.delta_for(channel)
    n = t.n_terms
    f = np.zeros(n + 1)
    if abs(x) > d:
        f[n - 1] = x
        f[n] = -sgn(x) * d
    else:
        x2 = x * x
        p = x
        f[0] = p
        for k in range(1, n - 1):
            p = p * x2
            f[k] = p
    return f


def feature_matrix(x, n_terms: int, delta: float, tied: bool = False) -> np.ndarray:
    """Rows of ``f(x)`` for a sample vector; tied form merges the last two columns."""
    x = np.asarray(x, dtype=np.float64).ravel()
    above = np.abs(x) > delta
    f = np.zeros((x.size, n_terms + 1))
    x2 = x * x
    p = x.copy()
    f[:, 0] = np.where(above, 0.0, p)
    for k in range(1, n_terms - 1):
        p = p * x2
        f[:, k] = np.where(above, 0.0, p)
    f[:, n_terms - 1] = np.where(above, x, 0.0)
    f[:, n_terms] = np.where(above, -np.sign(x) * delta, 0.0)
    if tied:
        f = np.concatenate([f[:, : n_terms - 1], f[:, n_terms - 1 : n_terms] + f[:, n_terms:]], axis=1)
    return f


def fit_mmse(noisy_coeffs, clean_coeffs, n_terms: int, delta: float, tied: bool = False) -> np.ndarray:
    """Least-squares coefficients mapping noisy transform samples to clean ones.

    Solves the normal equations ``E[f^T f] a = E[f^T D]``. A Gram matrix
    whose smallest singular value is below ``1e-12 * sigma_max`` is
    inverted with a pseudo-inverse. The tied fit returns the full ``N + 1``
    vector with ``a_N = a_{N-1}``.
    """
    y = np.asarray(noisy_coeffs, dtype=np.float64).ravel()
    d = np.asarray(clean_coeffs, dtype=np.float64).ravel()
    if y.size != d.size:
        raise ValueError(f"sample counts differ: {y.size} noisy vs {d.size} clean")
    if n_terms < 2:
        raise ValueError("n_terms must be >= 2")
    if y.size < n_terms + 1:
        raise ValueError(f"underdetermined fit: {y.size} samples for {n_terms + 1} coefficients")
    f = feature_matrix(y, n_terms, delta, tied=tied)
    gram = f.T @ f / y.size
    rhs = f.T @ d / y.size
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] <= _PINV_RCOND * sv[0]:
        a = np.linalg.pinv(gram, rcond=_PINV_RCOND) @ rhs
    else:
        a = np.linalg.solve(gram, rhs)
    if tied:
        a = np.append(a, a[-1])
    return a


def threshold_tensor(
    x: torch.Tensor,
    delta: torch.Tensor,
    coeffs: torch.Tensor,
    mode: str = "hard",
    steepness: float = 1.0,
) -> torch.Tensor:
    """Elementwise operator on ``B×C×H×W`` with one threshold per channel."""
    if mode not in ("hard", "surrogate"):
        raise ValueError(f"mode must be 'hard' or 'surrogate', got {mode!r}")
    b, c = x.shape[:2]
    if delta.numel() != c:
        raise ValueError(f"{delta.numel()} thresholds for {c} channels")
    n = coeffs.numel() - 1
    flat = x.reshape(b, c, -1)
    d = delta.reshape(1, c, 1).to(flat.dtype)
    a = coeffs.to(flat.dtype)
    s = torch.sign(flat)

    x2 = flat * flat
    p = flat
    poly = a[0] * p
    for k in range(1, n - 1):
        p = p * x2
        poly = poly + a[k] * p
    linear = a[n - 1] * flat - a[n] * s * d

    if mode == "hard":
        out = torch.where(flat.abs() > d, linear, poly)
    else:
        gate = torch.sigmoid(steepness * (flat.abs() - d))
        out = gate * linear + (1 - gate) * poly
    return out.reshape(x.shape)


def apply_tensor(x, t: PolyThreshold):
    """Apply ``t`` in its own mode; numpy in, numpy out."""
    as_numpy = isinstance(x, np.ndarray)
    xt = torch.from_numpy(np.asarray(x, dtype=np.float64)) if as_numpy else x
    out = threshold_tensor(
        xt,
        torch.as_tensor(t.delta, dtype=xt.dtype),
        torch.as_tensor(t.coeffs, dtype=xt.dtype),
        mode=t.mode,
        steepness=t.steepness,
    )
    if t.mode == "hard":
        out = barrier(out, "poly_threshold")
    return out.numpy() if as_numpy else out


class PolyThresholdLayer(nn.Module):
    """Trainable thresholding: per-channel ``delta``, one ``a`` per layer.

    Surrogate mode while ``self.training``; hard mode (gradient barrier)
    otherwise, unless ``mode_override`` is set.
    """

    def __init__(
        self,
        channels: int,
        n_terms: int = 5,
        delta_init: float = 0.05,
        coeffs_init="identity",
        steepness: float = 1.0,
        tied: bool = False,
    ):
        super().__init__()
        self.n_terms = n_terms
        self.tied = tied
        self.steepness = steepness
        self.mode_override: str | None = None
        if isinstance(coeffs_init, str):
            init = {"identity": identity_coeffs, "soft": soft_coeffs}.get(coeffs_init)
            if coeffs_init == "published":
                if n_terms != len(PUBLISHED_COEFFS):
                    raise ValueError("published coefficients are for n_terms=5")
                a = np.append(PUBLISHED_COEFFS, PUBLISHED_COEFFS[-1])
            elif init is None:
                raise ValueError(f"unknown coefficient init {coeffs_init!r}")
            else:
                a = init(n_terms)
        else:
            a = np.asarray(coeffs_init, dtype=np.float64)
        if a.size != n_terms + 1:
            raise ValueError(f"expected {n_terms + 1} coefficients, got {a.size}")
        if tied:
            a = a[:-1]
        self.coeffs = nn.Parameter(torch.tensor(a, dtype=torch.float32))
        self.delta = nn.Parameter(torch.full((channels,), float(delta_init)))

    @property
    def mode(self) -> str:
        if self.mode_override is not None:
            return self.mode_override
        return "surrogate" if self.training else "hard"

    def full_coeffs(self) -> torch.Tensor:
        if self.tied:
            return torch.cat([self.coeffs, self.coeffs[-1:]])
        return self.coeffs

    def load_coeffs(self, a) -> None:
        a = torch.as_tensor(np.asarray(a), dtype=self.coeffs.dtype)
        with torch.no_grad():
            self.coeffs.copy_(a[: self.coeffs.numel()])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mode = self.mode
        tape = current_tape()
        if tape is not None:
            tape.record("poly_threshold", mode)
        # thresholds are magnitudes; keep them nonnegative under training
        delta = self.delta.abs()
        out = threshold_tensor(x, delta, self.full_coeffs(), mode=mode, steepness=self.steepness)
        if mode == "hard":
            out = barrier(out, "poly_threshold")
        return out

    def extra_repr(self) -> str:
        return f"channels={self.delta.numel()}, n_terms={self.n_terms}, tied={self.tied}, steepness={self.steepness}"
