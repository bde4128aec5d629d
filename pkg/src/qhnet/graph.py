"""Reverse-mode differentiation helpers on top of torch autograd.

torch records the operations; this module adds what the defense needs on
top of it: a :class:`Tape` that knows whether it was built for training or
inference, gradient barriers for hard thresholding nodes, a parameter
registry, and a central-difference gradient checker.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
from torch import nn

__all__ = [
    "NonDifferentiableError",
    "Tape",
    "current_tape",
    "barrier",
    "ParamStore",
    "backward",
    "GradCheckReport",
    "grad_check",
    "grad_check_params",
    "input_gradient",
]


class NonDifferentiableError(RuntimeError):
    """Raised when a gradient is requested through a hard thresholding layer."""


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Record of one forward evaluation.

    Used as a context manager; layers append ``(name, mode)`` entries while
    it is active. Hard thresholding layers also register a barrier. Tapes
    are thread-local and never shared.
    """

    mode: str = "train"
    nodes: list[tuple[str, str]] = field(default_factory=list)
    barriers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("train", "inference"):
            raise ValueError(f"tape mode must be 'train' or 'inference', got {self.mode!r}")

    def record(self, name: str, mode: str = "") -> None:
        self.nodes.append((name, mode))
        if mode == "hard":
            self.barriers.append(name)

    def check_differentiable(self) -> None:
        if self.barriers:
            raise NonDifferentiableError(
                f"non-differentiable layer on tape: {len(self.barriers)} hard thresholding node(s)"
            )

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


class _Barrier(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, name):
        ctx.name = name
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        raise NonDifferentiableError(f"non-differentiable layer: {ctx.name} has no gradient in hard mode")


def barrier(x: torch.Tensor, name: str = "hard threshold") -> torch.Tensor:
    """Identity in the forward pass; any backward pass through it raises."""
    if torch.is_grad_enabled() and x.requires_grad:
        return _Barrier.apply(x, name)
    return x


class ParamStore:
    """Named trainable arrays, each owned by exactly one module."""

    def __init__(self, model: nn.Module):
        self.params: dict[str, nn.Parameter] = {}
        self.owners: dict[str, str] = {}
        for mod_name, mod in model.named_modules():
            for p_name, p in mod.named_parameters(recurse=False):
                full = f"{mod_name}.{p_name}" if mod_name else p_name
                self.params[full] = p
                self.owners[full] = mod_name

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = torch.zeros_like(p)

    def grads(self) -> dict[str, torch.Tensor]:
        return {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in self.params.items()}

    def numel(self) -> int:
        return sum(p.numel() for p in self.params.values())


def backward(loss: torch.Tensor, tape: Tape | None = None) -> None:
    """Seed ``loss`` and propagate gradients into every leaf.

    An inference-mode tape that recorded a hard thresholding node refuses
    up front; otherwise the barrier fires during propagation.
    """
    if loss.numel() != 1:
        raise ValueError("backward needs a scalar loss")
    if tape is not None and tape.mode == "inference":
        tape.check_differentiable()
    loss.backward()


def input_gradient(
    model: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    target: torch.Tensor,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Gradient of ``loss_fn(model(x), target)`` with respect to ``x``."""
    loss_fn = loss_fn or (lambda p, t: 0.5 * ((p - t) ** 2).sum())
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = loss_fn(model(x), target)
        (g,) = torch.autograd.grad(loss, x)
    return g


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    analytic: np.ndarray
    numeric: np.ndarray

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _compare(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> GradCheckReport:
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = float((diff / denom).max()) if diff.size else 0.0
    return GradCheckReport(rel, float(diff.max()) if diff.size else 0.0, analytic, numeric)


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-5,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``f`` at ``point`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.
    Coordinates smaller than ``floor`` are compared absolutely: with
    ``eps = 1e-5`` the central difference itself carries roundoff of about
    ``1e-16 |f| / eps``, which swamps a relative test on tiny entries.
    """
    x = point.detach().clone().to(torch.float64).requires_grad_(True)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(f(x), x)
    analytic = g.detach().numpy().ravel().copy()
    base = x.detach().clone()
    flat = base.view(-1)
    numeric = np.empty(flat.numel())
    with torch.no_grad():
        for n in range(flat.numel()):
            orig = flat[n].item()
            flat[n] = orig + eps
            fp = f(base).item()
            flat[n] = orig - eps
            fm = f(base).item()
            flat[n] = orig
            numeric[n] = (fp - fm) / (2 * eps)
    return _compare(analytic, numeric, floor)


def grad_check_params(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[torch.Tensor],
    eps: float = 1e-5,
    floor: float = 1e-5,
) -> GradCheckReport:
    """Central-difference check of ``loss_fn`` against every coordinate of ``params``."""
    params = list(params)
    for p in params:
        p.grad = None
    with torch.enable_grad():
        loss_fn().backward()
    analytic = np.concatenate(
        [(p.grad if p.grad is not None else torch.zeros_like(p)).detach().numpy().ravel() for p in params]
    )
    numeric = []
    with torch.no_grad():
        for p in params:
            flat = p.data.view(-1)
            for n in range(flat.numel()):
                orig = flat[n].item()
                flat[n] = orig + eps
                fp = loss_fn().item()
                flat[n] = orig - eps
                fm = loss_fn().item()
                flat[n] = orig
                numeric.append((fp - fm) / (2 * eps))
    return _compare(analytic, np.asarray(numeric), floor)
