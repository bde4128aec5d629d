"""Report figures rendered to PNG files with the Agg backend."""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .polythresh import PUBLISHED_COEFFS, PUBLISHED_DELTA, PolyThreshold, apply_tensor  # noqa: E402

__all__ = ["plot_threshold", "plot_training", "plot_metrics"]

# fixed metadata keeps the PNG bytes identical across runs
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_threshold(coeffs: Sequence[float], delta: float, path, compare_published: bool = True) -> None:
    """Fitted thresholding curve, optionally next to the published one."""
    x = np.linspace(-3 * max(delta, 0.1), 3 * max(delta, 0.1), 601)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, x, color="0.7", lw=1, ls="--", label="identity")
    fitted = apply_tensor(x.reshape(1, 1, 1, -1), PolyThreshold(delta, coeffs)).ravel()
    ax.plot(x, fitted, lw=2, label=f"fitted (delta={delta:g})")
    if compare_published:
        ref = apply_tensor(x.reshape(1, 1, 1, -1), PolyThreshold.published(delta=delta)).ravel()
        ax.plot(x, ref, lw=1, label=f"a={list(PUBLISHED_COEFFS)}, tied")
    for s in (-delta, delta):
        ax.axvline(s, color="0.85", lw=0.8)
    ax.set_xlabel("transform coefficient")
    ax.set_ylabel("T(x)")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_training(log: Sequence[dict], path) -> None:
    """Loss, validation PSNR and learning rate per epoch."""
    epochs = [r["epoch"] for r in log]
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    axes[0].plot(epochs, [r["loss"] for r in log], marker="o", ms=3)
    axes[0].set_ylabel("1 - SSIM")
    if log and "psnr" in log[0]:
        axes[1].plot(epochs, [r["psnr"] for r in log], marker="o", ms=3)
    axes[1].set_ylabel("val PSNR (dB)")
    axes[2].plot(epochs, [r["lr"] for r in log])
    axes[2].set_ylabel("lr")
    axes[2].set_yscale("log")
    for ax in axes:
        ax.set_xlabel("epoch")
    _save(fig, path)


def plot_metrics(rows: dict[str, dict[str, float]], path, metric: str = "psnr") -> None:
    """Grouped bars of one metric per image; ``rows`` maps series -> {image: value}."""
    series = list(rows)
    names = sorted({n for r in rows.values() for n in r})
    width = 0.8 / max(1, len(series))
    fig, ax = plt.subplots(figsize=(max(5, 0.5 * len(names) + 2), 3.5))
    idx = np.arange(len(names))
    for s, label in enumerate(series):
        ax.bar(idx + s * width, [rows[label].get(n, np.nan) for n in names], width, label=label)
    ax.set_xticks(idx + width * (len(series) - 1) / 2)
    ax.set_xticklabels(names, rotation=60, fontsize=7, ha="right")
    ax.set_ylabel(metric.upper())
    ax.legend(fontsize=8)
    _save(fig, path)
