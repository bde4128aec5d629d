"""Procedural toy images, weather-like corruption, and aligned patch sampling."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .wht import is_power_of_two

__all__ = ["make_toy_corpus", "weather_corrupt", "sample_patches", "split_indices"]


def _toy_image(rng: np.random.Generator, size: int, edge_blur: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        gx, gy, off = rng.uniform(-0.5, 0.5, 3)
        img[c] = 0.5 + off * 0.4 + gx * (xx - 0.5) + gy * (yy - 0.5)
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, 3)[:, None, None]
        cx, cy = rng.uniform(0, 1, 2)
        if rng.random() < 0.5:
            rx, ry = rng.uniform(0.05, 0.3, 2)
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
        else:
            hw, hh = rng.uniform(0.05, 0.25, 2)
            mask = (np.abs(xx - cx) <= hw) & (np.abs(yy - cy) <= hh)
        alpha = gaussian_filter(mask.astype(float), edge_blur) if edge_blur > 0 else mask
        img = alpha * color + (1 - alpha) * img
    freq = rng.uniform(1, 3)
    angle = rng.uniform(0, np.pi)
    amp = rng.uniform(0.0, 0.08)
    texture = amp * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
    return np.clip(img + texture, 0.0, 1.0)


def make_toy_corpus(n_images: int, size: int, seed: int, edge_blur: float = 1.0) -> np.ndarray:
    """``n_images`` piecewise-smooth RGB images, shape ``(n, 3, size, size)``.

    Shapes get anti-aliased edges (Gaussian width ``edge_blur`` pixels) and
    the texture is a low-frequency grating.
    """
    if not is_power_of_two(size):
        raise ValueError("size must be a power of two")
    rng = np.random.default_rng(seed)
    if n_images == 0:
        return np.zeros((0, 3, size, size))
    return np.stack([_toy_image(rng, size, edge_blur) for _ in range(n_images)])


def weather_corrupt(
    images: np.ndarray,
    seed: int,
    fog: float = 0.05,
    streak_density: float = 0.5,
    streak_width: float = 1.0,
    streak_gain: float = 3.0,
) -> np.ndarray:
    """Add a thin uniform fog and bright diagonal rain streaks.

    ``streak_density`` is streaks per image row; ``fog`` is the largest
    airlight blend weight. Streaks are one-pixel lines softened by a
    Gaussian of width ``streak_width`` and scaled by ``streak_gain``.
    """
    rng = np.random.default_rng(seed)
    out = np.empty_like(images)
    n, _, h, w = images.shape
    for idx in range(n):
        trans = 1.0 - fog * rng.uniform(0.5, 1.0)
        fogged = images[idx] * trans + 0.85 * (1.0 - trans)
        streaks = np.zeros((h, w))
        slope = rng.uniform(0.2, 0.6)
        for _ in range(int(streak_density * h)):
            x0, y0 = rng.integers(0, w), rng.integers(0, h)
            length = rng.integers(max(1, h // 8), max(2, h // 3))
            t = np.arange(length)
            ys, xs = y0 + t, (x0 + slope * t).astype(int)
            keep = (ys < h) & (xs < w)
            streaks[ys[keep], xs[keep]] = rng.uniform(0.15, 0.35)
        if streak_width > 0:
            streaks = gaussian_filter(streaks, streak_width)
        out[idx] = np.clip(fogged + streak_gain * streaks, 0.0, 1.0)
    return out


def split_indices(n: int, seed: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Seeded train/validation split; at least one validation item when ``n >= 2``."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(round(n * val_fraction))) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def sample_patches(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    patch: int = 64,
    batch: int = 12,
    seed: int = 0,
    n_batches: int | None = None,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield batches of aligned ``(attacked, clean)`` crops.

    Each batch draws images uniformly with replacement and one crop origin
    per image; both members of a pair are cropped at the same place.
    ``n_batches=None`` yields forever.
    """
    if not pairs:
        raise ValueError("no pairs to sample from")
    for a, c in pairs:
        if a.shape != c.shape:
            raise ValueError("attacked and clean images differ in shape")
        if a.shape[-1] < patch or a.shape[-2] < patch:
            raise ValueError(f"image {a.shape[-2]}x{a.shape[-1]} smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    made = 0
    while n_batches is None or made < n_batches:
        xs, ys = [], []
        for idx in rng.integers(0, len(pairs), size=batch):
            a, c = pairs[idx]
            h, w = a.shape[-2:]
            top = rng.integers(0, h - patch + 1)
            left = rng.integers(0, w - patch + 1)
            xs.append(a[..., top : top + patch, left : left + patch])
            ys.append(c[..., top : top + patch, left : left + patch])
        made += 1
        yield np.stack(xs), np.stack(ys)
