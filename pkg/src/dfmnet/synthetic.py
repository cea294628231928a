"""Procedural RGB-D scenes: flat shapes in front of a sloped background.

Object and depth share one geometry mask, so RGB and depth edges coincide.
Used for the overfit check, the alignment audit and CLI smoke tests.
"""

from __future__ import annotations

import numpy as np

from .data import Sample
from .tensor import DTYPE


def shape_mask(size: int, rng: np.random.Generator, scale: tuple[float, float] = (0.15, 0.3)) -> np.ndarray:
    """Random ellipse or axis-aligned rectangle; ``scale`` bounds its extent as a fraction of ``size``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    ry, rx = rng.uniform(*scale, size=2) * size / 2
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def _smooth_field(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    a, b = rng.uniform(-0.5, 0.5, size=2)
    return a * (yy - 0.5) + b * (xx - 0.5)


def scene(
    size: int = 256,
    rng: np.random.Generator | None = None,
    aux_channels: int = 1,
    noise: float = 0.02,
    scale: tuple[float, float] = (0.15, 0.3),
    sid: str = "",
) -> Sample:
    rng = rng if rng is not None else np.random.default_rng()
    mask = shape_mask(size, rng, scale)
    bg_color = rng.uniform(0.1, 0.5, size=3)
    fg_color = np.clip(bg_color + rng.choice([-1, 1], size=3) * rng.uniform(0.3, 0.5, size=3), 0.0, 1.0)
    shade = _smooth_field(size, rng)
    rgb = np.where(mask[None], fg_color[:, None, None], bg_color[:, None, None] + 0.3 * shade[None])
    rgb = rgb + noise * rng.standard_normal(rgb.shape)
    far = 0.3 + 0.4 * _smooth_field(size, rng)
    near = rng.uniform(0.75, 0.95)
    depth = np.where(mask, near, far)
    aux = np.repeat(depth[None], aux_channels, axis=0)
    return Sample(
        np.clip(rgb, 0, 1).astype(DTYPE),
        np.clip(aux, 0, 1).astype(DTYPE),
        mask[None].astype(DTYPE),
        sid,
    )


def scenes(count: int, size: int = 256, seed: int = 0, **kwargs) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [scene(size, rng, sid=f"syn{i:04d}", **kwargs) for i in range(count)]


def aligned_pairs(count: int, size: int = 64, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """(gray RGB, depth) HxW pairs that share one object boundary."""
    out = []
    for s in scenes(count, size, seed, scale=(0.2, 0.5)):
        out.append((s.rgb.mean(axis=0), s.aux[0]))
    return out
