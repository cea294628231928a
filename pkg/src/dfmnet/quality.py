"""Boundary-alignment depth-quality audit: Sobel edge maps and edge Dice.

A depth map is judged by how well its edges coincide with the edges of
the RGB image it is paired with.  ``audit_set`` scores a set of pairs,
optionally after a derangement of the depth assignments, which breaks
every pairing while leaving each individual image untouched.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySet, InvalidConfig, ShapeMismatch

EPS = 1e-12
BINS = 20

_SMOOTH = np.array([1.0, 2.0, 1.0])
_DIFF = np.array([-1.0, 0.0, 1.0])


def _gray(img) -> np.ndarray:
    a = np.asarray(img.data if hasattr(img, "data") else img, dtype=np.float64)
    if a.ndim == 4 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 3:
        a = a.mean(axis=0)  # C x H x W -> H x W
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a single image, got shape {a.shape}")
    return a


def _separable(a: np.ndarray, along_rows: np.ndarray, along_cols: np.ndarray) -> np.ndarray:
    """3x3 correlation with kernel outer(along_rows, along_cols), edge-replicated."""
    p = np.pad(a, 1, mode="edge")
    h, w = a.shape
    tmp = sum(along_rows[i] * p[i : i + h, :] for i in range(3))
    return sum(along_cols[j] * tmp[:, j : j + w] for j in range(3))


def edge_map(img) -> np.ndarray:
    """Sobel gradient magnitude scaled so its maximum is 1 (all zero if flat)."""
    a = _gray(img)
    gx = _separable(a, _SMOOTH, _DIFF)
    gy = _separable(a, _DIFF, _SMOOTH)
    mag = np.hypot(gx, gy)
    peak = mag.max() if mag.size else 0.0
    if peak <= 0.0:
        return np.zeros_like(mag)
    return mag / peak


def dice_alignment(e_rgb, e_depth, eps: float = EPS) -> float:
    """2*sum(a*b) / (sum(a^2) + sum(b^2) + eps); 1 for identical nonzero maps."""
    a = np.asarray(e_rgb, dtype=np.float64)
    b = np.asarray(e_depth, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"edge maps disagree: {a.shape} vs {b.shape}")
    num = 2.0 * np.sum(a * b)
    den = np.sum(a * a) + np.sum(b * b) + eps
    return float(np.clip(num / den, 0.0, 1.0))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation with no fixed point (rejection sampling)."""
    if n < 2:
        raise EmptySet("a derangement needs at least 2 items")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def histogram(values: Sequence[float], bins: int = BINS) -> np.ndarray:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return counts


@dataclass
class QualityReport:
    ids: list[str]
    c_dice: np.ndarray
    pairing: np.ndarray  # depth index assigned to each RGB image
    depth_energy: np.ndarray  # mean edge response of the assigned depth map
    alpha_bar: np.ndarray | None = None
    hist: np.ndarray = field(init=False)

    def __post_init__(self):
        self.c_dice = np.asarray(self.c_dice, dtype=np.float64)
        if len(self.ids) != self.c_dice.size:
            raise ShapeMismatch("one id per score required")
        self.hist = histogram(self.c_dice)

    @property
    def mean(self) -> float:
        return math.fsum(self.c_dice) / self.c_dice.size

    @property
    def std(self) -> float:
        m = self.mean
        return math.sqrt(math.fsum((v - m) ** 2 for v in self.c_dice) / self.c_dice.size)

    def alpha_stats(self) -> tuple[float, float, np.ndarray] | None:
        if self.alpha_bar is None:
            return None
        a = np.asarray(self.alpha_bar, dtype=np.float64)
        m = math.fsum(a) / a.size
        s = math.sqrt(math.fsum((v - m) ** 2 for v in a) / a.size)
        return m, s, histogram(a)

    def rows(self) -> list[dict]:
        out = []
        for i, sid in enumerate(self.ids):
            ab = "" if self.alpha_bar is None else f"{float(self.alpha_bar[i]):.6f}"
            out.append({"id": sid, "c_dice": f"{self.c_dice[i]:.6f}", "alpha_bar": ab})
        return out

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["id", "c_dice", "alpha_bar"])
            w.writeheader()
            w.writerows(self.rows())


def audit_set(
    pairs: Sequence[tuple],
    shuffle: bool = False,
    seed: int = 0,
    ids: Sequence[str] | None = None,
) -> QualityReport:
    """Score (rgb, depth) pairs by edge Dice, optionally with deranged depths."""
    n = len(pairs)
    if n == 0:
        raise EmptySet("no pairs to audit")
    if ids is None:
        ids = [f"{i:04d}" for i in range(n)]
    if len(ids) != n:
        raise InvalidConfig("ids and pairs differ in length")
    rgb_edges = [edge_map(p[0]) for p in pairs]
    depth_edges = [edge_map(p[1]) for p in pairs]
    pairing = derangement(n, np.random.default_rng(seed)) if shuffle else np.arange(n)
    scores = np.array([dice_alignment(rgb_edges[i], depth_edges[j]) for i, j in enumerate(pairing)])
    energy = np.array([depth_edges[j].mean() for j in pairing])
    return QualityReport(list(ids), scores, pairing, energy)
