"""Saliency-map scores: MAE, max F-measure, S-measure, max E-measure.

All functions take a prediction ``S`` in [0, 1] and a ground truth ``G``
(binarized at 0.5) of the same extents.  Threshold sweeps binarize with
``S > k / levels`` for ``k = 0 .. levels-1``; an empty binarization scores
F = 0.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import EmptySet, ShapeMismatch

LEVELS = 256
BETA2 = 0.3
EPS = np.finfo(np.float64).eps


def _prepare(s, g) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeMismatch(f"prediction {s.shape} vs ground truth {g.shape}")
    s = np.squeeze(s)
    g = np.squeeze(g) >= 0.5
    if s.ndim != 2:
        raise ShapeMismatch(f"expected a single HxW map, got {s.shape}")
    return np.clip(s, 0.0, 1.0), g


def mae(s, g) -> float:
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if s.shape != g.shape:
        raise ShapeMismatch(f"prediction {s.shape} vs ground truth {g.shape}")
    return float(np.mean(np.abs(s - g)))


def thresholds(levels: int = LEVELS) -> np.ndarray:
    return np.arange(levels, dtype=np.float64) / levels


def confusion_sweep(s: np.ndarray, g: np.ndarray, levels: int = LEVELS):
    """(tp, fp, fn, tn) per threshold, each an array of length ``levels``."""
    t = thresholds(levels)
    fg = np.sort(s[g])
    bg = np.sort(s[~g])
    # count of values strictly above t
    tp = fg.size - np.searchsorted(fg, t, side="right")
    fp = bg.size - np.searchsorted(bg, t, side="right")
    return tp, fp, fg.size - tp, bg.size - fp


def f_measure_curve(s, g, levels: int = LEVELS, beta2: float = BETA2) -> np.ndarray:
    s, g = _prepare(s, g)
    tp, fp, fn, _ = confusion_sweep(s, g, levels)
    tp = tp.astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f = (1 + beta2) * precision * recall / (beta2 * precision + recall)
    return np.where(tp > 0, f, 0.0)


def f_measure_max(s, g, levels: int = LEVELS) -> float:
    return float(np.max(f_measure_curve(s, g, levels)))


def e_measure_curve(s, g, levels: int = LEVELS) -> np.ndarray:
    """Enhanced-alignment score per threshold, clamped to [0, 1].

    A binarized map takes two values, so the alignment matrix takes at most
    four values; the score is evaluated from the confusion counts.
    """
    s, g = _prepare(s, g)
    n = g.size
    tp, fp, fn, tn = (c.astype(np.float64) for c in confusion_sweep(s, g, levels))
    mu_g = g.mean()
    if mu_g == 0.0:
        score = tn  # enhanced = 1 - FM
    elif mu_g == 1.0:
        score = tp  # enhanced = FM
    else:
        mu_f = (tp + fp) / n
        score = np.zeros(levels)
        for gv, fv, count in ((1.0, 1.0, tp), (0.0, 1.0, fp), (1.0, 0.0, fn), (0.0, 0.0, tn)):
            dg, df = gv - mu_g, fv - mu_f
            align = 2.0 * dg * df / (dg * dg + df * df + EPS)
            score += count * (align + 1.0) ** 2 / 4.0
    return np.clip(score / (n - 1 + EPS), 0.0, 1.0)


def e_measure_max(s, g, levels: int = LEVELS) -> float:
    return float(np.max(e_measure_curve(s, g, levels)))


# -- structure measure --------------------------------------------------------


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    return float(2.0 * x / (x * x + 1.0 + values.std() + EPS))


def s_object(s: np.ndarray, g: np.ndarray) -> float:
    u = g.mean()
    return u * _object_score(s[g]) + (1 - u) * _object_score(1.0 - s[~g])


def _centroid(g: np.ndarray) -> tuple[int, int]:
    rows, cols = g.shape
    total = g.sum()
    if total == 0:
        return int(np.floor(cols / 2 + 0.5)), int(np.floor(rows / 2 + 0.5))
    # 1-based centroid, rounded half away from zero
    x = (g.sum(axis=0) * np.arange(1, cols + 1)).sum() / total
    y = (g.sum(axis=1) * np.arange(1, rows + 1)).sum() / total
    return int(np.floor(x + 0.5)), int(np.floor(y + 0.5))


def _ssim(p: np.ndarray, t: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), t.mean()
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((t - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (t - y)).sum() / (n - 1 + EPS)
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return float(alpha / (beta + EPS))
    return 1.0 if beta == 0 else 0.0


def s_region(s: np.ndarray, g: np.ndarray) -> float:
    x, y = _centroid(g)
    h, w = g.shape
    gf = g.astype(np.float64)
    area = h * w
    w1 = x * y / area
    w2 = (w - x) * y / area
    w3 = x * (h - y) / area
    w4 = 1.0 - w1 - w2 - w3
    quads = (np.s_[:y, :x], np.s_[:y, x:], np.s_[y:, :x], np.s_[y:, x:])
    return sum(wk * _ssim(s[q], gf[q]) for wk, q in zip((w1, w2, w3, w4), quads))


def s_measure(s, g, alpha: float = 0.5) -> float:
    s, g = _prepare(s, g)
    y = g.mean()
    if y == 0:
        score = 1.0 - s.mean()
    elif y == 1:
        score = s.mean()
    else:
        score = alpha * s_object(s, g) + (1 - alpha) * s_region(s, g)
    return float(np.clip(score, 0.0, 1.0))


# -- aggregation ----------------------------------------------------------------


@dataclass
class EvalResult:
    s_alpha: float
    f_beta_max: float
    e_xi_max: float
    mae: float

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(s, g) -> EvalResult:
    return EvalResult(s_measure(s, g), f_measure_max(s, g), e_measure_max(s, g), mae(np.squeeze(s), np.squeeze(g)))


def aggregate(results: Iterable[EvalResult]) -> EvalResult:
    """Per-dataset score: the mean of each metric over samples."""
    rows = [(r.s_alpha, r.f_beta_max, r.e_xi_max, r.mae) for r in results]
    if not rows:
        raise EmptySet("no results to aggregate")
    # fsum is exactly rounded, so the mean does not depend on sample order
    return EvalResult(*(math.fsum(col) / len(rows) for col in zip(*rows)))
