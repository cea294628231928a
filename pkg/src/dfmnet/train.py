"""Seeded training loop: Adam with poly decay, flip + crop augmentation, joint pairing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Sample, binarize, resize
from .errors import EmptyDataset, InvalidConfig, ModeMismatch
from .model import DFMNet, loss
from .tensor import DTYPE, Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1
    batch_size: int = 10
    lr: float = 1e-4
    power: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: bool = True
    crop_min: float = 0.8
    steps: int | None = None  # overrides epochs when set
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.lr <= 0:
            raise InvalidConfig("batch_size and epochs must be >= 1 and lr > 0")
        if self.steps is not None and self.steps < 1:
            raise InvalidConfig("steps must be >= 1")
        if not 0 < self.crop_min <= 1:
            raise InvalidConfig("crop_min must be in (0, 1]")


def poly_lr(base: float, t: int, total: int, power: float = 0.9) -> float:
    """``base * (1 - t/total) ** power``; zero at ``t == total``."""
    if total <= 0:
        raise InvalidConfig("total steps must be positive")
    return base * max(0.0, 1.0 - t / total) ** power


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        step = DTYPE(self.lr * math.sqrt(c2) / c1)
        eps = DTYPE(self.eps * math.sqrt(c2))
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= step * m / (np.sqrt(v) + eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def augment(s: Sample, rng: np.random.Generator, crop_min: float = 0.8) -> Sample:
    """Random horizontal flip, then a random square crop resized back to full size."""
    rgb, aux, gt = s.rgb, s.aux, s.gt
    if rng.random() < 0.5:
        rgb, aux, gt = rgb[:, :, ::-1], aux[:, :, ::-1], gt[:, :, ::-1]
    size = rgb.shape[1]
    side = int(round(size * rng.uniform(crop_min, 1.0)))
    if side < size:
        y0, x0 = rng.integers(0, size - side + 1, size=2)
        win = np.s_[:, y0 : y0 + side, x0 : x0 + side]
        rgb, aux = resize(np.ascontiguousarray(rgb[win]), size), resize(np.ascontiguousarray(aux[win]), size)
        gt = binarize(resize(np.ascontiguousarray(gt[win]), size))
    return Sample(np.ascontiguousarray(rgb), np.ascontiguousarray(aux), np.ascontiguousarray(gt), s.id)


def collate(batch: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (
        np.stack([s.rgb for s in batch]).astype(DTYPE),
        np.stack([s.aux for s in batch]).astype(DTYPE),
        np.stack([s.gt for s in batch]).astype(DTYPE),
    )


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainHistory:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)


def train(model: DFMNet, dataset: Sequence[Sample], cfg: TrainConfig = TrainConfig(), callback=None) -> TrainHistory:
    """Train ``model`` in place; returns per-step loss and learning rate."""
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    opt = Adam(model.parameters(), cfg.lr, cfg.betas, cfg.adam_eps)
    history = TrainHistory()
    model.train()
    t = 0
    while t < total:
        for idx in batch_order(len(dataset), cfg.batch_size, rng):
            if t >= total:
                break
            batch = [dataset[i] for i in idx]
            if cfg.augment:
                batch = [augment(s, rng, cfg.crop_min) for s in batch]
            rgb, aux, gt = collate(batch)
            opt.lr = poly_lr(cfg.lr, t, total, cfg.power)
            out = model(rgb, aux)
            total_loss = loss(out.s_c, out.s_d, gt)
            opt.zero_grad()
            total_loss.backward()
            opt.step()
            history.loss.append(total_loss.item())
            history.lr.append(opt.lr)
            t += 1
            if callback is not None:
                callback(t, history.loss[-1])
    model.eval()
    return history


def make_joint_pairs(images: Sequence[Sample], mode: str) -> list[Sample]:
    """Pair still images with an all-black 3-channel pseudo-flow."""
    if mode != "flow3":
        raise ModeMismatch(f"joint pairing needs mode 'flow3', got {mode!r}")
    out = []
    for s in images:
        black = np.zeros((3,) + s.rgb.shape[1:], DTYPE)
        out.append(Sample(s.rgb, black, s.gt, s.id))
    return out


def mix(real: Sequence[Sample], pseudo: Sequence[Sample], seed: int = 0) -> list[Sample]:
    """Uniformly shuffled union of real and pseudo pairs."""
    pool = list(real) + list(pseudo)
    order = np.random.default_rng(seed).permutation(len(pool))
    return [pool[i] for i in order]
