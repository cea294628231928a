"""Depth-quality gating: a global weight per hierarchy and a spatial attention map.

``DQW`` scores how well low-level RGB and depth activations line up and maps
the multi-scale alignment vector to five sigmoid weights.  ``DHA`` turns the
deepest depth features into a full-resolution attention map, recalibrated
with the shared low-level edge response, then resampled per hierarchy.
``fuse`` injects the gated depth features into the RGB stream.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import ops
from .errors import InvalidConfig, ShapeMismatch
from .nn import BConv, Linear, Module
from .tensor import DTYPE, Tensor, add, concat, div, mul, relu, sigmoid, square

VBA_VARIANTS = ("proposed", "dice", "add", "mul")
GATING = ("multiple", "identical")


def alignment_vector(a: Tensor, b: Tensor, variant: str = "proposed") -> Tensor:
    """Per-channel alignment of two activation maps, shape (N, C).

    ``proposed`` is GAP(a*b) / GAP(a+b); ``dice`` keeps the squares in the
    denominator and the factor 2; ``add`` and ``mul`` are the plain pooled
    sum and product.
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"alignment needs equal shapes, got {a.shape} and {b.shape}")
    n, c = a.shape[:2]

    def gap(x):
        return ops.global_avg_pool(x).reshape(n, c)

    if variant == "proposed":
        return div(gap(mul(a, b)), gap(add(a, b)))
    if variant == "dice":
        return div(mul(gap(mul(a, b)), 2.0), gap(add(square(a), square(b))))
    if variant == "add":
        return gap(add(a, b))
    if variant == "mul":
        return gap(mul(a, b))
    raise InvalidConfig(f"unknown V_BA variant {variant!r}")


@dataclass
class AlphaVector:
    alpha: Tensor  # (N, 5)

    def __getitem__(self, i: int) -> Tensor:
        """Weight of hierarchy ``i`` (1-based) as an (N,) tensor."""
        return self.alpha[:, i - 1]

    @property
    def alpha_bar(self) -> np.ndarray:
        return self.alpha.data.mean(axis=1)


@dataclass
class BetaMaps:
    beta_full: Tensor
    beta: list[Tensor]

    def __getitem__(self, i: int) -> Tensor:
        return self.beta[i - 1]


class DQW(Module):
    """Depth quality-inspired weighting: five scalar gates from low-level alignment."""

    def __init__(self, channels: int = 16, hidden: int = 24, levels: int = 5, variant: str = "proposed", rng=None):
        super().__init__()
        if variant not in VBA_VARIANTS:
            raise InvalidConfig(f"unknown V_BA variant {variant!r}")
        self.variant = variant
        self.transfer_r = BConv(channels, channels, 1, rng=rng)
        self.transfer_d = BConv(channels, channels, 1, rng=rng)
        self.fc1 = Linear(3 * channels, hidden, rng=rng)
        self.fc2 = Linear(hidden, levels, rng=rng)

    def vba_ms(self, f_r1: Tensor, f_d1: Tensor) -> Tensor:
        if f_r1.shape != f_d1.shape:
            raise ShapeMismatch(f"DQW inputs differ: {f_r1.shape} vs {f_d1.shape}")
        a, b = self.transfer_r(f_r1), self.transfer_d(f_d1)
        vecs = [alignment_vector(a, b, self.variant)]
        for _ in range(2):
            a, b = ops.max_pool2x2(a), ops.max_pool2x2(b)
            vecs.append(alignment_vector(a, b, self.variant))
        return concat(vecs, axis=1)

    def forward(self, f_r1: Tensor, f_d1: Tensor) -> AlphaVector:
        v = self.vba_ms(f_r1, f_d1)
        return AlphaVector(sigmoid(self.fc2(relu(self.fc1(v)))))


class DHA(Module):
    """Depth holistic attention with ``recalib_count`` recalibration steps."""

    def __init__(self, channels: int = 16, deep_channels: int = 320, recalib_count: int = 2, rng=None):
        super().__init__()
        if recalib_count not in (0, 1, 2, 3):
            raise InvalidConfig(f"recalib_count must be in 0..3, got {recalib_count}")
        self.recalib_count = recalib_count
        self.compress = BConv(deep_channels, channels, 1, rng=rng)
        self.transfer_r = BConv(channels, channels, 1, rng=rng)
        self.transfer_d = BConv(channels, channels, 1, rng=rng)
        for k in range(recalib_count):
            setattr(self, f"rec{k}", BConv(channels, channels, 3, dilation=2, rng=rng))
        self.head = BConv(channels, 1, 3, activation="sigmoid", rng=rng)

    def recalibrate(self, k: int, f_dht: Tensor, f_ec: Tensor) -> Tensor:
        x = ops.resample(add(f_dht, f_ec), Fraction(1, 2))
        return ops.resample(getattr(self, f"rec{k}")(x), 2)

    def forward(self, f_r1: Tensor, f_d1: Tensor, f_d5: Tensor, extents=None) -> BetaMaps:
        """``extents`` lists the (H, W) of each hierarchy; defaults to halving down to f_d5."""
        h1, w1 = f_r1.shape[2:]
        if f_d5.shape[2] * 8 != h1 or f_d5.shape[3] * 8 != w1:
            raise ShapeMismatch(f"f_d5 {f_d5.shape} is not 1/8 of f_r1 {f_r1.shape}")
        f_dht = ops.resample(self.compress(f_d5), 8)
        f_ec = mul(self.transfer_r(f_r1), self.transfer_d(f_d1))
        for k in range(self.recalib_count):
            f_dht = self.recalibrate(k, f_dht, f_ec)
        beta = self.head(add(f_ec, f_dht))
        if extents is None:
            extents = [(h1 >> min(i, 3), w1 >> min(i, 3)) for i in range(5)]
        maps = [ops.resample(beta, Fraction(h, h1)) for h, _ in extents]
        return BetaMaps(beta, maps)


def fuse(f_r: Tensor, f_d: Tensor, alpha: Tensor | None, beta: Tensor | None) -> Tensor:
    """``f_r + alpha * beta * f_d``; a ``None`` gate means that gate is fully open."""
    if f_r.shape != f_d.shape:
        raise ShapeMismatch(f"fuse: f_r {f_r.shape} vs f_d {f_d.shape}")
    n = f_r.shape[0]
    gate = None
    if alpha is not None:
        alpha = alpha if isinstance(alpha, Tensor) else Tensor(np.broadcast_to(np.asarray(alpha, DTYPE), (n,)))
        gate = alpha.reshape(n, 1, 1, 1)
    if beta is not None:
        beta = beta if isinstance(beta, Tensor) else Tensor(beta)
        if beta.ndim != 4 or beta.shape[2:] != f_d.shape[2:]:
            raise ShapeMismatch(f"fuse: beta {beta.shape} vs features {f_d.shape}")
        gate = beta if gate is None else mul(gate, beta)
    if gate is None:
        return add(f_r, f_d)
    return add(f_r, mul(gate, f_d))
