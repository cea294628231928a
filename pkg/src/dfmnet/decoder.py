"""Two-stage decoder: compress and group six hierarchies, then predict at full size."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import ops
from .errors import ShapeMismatch
from .nn import ChannelAttention, Conv2d, DSConv, Module
from .tensor import Tensor, add, concat, sigmoid

ENCODER_CHANNELS = (16, 24, 32, 96, 320, 320)


@dataclass
class GroupedFeatures:
    cf_low: Tensor
    cf_high: Tensor


class Decoder(Module):
    def __init__(self, in_channels: Sequence[int] = ENCODER_CHANNELS, width: int = 16, rng=None):
        super().__init__()
        self.in_channels = tuple(in_channels)
        for i, c in enumerate(self.in_channels, start=1):
            setattr(self, f"cp{i}", DSConv(c, width, rng=rng))
            setattr(self, f"ca{i}", ChannelAttention(width, 4, rng=rng))
        self.head_ds1 = DSConv(2 * width, width, rng=rng)
        self.head_ds2 = DSConv(width, width, rng=rng)
        self.head_out = Conv2d(width, 1, 3, bias=True, rng=rng)

    def compress(self, i: int, f: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.in_channels[i - 1]:
            raise ShapeMismatch(f"hierarchy {i} expects {self.in_channels[i - 1]} channels, got {f.shape}")
        return getattr(self, f"ca{i}")(getattr(self, f"cp{i}")(f))

    def prefuse(self, f_c: Sequence[Tensor], order_low=(0, 1, 2), order_high=(3, 4, 5)) -> GroupedFeatures:
        """Compress every hierarchy to 16 channels and sum into a low and a high group.

        ``order_low``/``order_high`` only change the summation order.
        """
        if len(f_c) != 6:
            raise ShapeMismatch(f"prefuse needs 6 hierarchies, got {len(f_c)}")
        cf = [self.compress(i, f) for i, f in enumerate(f_c, start=1)]
        size_low = cf[0].shape[2:]
        low = [cf[k] if k == 0 else ops.resample(cf[k], 2**k) for k in order_low]
        for k, t in zip(order_low, low):
            if t.shape[2:] != size_low:
                raise ShapeMismatch(f"hierarchy {k + 1} upsampled to {t.shape[2:]}, expected {size_low}")
        high = [cf[k] for k in order_high]
        size_high = high[0].shape[2:]
        if any(t.shape[2:] != size_high for t in high):
            raise ShapeMismatch("hierarchies 4..6 must share extents")
        cf_low = low[0]
        for t in low[1:]:
            cf_low = add(cf_low, t)
        cf_high = high[0]
        for t in high[1:]:
            cf_high = add(cf_high, t)
        return GroupedFeatures(cf_low, cf_high)

    def fullfuse(self, g: GroupedFeatures) -> Tensor:
        high_up = ops.resample(g.cf_high, 8)
        if high_up.shape[2:] != g.cf_low.shape[2:]:
            raise ShapeMismatch(f"cf_high x8 is {high_up.shape[2:]}, cf_low is {g.cf_low.shape[2:]}")
        x = concat([g.cf_low, high_up], axis=1)
        x = self.head_ds2(self.head_ds1(x))
        return ops.resample(sigmoid(self.head_out(x)), 2)

    def forward(self, f_c: Sequence[Tensor]) -> Tensor:
        return self.fullfuse(self.prefuse(f_c))


def prefuse(f_c, decoder: Decoder) -> GroupedFeatures:
    return decoder.prefuse(f_c)


def fullfuse(g: GroupedFeatures, decoder: Decoder) -> Tensor:
    return decoder.fullfuse(g)
