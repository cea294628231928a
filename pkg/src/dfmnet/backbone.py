"""Encoder branches: the MobileNet-V2 RGB branch and the tailored depth backbone.

Both branches expose five hierarchies with channels (16, 24, 32, 96, 320) and
output stride 2 per hierarchy except the last, so a 256x256 input yields
extents (128, 64, 32, 16, 16).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import ops
from .errors import ShapeMismatch
from .nn import PPM, BConv, Conv2d, IrbConfig, Module, Sequential, irb_stage
from .tensor import Tensor, sigmoid

CHANNELS = (16, 24, 32, 96, 320)

TDB_ROWS = (
    IrbConfig(3, 16, 1, 2),
    IrbConfig(3, 24, 3, 2),
    IrbConfig(3, 32, 7, 2),
    IrbConfig(2, 96, 3, 2),
    IrbConfig(2, 320, 1, 1),
)

# MobileNet-V2 layer table up to the 320-channel layer, grouped by hierarchy.
# The 160-channel stage runs at stride 1 so hierarchy 5 keeps hierarchy 4's extents.
MOBILENET_V2_HIERARCHIES = (
    ((IrbConfig(1, 16, 1, 1), None),),
    ((IrbConfig(6, 24, 2, 2), None),),
    ((IrbConfig(6, 32, 3, 2), None),),
    ((IrbConfig(6, 64, 4, 2), None), (IrbConfig(6, 96, 3, 1), None)),
    ((IrbConfig(6, 160, 3, 2), 1), (IrbConfig(6, 320, 1, 1), None)),
)


@dataclass
class HierarchySet:
    """Five per-branch feature maps, plus the PPM output for the fused branch."""

    f: list[Tensor]
    f6: Tensor | None = None

    def __getitem__(self, i: int) -> Tensor:
        """1-based access: ``hs[1]`` .. ``hs[5]``, ``hs[6]`` for the PPM output."""
        if i == 6:
            if self.f6 is None:
                raise IndexError("no hierarchy 6 in this set")
            return self.f6
        return self.f[i - 1]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.f] + ([self.f6.shape] if self.f6 is not None else [])


@dataclass(frozen=True)
class TdbSpec:
    rows: tuple[IrbConfig, ...] = TDB_ROWS
    in_channels: int = 1

    @property
    def block_count(self) -> int:
        return sum(r.n for r in self.rows)


class _Branch(Module):
    """Five hierarchies ``h1``..``h5`` run one at a time."""

    def stage(self, i: int, x: Tensor) -> Tensor:
        return getattr(self, f"h{i}")(x)

    def forward(self, x: Tensor) -> HierarchySet:
        _check_input(x, self.in_channels)
        feats = []
        for i in range(1, 6):
            x = self.stage(i, x)
            feats.append(x)
        return HierarchySet(feats)


def _check_input(x: Tensor, channels: int) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeMismatch(f"expected N x {channels} x H x W input, got {x.shape}")
    if x.shape[2] % 16 or x.shape[3] % 16:
        raise ShapeMismatch(f"input extents must be multiples of 16, got {x.shape[2:]}")


class TailoredDepthBackbone(_Branch):
    """Fifteen inverted-residual blocks in five hierarchies (depth or flow input)."""

    def __init__(self, spec: TdbSpec = TdbSpec(), rng=None):
        super().__init__()
        self.in_channels = spec.in_channels
        cin = spec.in_channels
        for i, row in enumerate(spec.rows, start=1):
            setattr(self, f"h{i}", irb_stage(cin, row, rng=rng))
            cin = row.c


class MobileNetV2Branch(_Branch):
    """MobileNet-V2 features truncated after the 320-channel bottleneck."""

    def __init__(self, in_channels: int = 3, rng=None):
        super().__init__()
        self.in_channels = in_channels
        cin = 32
        for i, stages in enumerate(MOBILENET_V2_HIERARCHIES, start=1):
            mods, names = [], []
            if i == 1:
                mods.append(BConv(in_channels, 32, 3, stride=2, activation="relu6", rng=rng))
                names.append("stem")
            for k, (cfg, stride) in enumerate(stages):
                mods.append(irb_stage(cin, cfg, rng=rng, stride=stride))
                names.append(f"s{k}")
                cin = cfg.c
            setattr(self, f"h{i}", Sequential(mods, names))


class RGBBranch(MobileNetV2Branch):
    """MobileNet-V2 hierarchies with the pyramid pooling module on top."""

    def __init__(self, in_channels: int = 3, ppm_inner: int = 80, rng=None):
        super().__init__(in_channels, rng=rng)
        self.ppm = PPM(CHANNELS[-1], ppm_inner, (1, 2, 3, 6), CHANNELS[-1], rng=rng)


def tdb_forward(depth: Tensor, tdb: TailoredDepthBackbone) -> HierarchySet:
    return tdb(depth)


def rgb_branch_step(i: int, x_in: Tensor, branch: MobileNetV2Branch) -> Tensor:
    if i == 1:
        _check_input(x_in, branch.in_channels)
    elif x_in.shape[1] != CHANNELS[i - 2]:
        raise ShapeMismatch(f"hierarchy {i} expects {CHANNELS[i - 2]} channels, got {x_in.shape[1]}")
    return branch.stage(i, x_in)


class DepthHead(Module):
    """Coarse saliency from the deepest depth features: 1x1 conv, sigmoid, x16 upsampling."""

    def __init__(self, cin: int = CHANNELS[-1], rng=None):
        super().__init__()
        self.conv = Conv2d(cin, 1, 1, bias=True, rng=rng)

    def forward(self, f_d5: Tensor) -> Tensor:
        if f_d5.ndim != 4 or f_d5.shape[1] != self.conv.w.shape[1]:
            raise ShapeMismatch(f"depth head expects {self.conv.w.shape[1]} channels, got {f_d5.shape}")
        return ops.resample(sigmoid(self.conv(f_d5)), 16)


def depth_supervision_head(f_d5: Tensor, head: DepthHead) -> Tensor:
    return head(f_d5)
