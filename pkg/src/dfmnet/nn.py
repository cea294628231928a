"""Parameterized layers and the composite blocks the network is built from.

A ``Module`` owns named parameters (trainable ``Tensor``s), buffers (plain
arrays such as BN running statistics) and child modules.  Names are dotted
paths like ``tdb.h2.irb0.expand.conv.w``; the same names key the weight file.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import ops
from .errors import InvalidConfig, ShapeMismatch
from .tensor import DTYPE, Tensor, concat, mul, relu, relu6, sigmoid

ACTIVATIONS = {"relu": relu, "relu6": relu6, "sigmoid": sigmoid, "none": None}


class Module:
    training: bool = True

    def __init__(self):
        self._buffers: list[str] = []

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        setattr(self, name, np.asarray(value, DTYPE))
        self._buffers.append(name)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor | np.ndarray]]:
        """Parameters and buffers in construction order."""
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_tensors(path + ".")
            elif name in self._buffers:
                yield path, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self.named_tensors(prefix):
            if isinstance(value, Tensor):
                yield name, value

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (name, (v.data if isinstance(v, Tensor) else v).copy()) for name, v in self.named_tensors()
        )

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_tensors())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ShapeMismatch(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            target = own[name]
            arr = target.data if isinstance(target, Tensor) else target
            value = np.asarray(value, DTYPE)
            if arr.shape != value.shape:
                raise ShapeMismatch(f"{name}: expected {arr.shape}, got {value.shape}")
            arr[...] = value

    def num_elements(self) -> int:
        return sum(int(np.asarray(v.data if isinstance(v, Tensor) else v).size) for _, v in self.named_tensors())

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Sequential(Module):
    """Children are stored as attributes named by ``names`` (default 0, 1, ...)."""

    def __init__(self, modules: Sequence[Module], names: Sequence[str] | None = None):
        super().__init__()
        names = list(names) if names is not None else [str(i) for i in range(len(modules))]
        self._order = names
        for name, m in zip(names, modules):
            setattr(self, name, m)

    def __iter__(self):
        return (getattr(self, n) for n in self._order)

    def __len__(self) -> int:
        return len(self._order)

    def __getitem__(self, i: int) -> Module:
        return getattr(self, self._order[i])

    def forward(self, x):
        for m in self:
            x = m(x)
        return x


def param(array) -> Tensor:
    return Tensor(np.asarray(array, DTYPE), requires_grad=True)


# -- primitive layers --------------------------------------------------------


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=None, dilation=1, groups=1, bias=False, rng=None):
        super().__init__()
        if cin % groups or cout % groups:
            raise InvalidConfig(f"channels {cin}->{cout} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.pad = dilation * (k - 1) // 2 if pad is None else pad
        fan_in = (cin // groups) * k * k
        self.w = param(rng.normal(0.0, math.sqrt(2.0 / fan_in), (cout, cin // groups, k, k)))
        if bias:
            self.b = param(np.zeros(cout))

    def forward(self, x):
        return ops.conv2d(x, self.w, getattr(self, "b", None), self.stride, self.pad, self.dilation, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))
        self.register_buffer("running_mean", np.zeros(c))
        self.register_buffer("running_var", np.ones(c))

    def forward(self, x, activation=None):
        return ops.batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            self.training,
            self.momentum,
            self.eps,
            activation,
        )


class Linear(Module):
    def __init__(self, fin, fout, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(fin)
        self.w = param(rng.uniform(-bound, bound, (fout, fin)))
        self.b = param(rng.uniform(-bound, bound, fout))

    def forward(self, x):
        return ops.linear(x, self.w, self.b)


# -- composite blocks -----------------------------------------------------------


class BConv(Module):
    """Convolution, BatchNorm, activation (``relu`` by default)."""

    def __init__(self, cin, cout, k=1, stride=1, dilation=1, groups=1, activation="relu", rng=None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {activation!r}")
        self.activation = activation
        self.conv = Conv2d(cin, cout, k, stride=stride, dilation=dilation, groups=groups, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        if self.activation == "sigmoid":
            return sigmoid(self.bn(self.conv(x)))
        return self.bn(self.conv(x), self.activation)


def bconv(x, block: BConv):
    return block(x)


class DSConv(Module):
    """3x3 depthwise then 1x1 pointwise convolution, one BN and ReLU after."""

    def __init__(self, cin, cout, rng=None):
        super().__init__()
        self.dw = Conv2d(cin, cin, 3, groups=cin, rng=rng)
        self.pw = Conv2d(cin, cout, 1, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.pw(self.dw(x)), "relu")


def dsconv3x3(x, block: DSConv):
    return block(x)


@dataclass(frozen=True)
class IrbConfig:
    t: int
    c: int
    n: int
    s: int

    def __post_init__(self):
        if self.t < 1 or self.c < 1 or self.n < 1 or self.s not in (1, 2):
            raise InvalidConfig(f"invalid IRB config {self}")


class InvertedResidual(Module):
    """MobileNet-V2 bottleneck: expand 1x1, depthwise 3x3, linear projection 1x1."""

    def __init__(self, cin, cout, stride, t, rng=None):
        super().__init__()
        if stride not in (1, 2) or t < 1:
            raise InvalidConfig(f"stride={stride}, t={t}")
        hidden = int(round(cin * t))
        self.residual = stride == 1 and cin == cout
        if t != 1:
            self.expand = BConv(cin, hidden, 1, activation="relu6", rng=rng)
        self.dw = BConv(hidden, hidden, 3, stride=stride, groups=hidden, activation="relu6", rng=rng)
        self.project = BConv(hidden, cout, 1, activation="none", rng=rng)

    def forward(self, x):
        y = self.expand(x) if hasattr(self, "expand") else x
        y = self.project(self.dw(y))
        return x + y if self.residual else y


def irb_stage(cin: int, cfg: IrbConfig, rng=None, stride: int | None = None) -> Sequential:
    """``cfg.n`` bottlenecks; the first uses ``cfg.s`` (or ``stride`` if given)."""
    blocks = []
    for k in range(cfg.n):
        s = (cfg.s if stride is None else stride) if k == 0 else 1
        blocks.append(InvertedResidual(cin if k == 0 else cfg.c, cfg.c, s, cfg.t, rng=rng))
    return Sequential(blocks, [f"irb{k}" for k in range(cfg.n)])


def irb(x, cfg: IrbConfig, stage: Sequential):
    if len(stage) != cfg.n:
        raise InvalidConfig(f"stage has {len(stage)} blocks, config says {cfg.n}")
    return stage(x)


class ChannelAttention(Module):
    """Squeeze-excitation: per-channel sigmoid gate from a two-layer MLP on GAP."""

    def __init__(self, c, reduction=4, rng=None):
        super().__init__()
        self.fc1 = Linear(c, max(c // reduction, 1), rng=rng)
        self.fc2 = Linear(max(c // reduction, 1), c, rng=rng)

    def gate(self, x):
        n, c = x.shape[:2]
        s = ops.global_avg_pool(x).reshape(n, c)
        return sigmoid(self.fc2(relu(self.fc1(s))))

    def forward(self, x):
        n, c = x.shape[:2]
        return mul(x, self.gate(x).reshape(n, c, 1, 1))


def channel_attention(x, block: ChannelAttention):
    return block(x)


class PPM(Module):
    """Pyramid pooling: pooled branches at several bin sizes, upsampled and fused."""

    def __init__(self, cin=320, inner=80, bins=(1, 2, 3, 6), cout=320, rng=None):
        super().__init__()
        self.bins = tuple(bins)
        for b in self.bins:
            setattr(self, f"branch{b}", BConv(cin, inner, 1, rng=rng))
        self.fuse = BConv(cin + inner * len(self.bins), cout, 1, rng=rng)

    def forward(self, x):
        size = x.shape[2:]
        parts = [x]
        for b in self.bins:
            pooled = ops.adaptive_avg_pool(x, b)
            parts.append(ops.resize_bilinear(getattr(self, f"branch{b}")(pooled), size))
        return self.fuse(concat(parts, axis=1))


def ppm(x, block: PPM):
    return block(x)
