"""Full network graph: encoder with depth gating, decoder, depth supervision, loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import ops
from .backbone import (
    CHANNELS,
    DepthHead,
    HierarchySet,
    MobileNetV2Branch,
    RGBBranch,
    TailoredDepthBackbone,
    TdbSpec,
)
from .decoder import Decoder
from .dqfm import DHA, DQW, GATING, VBA_VARIANTS, AlphaVector, BetaMaps, fuse
from .errors import InvalidConfig, ModeMismatch, ShapeMismatch
from .nn import Module
from .tensor import DTYPE, Tensor, add

MODES = {"rgbd": 1, "flow3": 3}
SUBTREES = ("rgb_branch", "tdb", "dqw", "dha", "decoder", "heads")


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "rgbd"
    use_dqw: bool = True
    use_dha: bool = True
    vba_variant: str = "proposed"
    recalib_count: int = 2
    gating: str = "multiple"
    depth_backbone: str = "tdb"
    ppm_inner: int = 80

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidConfig(f"mode must be one of {sorted(MODES)}, got {self.mode!r}")
        if self.vba_variant not in VBA_VARIANTS:
            raise InvalidConfig(f"vba_variant must be one of {VBA_VARIANTS}")
        if self.recalib_count not in (0, 1, 2, 3):
            raise InvalidConfig("recalib_count must be in 0..3")
        if self.gating not in GATING:
            raise InvalidConfig(f"gating must be one of {GATING}")
        if self.depth_backbone not in ("tdb", "mobilenetv2"):
            raise InvalidConfig("depth_backbone must be 'tdb' or 'mobilenetv2'")

    @property
    def aux_channels(self) -> int:
        return MODES[self.mode]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    s_c: Tensor
    s_d: Tensor
    alpha: AlphaVector | None
    beta: BetaMaps | None
    fused: HierarchySet
    depth: HierarchySet

    @property
    def alpha_bar(self) -> np.ndarray | None:
        return None if self.alpha is None else self.alpha.alpha_bar


class DFMNet(Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        aux = config.aux_channels
        self.rgb_branch = RGBBranch(3, config.ppm_inner, rng=rng)
        if config.depth_backbone == "tdb":
            self.tdb = TailoredDepthBackbone(TdbSpec(in_channels=aux), rng=rng)
        else:
            self.tdb = MobileNetV2Branch(aux, rng=rng)
        if config.use_dqw:
            self.dqw = DQW(CHANNELS[0], 24, 5, config.vba_variant, rng=rng)
        if config.use_dha:
            self.dha = DHA(CHANNELS[0], CHANNELS[-1], config.recalib_count, rng=rng)
        self.decoder = Decoder(rng=rng)
        self.heads = DepthHead(CHANNELS[-1], rng=rng)

    def subtrees(self) -> dict[str, Module]:
        return {name: getattr(self, name) for name in SUBTREES if hasattr(self, name)}

    def _check(self, rgb: Tensor, aux: Tensor) -> None:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise ShapeMismatch(f"rgb must be N x 3 x H x W, got {rgb.shape}")
        if aux.ndim != 4 or aux.shape[1] != self.config.aux_channels:
            raise ModeMismatch(
                f"mode {self.config.mode!r} expects {self.config.aux_channels}-channel aux input, got {aux.shape}"
            )
        if aux.shape[0] != rgb.shape[0] or aux.shape[2:] != rgb.shape[2:]:
            raise ShapeMismatch(f"rgb {rgb.shape} and aux {aux.shape} disagree")

    def forward(self, rgb, aux) -> ForwardOutput:
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        aux = aux if isinstance(aux, Tensor) else Tensor(aux)
        self._check(rgb, aux)
        cfg = self.config
        depth = self.tdb(aux)
        f_r = self.rgb_branch.stage(1, rgb)
        alpha = self.dqw(f_r, depth[1]) if cfg.use_dqw else None
        beta = None
        if cfg.use_dha:
            beta = self.dha(f_r, depth[1], depth[5], extents=[f.shape[2:] for f in depth.f])
        fused = []
        for i in range(1, 6):
            k = 1 if cfg.gating == "identical" else i
            a_i = alpha[k] if alpha is not None else None
            b_i = None
            if beta is not None:
                b_i = beta[i] if k == i else ops.resize_bilinear(beta[k], depth[i].shape[2:])
            f_c = fuse(f_r, depth[i], a_i, b_i)
            fused.append(f_c)
            if i < 5:
                f_r = self.rgb_branch.stage(i + 1, f_c)
        f6 = self.rgb_branch.ppm(fused[-1])
        s_c = self.decoder(fused + [f6])
        s_d = self.heads(depth[5])
        return ForwardOutput(s_c, s_d, alpha, beta, HierarchySet(fused, f6), depth)


def loss(s_c: Tensor, s_d: Tensor, gt) -> Tensor:
    """Cross-entropy on the final map plus deep supervision on the depth map."""
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, DTYPE)
    if s_c.shape != g.shape or s_d.shape != g.shape:
        raise ShapeMismatch(f"loss maps disagree: {s_c.shape}, {s_d.shape}, gt {g.shape}")
    return add(ops.binary_cross_entropy(s_c, g), ops.binary_cross_entropy(s_d, g))


def config_from_state(state: dict[str, np.ndarray], **overrides) -> ModelConfig:
    """Recover the structural configuration implied by a set of named tensors."""
    first = next((k for k in state if k.startswith("tdb.h1.")), None)
    if first is None:
        raise ShapeMismatch("weights contain no depth-branch tensors")
    backbone = "mobilenetv2" if any(k.startswith("tdb.h1.stem.") for k in state) else "tdb"
    in_key = "tdb.h1.stem.conv.w" if backbone == "mobilenetv2" else "tdb.h1.irb0.expand.conv.w"
    in_ch = state[in_key].shape[1]
    mode = {v: k for k, v in MODES.items()}.get(in_ch)
    if mode is None:
        raise ModeMismatch(f"depth branch takes {in_ch} channels; no mode matches")
    use_dha = any(k.startswith("dha.") for k in state)
    # without DHA the count has no tensors to read; keep the default
    recalib = sum(1 for k in state if k.startswith("dha.rec") and k.endswith(".conv.w")) if use_dha else ModelConfig.recalib_count
    ppm_inner = state["rgb_branch.ppm.branch1.conv.w"].shape[0] if "rgb_branch.ppm.branch1.conv.w" in state else 80
    fields = dict(
        mode=mode,
        use_dqw=any(k.startswith("dqw.") for k in state),
        use_dha=use_dha,
        recalib_count=recalib,
        depth_backbone=backbone,
        ppm_inner=ppm_inner,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


def from_state(state: dict[str, np.ndarray], **overrides) -> DFMNet:
    model = DFMNet(config_from_state(state, **overrides))
    model.load_state_dict(state)
    return model


def with_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
