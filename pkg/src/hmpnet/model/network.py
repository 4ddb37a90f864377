"""Full detector: dynamic-modulation backbone, multi-kernel neck, weight-shared head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..blocks import (C2PSA, MCPC, SPPF, Conv2d, ConvNormAct, GNDConv, HDFBlock, HGStem, Module, PlainBlock,
                      ScaleLayer, seed_init)
from ..tensor import Tensor
from ..tensor import ops
from .config import LEVELS, STRIDES, ModelConfig

PRIOR_PROB = 0.01


@dataclass
class LevelOutput:
    name: str
    stride: int
    cls: Tensor  # (N, num_classes, H, W) logits
    reg: Tensor  # (N, 4, H, W) raw; softplus(reg) * stride gives (l, t, r, b) in pixels


@dataclass
class FeaturePyramid:
    levels: list[LevelOutput]
    image_size: int

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, name: str) -> LevelOutput:
        for lv in self.levels:
            if lv.name == name:
                return lv
        raise KeyError(name)


class Backbone(Module):
    def __init__(self, cfg: ModelConfig):
        w2, w3, w4, w5 = cfg.widths
        gn = cfg.gn_groups

        def block(c, r):
            if cfg.use_hdm:
                return HDFBlock(c, r, cfg.hdf_expand, cfg.dyn_experts, cfg.dyn_temperature, gn)
            return PlainBlock(c, r, gn)

        self.stem = HGStem(3, cfg.stem_width, w2, gn)
        self.stage2 = block(w2, cfg.repeats[0])
        self.down3 = ConvNormAct(w2, w3, 3, 2, gn=gn)
        self.stage3 = block(w3, cfg.repeats[1])
        self.down4 = ConvNormAct(w3, w4, 3, 2, gn=gn)
        self.stage4 = block(w4, cfg.repeats[2])
        self.down5 = ConvNormAct(w4, w5, 3, 2, gn=gn)
        self.stage5 = block(w5, cfg.repeats[3])
        self.sppf = SPPF(w5, w5, gn=gn)
        self.psa = C2PSA(w5, gn=gn)

    def forward(self, x: Tensor):
        x = self.stage2(self.stem(x))
        p3 = self.stage3(self.down3(x))
        p4 = self.stage4(self.down4(p3))
        p5 = self.psa(self.sppf(self.stage5(self.down5(p4))))
        return p3, p4, p5


class Neck(Module):
    """Top-down then bottom-up fusion; every merge is concat followed by a fuse block."""

    def __init__(self, cfg: ModelConfig):
        _, w3, w4, w5 = cfg.widths
        n, gn = cfg.neck_width, cfg.gn_groups

        def fuse(cin):
            if cfg.use_mcpc:
                return MCPC(cin, n, cfg.mcpc_kernels, gn=gn)
            return ConvNormAct(cin, n, 3, gn=gn)

        self.td4 = fuse(w5 + w4)
        self.td3 = fuse(n + w3)
        self.down3 = ConvNormAct(n, n, 3, 2, gn=gn)
        self.bu4 = fuse(2 * n)
        self.down4 = ConvNormAct(n, n, 3, 2, gn=gn)
        self.bu5 = fuse(n + w5)

    def forward(self, p3, p4, p5):
        cat = ops.concat_channels
        t4 = self.td4(cat([ops.upsample_nearest2x(p5), p4]))
        o3 = self.td3(cat([ops.upsample_nearest2x(t4), p3]))
        o4 = self.bu4(cat([self.down3(o3), t4]))
        o5 = self.bu5(cat([self.down4(o4), p5]))
        return o3, o4, o5


class HeadBranch(Module):
    """Two GNDConv layers and the 1x1 classification / regression convs."""

    def __init__(self, width: int, num_classes: int, gn: int):
        self.gnd1 = GNDConv(width, width, gn=gn)
        self.gnd2 = GNDConv(width, width, gn=gn)
        self.cls = Conv2d(width, num_classes, 1, init_std=0.01)
        self.reg = Conv2d(width, 4, 1, init_std=0.01)
        self.cls.bias.data[:] = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)


class Head(Module):
    """Per-level 1x1 compression, then a trunk shared across levels (or one copy per level)."""

    def __init__(self, cfg: ModelConfig):
        n, h, gn = cfg.neck_width, cfg.head_width, cfg.gn_groups
        self.compress = [ConvNormAct(n, h, 1, gn=gn) for _ in LEVELS]
        if cfg.use_pws:
            shared = HeadBranch(h, cfg.num_classes, gn)
            self.branches = [shared] * len(LEVELS)
        else:
            self.branches = [HeadBranch(h, cfg.num_classes, gn) for _ in LEVELS]
        self.scale = ScaleLayer(LEVELS)

    def forward(self, feats):
        outs = []
        for i, x in enumerate(feats):
            br = self.branches[i]
            x = br.gnd2(br.gnd1(self.compress[i](x)))
            x = self.scale(i, x)
            outs.append((br.cls(x), br.reg(x)))
        return outs


class HMPNet(Module):
    def __init__(self, cfg: ModelConfig):
        self.config = cfg.validate()
        self.backbone = Backbone(cfg)
        self.neck = Neck(cfg)
        self.head = Head(cfg)

    def set_temperature(self, t: float) -> None:
        for _, m in self.named_modules():
            if isinstance(m, HDFBlock):
                m.set_temperature(t)

    def forward(self, images: Tensor) -> FeaturePyramid:
        s = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (s, s):
            raise ValueError(f"expected images of shape (N, 3, {s}, {s}), got {images.shape}")
        return self.forward_any(images)

    def forward_any(self, images: Tensor) -> FeaturePyramid:
        """Forward pass for any square input divisible by 32 (used for cost probing)."""
        s = images.shape[2]
        if images.shape[3] != s or s % 32:
            raise ValueError(f"input must be square and divisible by 32, got {images.shape[2:]}")
        feats = self.neck(*self.backbone(images))
        levels = [LevelOutput(name, stride, cls, reg)
                  for name, stride, (cls, reg) in zip(LEVELS, STRIDES, self.head(feats))]
        return FeaturePyramid(levels, s)


def build(config: ModelConfig | None = None, seed: int = 0) -> HMPNet:
    """Construct a detector with deterministic initialization."""
    seed_init(seed)
    return HMPNet(config or ModelConfig()).bind_names()
