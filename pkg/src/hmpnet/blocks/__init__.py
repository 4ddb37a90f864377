"""Architectural blocks composed by the detector."""
from .base import (Conv2d, ConvNormAct, CostRecorder, CostRow, GroupNorm, Linear, Module, gn_groups_for,
                   recorder, recording, seed_init)
from .backbone import C2PSA, SPPF, Attention, DynamicConv, HDFBlock, HDFUnit, HGStem, PlainBlock, PSABlock
from .head import DIFF_TRANSFORMS, GNDConv, ScaleLayer, apply_transform
from .neck import MCPC

__all__ = [
    "Conv2d", "ConvNormAct", "CostRecorder", "CostRow", "GroupNorm", "Linear", "Module", "gn_groups_for",
    "recorder", "recording", "seed_init", "C2PSA", "SPPF", "Attention", "DynamicConv", "HDFBlock", "HDFUnit",
    "HGStem", "PlainBlock", "PSABlock", "DIFF_TRANSFORMS", "GNDConv", "ScaleLayer", "apply_transform", "MCPC",
]
