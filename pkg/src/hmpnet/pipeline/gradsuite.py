"""Finite-difference gradient checks for every block, at tiny widths in 64-bit mode."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..blocks import C2PSA, MCPC, SPPF, DynamicConv, GNDConv, HDFBlock, HGStem, ScaleLayer, seed_init
from ..detect import Box
from ..model.network import FeaturePyramid, LevelOutput
from ..tensor import Parameter, Tensor, check_gradients, float64_mode
from ..tensor import ops
from .assign import assign_targets
from .loss import detection_loss

TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    error: float  # worst relative error over the input and every parameter
    checked: int  # number of tensors compared

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _probe_loss(fn: Callable[[Tensor], Tensor], x: Tensor, rng) -> Callable[[], Tensor]:
    """sum(fn(x) * R) with a fixed random R, so every output element contributes."""
    weights = {}

    def loss():
        y = fn(x)
        if "r" not in weights:
            weights["r"] = rng.standard_normal(y.shape)
        return ops.sum(ops.mul(y, Tensor(weights["r"])))

    return loss


def _check_block(name: str, module, x: np.ndarray, rng, eps: float, fn=None) -> GradResult:
    xt = Tensor(x)
    call = fn or module
    loss = _probe_loss(call, xt, rng)
    tensors = [xt] + (module.parameters() if module is not None else [])
    errs = check_gradients(loss, tensors, eps)
    return GradResult(name, max(errs.values()), len(tensors))


def _loss_case(rng, eps: float) -> GradResult:
    size, nc = 64, 2
    gts = [[(0, Box(4.0, 6.0, 20.0, 18.0)), (1, Box(30.0, 8.0, 60.0, 50.0)), (1, Box(10.0, 30.0, 26.0, 44.0))],
           [(0, Box(20.0, 20.0, 34.0, 31.0))]]
    tgt = assign_targets(gts, size)
    leaves = []
    levels = []
    for name, stride in (("P3", 8), ("P4", 16), ("P5", 32)):
        g = size // stride
        cls = Tensor(rng.standard_normal((2, nc, g, g)))
        reg = Tensor(rng.standard_normal((2, 4, g, g)) + 1.0)
        leaves += [cls, reg]
        levels.append(LevelOutput(name, stride, cls, reg))
    pyr = FeaturePyramid(levels, size)
    errs = check_gradients(lambda: detection_loss(pyr, tgt), leaves, eps)
    return GradResult("detection_loss", max(errs.values()), len(leaves))


def run_gradient_suite(seed: int = 0, eps: float = 1e-5) -> list[GradResult]:
    """Check every block's input and parameter gradients against central differences."""
    out = []
    with float64_mode():
        rng = np.random.default_rng(seed)
        seed_init(seed)

        def inp(*shape):
            return rng.standard_normal(shape)

        out.append(_check_block("HGStem", HGStem(3, 4, 8, gn=2), inp(1, 3, 8, 8), rng, eps))
        dyn = DynamicConv(4, 4, 3, groups=2, experts=3, temperature=2.0)
        out.append(_check_block("DynamicConv", dyn, inp(2, 4, 5, 5), rng, eps))
        out.append(_check_block("HDFBlock", HDFBlock(4, 1, 2, 2, 2.0, gn=2), inp(2, 4, 4, 4), rng, eps))
        out.append(_check_block("SPPF", SPPF(4, 4, gn=2), inp(1, 4, 6, 6), rng, eps))
        out.append(_check_block("C2PSA", C2PSA(8, gn=2), inp(1, 8, 3, 3), rng, eps))
        out.append(_check_block("MCPC", MCPC(4, 4, (1, 3), gn=2), inp(1, 4, 5, 5), rng, eps))
        gnd = GNDConv(2, 4, gn=2)
        out.append(_check_block("GNDConv", gnd, inp(1, 2, 4, 4), rng, eps))
        out.append(_check_block("GNDConv[branches]", gnd, inp(1, 2, 4, 4), rng, eps, fn=gnd.forward_branches))
        scale = ScaleLayer()
        for p in scale.scales:
            p.data[:] = rng.uniform(0.5, 1.5)
        out.append(_check_block("Scale", scale, inp(1, 3, 3, 3), rng, eps, fn=lambda x: scale(1, x)))
        out.append(_loss_case(rng, eps))
    return out


def format_results(results: list[GradResult]) -> str:
    lines = [f"{r.name:<20} rel_err {r.error:.2e}  tensors {r.checked:3d}  {'ok' if r.ok else 'FAIL'}"
             for r in results]
    return "\n".join(lines)
