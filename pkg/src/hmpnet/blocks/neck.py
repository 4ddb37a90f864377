"""Multi-kernel grouped convolution used throughout the neck."""
from __future__ import annotations

from ..tensor import Tensor
from ..tensor import ops
from .base import Conv2d, GroupNorm, Module


class MCPC(Module):
    """Split channels into equal groups, give each group its own depthwise kernel size,
    concatenate in order and fuse with a 1x1 conv.

    ``norm_act`` appends GroupNorm + SiLU after the fusing conv.
    """

    def __init__(self, cin: int, cout: int | None = None, kernels=(3, 5, 7, 9), norm_act: bool = True,
                 gn: int = 16):
        kernels = tuple(int(k) for k in kernels)
        if not kernels or any(k % 2 == 0 or k < 1 for k in kernels):
            raise ValueError(f"kernel sizes must be odd and positive, got {kernels}")
        g = len(kernels)
        if cin % g:
            raise ValueError(f"{cin} channels not divisible into {g} groups")
        cout = cin if cout is None else cout
        self.cin, self.cout, self.kernels = cin, cout, kernels
        part = cin // g
        self.dw = [Conv2d(part, part, k, 1, (k - 1) // 2, groups=part, bias=False) for k in kernels]
        self.pw = Conv2d(cin, cout, 1, bias=not norm_act)
        self.norm = GroupNorm(cout, gn) if norm_act else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cin:
            raise ValueError(f"expected {self.cin} channels, got {x.shape[1]}")
        parts = ops.split_channels(x, len(self.kernels))
        y = self.pw(ops.concat_channels([conv(p) for conv, p in zip(self.dw, parts)]))
        if self.norm is not None:
            y = ops.silu(self.norm(y))
        return y
