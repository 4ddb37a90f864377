"""Backbone blocks: stem, dynamic-convolution residual blocks, pyramid pooling, spatial attention."""
from __future__ import annotations

import numpy as np

from ..tensor import Parameter, Tensor
from ..tensor import ops
from .base import ConvNormAct, GroupNorm, Linear, Module, init_normal, recorder


class HGStem(Module):
    """Stride-4 stem: 3x3/s2 conv, then a two-conv branch beside a 2x2 max-pool, concat, 3x3/s2, 1x1.

    The 2x2 branch ops run at stride 1 on an input padded one cell right and
    bottom so both branches keep the stride-2 resolution.
    """

    def __init__(self, cin: int, mid: int, cout: int, gn: int = 16):
        if mid % 2:
            raise ValueError("stem width must be even")
        self.stem1 = ConvNormAct(cin, mid, 3, 2, gn=gn)
        self.stem2a = ConvNormAct(mid, mid // 2, 2, 1, padding=0, gn=gn)
        self.stem2b = ConvNormAct(mid // 2, mid, 2, 1, padding=0, gn=gn)
        self.stem3 = ConvNormAct(2 * mid, mid, 3, 2, gn=gn)
        self.stem4 = ConvNormAct(mid, cout, 1, gn=gn)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 4 or w % 4:
            raise ValueError(f"stem input {h}x{w} must be divisible by 4")
        x = self.stem1(x)
        b = self.stem2a(ops.pad2d(x, (0, 1, 0, 1)))
        b = self.stem2b(ops.pad2d(b, (0, 1, 0, 1)))
        # edge replication gives the same maxima as -inf padding
        p = ops.maxpool2d(ops.pad2d(x, (0, 1, 0, 1), mode="edge"), 2, 1)
        x = self.stem3(ops.concat_channels([p, b]))
        return self.stem4(x)


class DynamicConv(Module):
    """Input-conditioned mixture of K expert kernels.

    Attention is global-avg-pool -> linear(C->K) -> softmax(logits / temperature);
    each sample is convolved with its own convex combination of the experts.
    """

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, groups: int = 1,
                 experts: int = 4, temperature: float = 30.0):
        if experts < 1:
            raise ValueError("dynamic convolution needs at least one expert")
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide in={cin} and out={cout}")
        self.cin, self.cout, self.k, self.stride, self.groups = cin, cout, k, stride, groups
        self.num_experts = experts
        self.temperature = float(temperature)
        self.kernel_shape = (cout, cin // groups, k, k)
        fan_in = cin // groups * k * k
        per = int(np.prod(self.kernel_shape))
        self.experts = Parameter(init_normal((experts, per), np.sqrt(2.0 / fan_in)))
        self.attn = Linear(cin, experts)

    def param_count(self) -> int:
        return self.experts.size

    def attention(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        logits = self.attn(ops.reshape(ops.global_avg_pool(x), (n, c)))
        return ops.softmax(ops.mul(logits, 1.0 / self.temperature), axis=1)

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.cin:
            raise ValueError(f"expected {self.cin} channels, got {c}")
        a = self.attention(x)
        kern = ops.reshape(ops.matmul(a, self.experts), (n * self.cout,) + self.kernel_shape[1:])
        xs = ops.reshape(x, (1, n * c, h, w))
        out = ops.conv2d(xs, kern, None, self.stride, self.k // 2, 1, self.groups * n)
        out = ops.reshape(out, (n, self.cout) + out.shape[2:])
        rec = recorder()
        if rec is not None:
            ho, wo = out.shape[2:]
            rec.add(self, "dynconv", out.shape, self.k * self.k * (self.cin // self.groups) * self.cout * ho * wo)
            rec.add(self, "kernel_mix", (1, self.experts.shape[1]), self.experts.size, area_power=0, params=0)
        return out


class HDFUnit(Module):
    """One residual step: concat(dynamic depthwise -> pointwise, pointwise) -> expand 1x1 -> project 1x1 -> + x."""

    def __init__(self, c: int, expand: int = 2, experts: int = 4, temperature: float = 30.0, gn: int = 16):
        if c % 2:
            raise ValueError("HDF block width must be even")
        half = c // 2
        self.dw = DynamicConv(c, c, 3, 1, groups=c, experts=experts, temperature=temperature)
        self.dw_norm = GroupNorm(c, gn)
        self.pw_a = ConvNormAct(c, half, 1, gn=gn)
        self.pw_b = ConvNormAct(c, half, 1, gn=gn)
        self.pw1 = ConvNormAct(c, expand * c, 1, gn=gn)
        self.pw2 = ConvNormAct(expand * c, c, 1, act=False, gn=gn)

    def forward(self, x: Tensor) -> Tensor:
        a = self.pw_a(ops.silu(self.dw_norm(self.dw(x))))
        b = self.pw_b(x)
        y = self.pw2(self.pw1(ops.concat_channels([a, b])))
        return ops.add(x, y)


class HDFBlock(Module):
    def __init__(self, c: int, repeats: int = 1, expand: int = 2, experts: int = 4,
                 temperature: float = 30.0, gn: int = 16):
        if repeats < 1:
            raise ValueError("repeats must be >= 1")
        self.channels = c
        self.units = [HDFUnit(c, expand, experts, temperature, gn) for _ in range(repeats)]

    def set_temperature(self, t: float) -> None:
        for u in self.units:
            u.dw.temperature = float(t)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        for u in self.units:
            x = u(x)
        return x


class PlainUnit(Module):
    def __init__(self, c: int, gn: int = 16):
        self.cv1 = ConvNormAct(c, c, 3, gn=gn)
        self.cv2 = ConvNormAct(c, c, 3, act=False, gn=gn)

    def forward(self, x: Tensor) -> Tensor:
        return ops.add(x, self.cv2(self.cv1(x)))


class PlainBlock(Module):
    """Residual double 3x3 conv; the reference block the dynamic block replaces."""

    def __init__(self, c: int, repeats: int = 1, gn: int = 16):
        self.channels = c
        self.units = [PlainUnit(c, gn) for _ in range(repeats)]

    def forward(self, x: Tensor) -> Tensor:
        for u in self.units:
            x = u(x)
        return x


class SPPF(Module):
    """1x1 compress, three chained 5x5 max-pools, concat all four, 1x1 out."""

    def __init__(self, cin: int, cout: int, k: int = 5, gn: int = 16):
        hidden = cin // 2
        self.k = k
        self.cv1 = ConvNormAct(cin, hidden, 1, gn=gn)
        self.cv2 = ConvNormAct(4 * hidden, cout, 1, gn=gn)

    def pools(self, x: Tensor) -> list[Tensor]:
        out = [x]
        for _ in range(3):
            out.append(ops.maxpool2d(out[-1], self.k, 1, self.k // 2))
        return out

    def forward(self, x: Tensor) -> Tensor:
        return self.cv2(ops.concat_channels(self.pools(self.cv1(x))))


class Attention(Module):
    """Multi-head self-attention over flattened spatial positions.

    With ``passthrough`` set the softmax mixing is skipped and values pass
    straight to the output projection.
    """

    def __init__(self, dim: int, heads: int | None = None, gn: int = 16):
        self.heads = heads or max(dim // 64, 1)
        if dim % self.heads:
            raise ValueError(f"{dim} channels not divisible by {self.heads} heads")
        self.dim = dim
        self.head_dim = dim // self.heads
        self.scale = self.head_dim ** -0.5
        self.qkv = ConvNormAct(dim, 3 * dim, 1, act=False, gn=gn)
        self.proj = ConvNormAct(dim, dim, 1, act=False, gn=gn)
        self.passthrough = False
        self.last_weights: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        hw = h * w
        q, k, v = ops.split_channels(self.qkv(x), 3)
        shape = (n, self.heads, self.head_dim, hw)
        q, k, v = (ops.reshape(t, shape) for t in (q, k, v))
        if self.passthrough:
            out = v
        else:
            logits = ops.mul(ops.matmul(ops.transpose(q, (0, 1, 3, 2)), k), self.scale)
            attn = ops.softmax(logits, axis=-1)
            self.last_weights = attn.data
            out = ops.matmul(v, ops.transpose(attn, (0, 1, 3, 2)))
            rec = recorder()
            if rec is not None:
                rec.add(self, "attention", (1, self.heads, hw, hw), 2 * self.heads * hw * hw * self.head_dim,
                        area_power=2)
        return self.proj(ops.reshape(out, (n, c, h, w)))


class PSABlock(Module):
    def __init__(self, dim: int, gn: int = 16):
        self.attn = Attention(dim, gn=gn)
        self.ffn1 = ConvNormAct(dim, 2 * dim, 1, gn=gn)
        self.ffn2 = ConvNormAct(2 * dim, dim, 1, act=False, gn=gn)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(x))
        return ops.add(x, self.ffn2(self.ffn1(x)))


class C2PSA(Module):
    """1x1 conv, split halves, attention on one half, concat, 1x1 conv."""

    def __init__(self, c: int, gn: int = 16):
        if c % 2:
            raise ValueError("C2PSA width must be even")
        self.cv1 = ConvNormAct(c, c, 1, gn=gn)
        self.psa = PSABlock(c // 2, gn=gn)
        self.cv2 = ConvNormAct(c, c, 1, gn=gn)

    def forward(self, x: Tensor) -> Tensor:
        a, b = ops.split_channels(self.cv1(x), 2)
        return self.cv2(ops.concat_channels([a, self.psa(b)]))
