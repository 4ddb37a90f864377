"""Detection-head layers: difference-convolution transforms, GNDConv, and per-level scales."""
from __future__ import annotations

import numpy as np

from ..tensor import Parameter, Tensor
from ..tensor import ops
from .base import Module, GroupNorm, he_normal, recorder

# 3x3 taps indexed row-major; ring runs clockwise from the top-left corner.
_CENTER = 4
_RING = (0, 1, 2, 5, 8, 7, 6, 3)


def _central() -> np.ndarray:
    m = np.eye(9)
    m[_CENTER, :] -= 1.0
    return m


def _angular() -> np.ndarray:
    m = np.zeros((9, 9))
    for j, p in enumerate(_RING):
        m[p, p] += 1.0
        m[p, _RING[(j + 1) % 8]] -= 1.0
    return m


def _horizontal() -> np.ndarray:
    m = np.eye(9)
    for r in range(3):
        m[r * 3:r * 3 + 3, r * 3:r * 3 + 3] -= 1.0 / 3.0
    return m


def _vertical() -> np.ndarray:
    m = np.eye(9)
    for c in range(3):
        idx = [c, c + 3, c + 6]
        m[np.ix_(idx, idx)] -= 1.0 / 3.0
    return m


# Each matrix maps a flattened learned 3x3 kernel to its effective kernel: w_eff = M @ w.
DIFF_TRANSFORMS: dict[str, np.ndarray] = {
    "cd": _central(),
    "ad": _angular(),
    "hd": _horizontal(),
    "vd": _vertical(),
}


def apply_transform(w: np.ndarray, name: str) -> np.ndarray:
    """Effective kernel for a (O, I, 3, 3) weight under the named transform."""
    if w.shape[-2:] != (3, 3):
        raise ValueError(f"difference transforms need 3x3 kernels, got {w.shape}")
    m = DIFF_TRANSFORMS[name]
    return (w.reshape(-1, 9) @ m.T).reshape(w.shape).astype(w.dtype, copy=False)


def _transform_tensor(w: Tensor, name: str) -> Tensor:
    m = Tensor(DIFF_TRANSFORMS[name].T, dtype=w.dtype)
    return ops.reshape(ops.matmul(ops.reshape(w, (-1, 9)), m), w.shape)


class GNDConv(Module):
    """GroupNorm(vanilla 3x3 conv + sum of difference-convolution branches), then SiLU.

    Training runs the algebraically identical fused form: one conv with the
    summed effective kernel. ``forward_branches`` evaluates each branch
    separately.
    """

    def __init__(self, cin: int, cout: int, branches=("cd", "ad", "hd", "vd"), gn: int = 16,
                 eps: float = 1e-5, act: bool = True):
        for b in branches:
            if b not in DIFF_TRANSFORMS:
                raise ValueError(f"unknown difference branch {b!r}")
        self.cin, self.cout = cin, cout
        self.branches = tuple(branches)
        fan_in = cin * 9
        self.weight = Parameter(he_normal((cout, cin, 3, 3), fan_in))
        self.bias = Parameter(np.zeros(cout))
        self.diff_weights = [Parameter(he_normal((cout, cin, 3, 3), fan_in)) for _ in self.branches]
        self.norm = GroupNorm(cout, gn, eps, strict=True)
        self.act = act

    def param_count(self) -> int:
        return (len(self.branches) + 1) * self.cout * self.cin * 9 + self.cout

    def fused_weight(self) -> np.ndarray:
        w = self.weight.data.copy()
        for name, dw in zip(self.branches, self.diff_weights):
            w += apply_transform(dw.data, name)
        return w

    def _fused_kernel(self) -> Tensor:
        w = self.weight
        for name, dw in zip(self.branches, self.diff_weights):
            w = ops.add(w, _transform_tensor(dw, name))
        return w

    def branch_outputs(self, x: Tensor) -> list[Tensor]:
        """Pre-norm responses [vanilla, branch_1, ..., branch_n]; only the vanilla conv carries the bias."""
        outs = [ops.conv2d(x, self.weight, self.bias, 1, 1)]
        for name, dw in zip(self.branches, self.diff_weights):
            outs.append(ops.conv2d(x, _transform_tensor(dw, name), None, 1, 1))
        return outs

    def _finish(self, y: Tensor) -> Tensor:
        y = self.norm(y)
        return ops.silu(y) if self.act else y

    def forward_branches(self, x: Tensor) -> Tensor:
        outs = self.branch_outputs(x)
        y = outs[0]
        for o in outs[1:]:
            y = ops.add(y, o)
        return self._finish(y)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self._fused_kernel(), self.bias, 1, 1)
        rec = recorder()
        if rec is not None:
            ho, wo = y.shape[2:]
            rec.add(self, "gndconv", y.shape, 9 * self.cin * self.cout * ho * wo)
        return self._finish(y)


class ScaleLayer(Module):
    """One learnable multiplier per pyramid level, initialized to 1."""

    LEVELS = ("P3", "P4", "P5")

    def __init__(self, levels=LEVELS):
        self.levels = tuple(levels)
        self.scales = [Parameter(np.ones(1)) for _ in self.levels]

    def param_count(self) -> int:
        return len(self.levels)

    def forward(self, level, x: Tensor) -> Tensor:
        idx = self.levels.index(level) if isinstance(level, str) and level in self.levels else level
        if not isinstance(idx, int) or not 0 <= idx < len(self.levels):
            raise KeyError(f"unknown pyramid level {level!r}")
        out = ops.mul(x, self.scales[idx])
        rec = recorder()
        if rec is not None:
            rec.add(self, "scale", out.shape, 0, params=self.param_count())
        return out
