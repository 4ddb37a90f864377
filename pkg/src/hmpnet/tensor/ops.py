"""Differentiable primitives over NCHW tensors.

Every function takes and returns :class:`Tensor`; the backward closures
receive the upstream gradient as a plain array and return one gradient per
input (``None`` for inputs that need none).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .core import Tensor, make_result, default_dtype


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.ndim == 1


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape} (only scalar broadcasting is allowed)")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


# ---------------------------------------------------------------- elementwise

def _need(t: Tensor, g: np.ndarray, shape) -> np.ndarray | None:
    return _reduce_to(g, shape) if t.requires_grad else None


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("add", a.data + b.data, (a, b),
                       lambda g: (_need(a, g, a.shape), _need(b, g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result("sub", a.data - b.data, (a, b),
                       lambda g: (_need(a, g, a.shape), _need(b, -g, b.shape) if b.requires_grad else None))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data  # non-finite results are rejected by make_result

    def bw(g):
        ga = g / b.data
        return (_reduce_to(ga, a.shape) if a.requires_grad else None,
                _reduce_to(-ga * out, b.shape) if b.requires_grad else None)

    return make_result("div", out, (a, b), bw)


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b)
    take_a = a.data <= b.data
    return make_result("minimum", np.where(take_a, a.data, b.data), (a, b),
                       lambda g: (_reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)))


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    return make_result("maximum", np.where(take_a, a.data, b.data), (a, b),
                       lambda g: (_reduce_to(g * take_a, a.shape), _reduce_to(g * ~take_a, b.shape)))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_result("log", out, (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_result("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make_result("silu", x.data * s, (x,), lambda g: (g * (s * (1 + x.data * (1 - s))),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0, x.data).astype(x.dtype, copy=False)
    return make_result("softplus", out, (x,), lambda g: (g * expit(x.data),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_result("softmax", s, (x,),
                       lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy; ``targets`` is a constant array."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {logits.shape}")
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return make_result("bce_with_logits", out, (logits,), lambda g: (g * (expit(x) - t),))


# ------------------------------------------------------------ shape / layout

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(x.data[index])
    if out.ndim == 0:
        out = out.reshape(1)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g.reshape(x.data[index].shape))
        return (gx,)

    return make_result("getitem", out, (x,), bw)


def concat_channels(xs) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"spatial/batch mismatch in concat: {ref} vs {t.shape}")
    if len(xs) == 1:
        return xs[0]
    bounds = np.cumsum([t.shape[1] for t in xs])[:-1]
    return make_result("concat", np.concatenate([t.data for t in xs], axis=1), xs,
                       lambda g: tuple(np.split(g, bounds, axis=1)))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return make_result("channel_slice", np.ascontiguousarray(x.data[:, start:stop]), (x,), bw)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    c = x.shape[1]
    if parts < 1 or c % parts:
        raise ValueError(f"cannot split {c} channels into {parts} equal parts")
    if parts == 1:
        return [x]
    step = c // parts
    return [channel_slice(x, i * step, (i + 1) * step) for i in range(parts)]


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    return make_result("upsample_nearest2x", out, (x,),
                       lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def pad2d(x: Tensor, pads: tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad (top, bottom, left, right); ``mode`` is 'zero' or 'edge'."""
    top, bottom, left, right = pads
    _, _, h, w = x.shape
    width = ((0, 0), (0, 0), (top, bottom), (left, right))
    if mode == "zero":
        out = np.pad(x.data, width)

        def bw(g):
            return (g[:, :, top:top + h, left:left + w],)
    elif mode == "edge":
        out = np.pad(x.data, width, mode="edge")

        def bw(g):
            g = g.copy()
            # fold replicated border cells back onto the edge they copied
            if top:
                g[:, :, top] += g[:, :, :top].sum(axis=2)
            if bottom:
                g[:, :, top + h - 1] += g[:, :, top + h:].sum(axis=2)
            if left:
                g[:, :, :, left] += g[:, :, :, :left].sum(axis=3)
            if right:
                g[:, :, :, left + w - 1] += g[:, :, :, left + w:].sum(axis=3)
            return (g[:, :, top:top + h, left:left + w],)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return make_result("pad2d", out, (x,), bw)


# ---------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001
    return make_result("sum", np.asarray(x.data.sum(), dtype=x.dtype).reshape(1), (x,),
                       lambda g: (np.broadcast_to(g.reshape(()), x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return make_result("mean", np.asarray(x.data.mean(), dtype=x.dtype).reshape(1), (x,),
                       lambda g: (np.broadcast_to(g.reshape(()) / n, x.shape),))


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_result("global_avg_pool", out, (x,),
                       lambda g: (np.broadcast_to(g / (h * w), x.shape),))


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return make_result("matmul", np.matmul(a.data, b.data), (a, b),
                       lambda g: (np.matmul(g, np.swapaxes(b.data, -1, -2)),
                                  np.matmul(np.swapaxes(a.data, -1, -2), g)))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (N, in) @ w(out, in)^T + b(out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"linear shape mismatch {x.shape} vs weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return make_result("linear", out, inputs, bw)


def channel_affine(x: Tensor, scale: Tensor | None, shift: Tensor | None) -> Tensor:
    """Per-channel ``x * scale[c] + shift[c]`` (either may be None)."""
    shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    out = x.data
    if scale is not None:
        out = out * scale.data.reshape(shape)
    if shift is not None:
        out = out + shift.data.reshape(shape)
    inputs = [x] + [t for t in (scale, shift) if t is not None]

    def bw(g):
        grads = [g * scale.data.reshape(shape) if scale is not None else g]
        if scale is not None:
            grads.append((g * x.data).sum(axis=axes))
        if shift is not None:
            grads.append(g.sum(axis=axes))
        return grads

    return make_result("channel_affine", out, inputs, bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return channel_affine(x, None, b)


# ------------------------------------------------------------- normalization

def group_norm(x: Tensor, num_groups: int, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    n, c = x.shape[:2]
    if c % num_groups:
        raise ValueError(f"{c} channels not divisible into {num_groups} groups")
    xg = x.data.reshape(n, num_groups, -1)
    m = xg.shape[-1]
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    shape = (1, c) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    out = xhat.reshape(x.shape)
    if gamma is not None:
        out = out * gamma.data.reshape(shape)
    if beta is not None:
        out = out + beta.data.reshape(shape)
    inputs = [x] + [t for t in (gamma, beta) if t is not None]

    def bw(g):
        xh = xhat.reshape(x.shape)
        dxh = g * gamma.data.reshape(shape) if gamma is not None else g
        dxh = dxh.reshape(n, num_groups, m)
        dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                    - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        grads = [dx.reshape(x.shape)]
        if gamma is not None:
            grads.append((g * xh).sum(axis=axes))
        if beta is not None:
            grads.append(g.sum(axis=axes))
        return grads

    return make_result("group_norm", out.astype(x.dtype, copy=False), inputs, bw)


# --------------------------------------------------------------- convolution

def conv_out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(xp, (n, c, k, k, ho, wo),
                      (sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride), writeable=False)


def _tap(xp: np.ndarray, i: int, j: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    r, s = i * dilation, j * dilation
    return xp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride]


def _conv_dense(xp, w, stride, dilation, ho, wo):
    """groups=1 convolution on an already padded input; returns (out, backward)."""
    n, c = xp.shape[:2]
    o, _, k, _ = w.shape
    w2 = w.reshape(o, -1)
    if k == 1 and stride == 1:
        xs = xp.reshape(n, c, -1)
        out = np.matmul(w2, xs).reshape(n, o, ho, wo)

        def bw(g):
            g3 = g.reshape(n, o, -1)
            dw = np.tensordot(g3, xs, axes=([0, 2], [0, 2])).reshape(w.shape)
            dx = np.matmul(w2.T, g3).reshape(xp.shape)
            return dx, dw

        return out, bw
    cols = _windows(xp, k, stride, dilation, ho, wo).reshape(n, c * k * k, ho * wo)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)

    def bw(g):
        g3 = g.reshape(n, o, -1)
        dw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        dcols = np.matmul(w2.T, g3).reshape(n, c, k, k, ho, wo)
        dx = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                _tap(dx, i, j, stride, dilation, ho, wo)[...] += dcols[:, :, i, j]
        return dx, dw

    return out, bw


def _conv_depthwise(xp, w, stride, dilation, ho, wo):
    """One filter per channel, accumulated tap by tap."""
    k = w.shape[-1]
    wk = w[:, 0]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += _tap(xp, i, j, stride, dilation, ho, wo) * wk[:, i, j][None, :, None, None]

    def bw(g):
        dx = np.zeros_like(xp)
        dw = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                _tap(dx, i, j, stride, dilation, ho, wo)[...] += g * wk[:, i, j][None, :, None, None]
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, _tap(xp, i, j, stride, dilation, ho, wo))
        return dx, dw

    return out, bw


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d needs rank-4 input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    if kh != kw:
        raise ValueError("only square kernels are supported")
    if groups < 1 or c % groups or o % groups:
        raise ValueError(f"groups={groups} must divide in={c} and out={o} channels")
    if cg != c // groups:
        raise ValueError(f"weight expects {cg * groups} input channels, got {c}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"bias shape {b.shape} != ({o},)")
    k = kh
    ho = conv_out_size(h, k, stride, padding, dilation)
    wo = conv_out_size(wd, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k} does not fit input {h}x{wd} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    if groups == 1:
        out, core_bw = _conv_dense(xp, w.data, stride, dilation, ho, wo)
    elif groups == c and o == c:
        out, core_bw = _conv_depthwise(xp, w.data, stride, dilation, ho, wo)
    else:
        og = o // groups
        parts = [_conv_dense(np.ascontiguousarray(xp[:, gi * cg:(gi + 1) * cg]), w.data[gi * og:(gi + 1) * og],
                             stride, dilation, ho, wo) for gi in range(groups)]
        out = np.concatenate([p[0] for p in parts], axis=1)

        def core_bw(g):
            res = [p[1](np.ascontiguousarray(g[:, gi * og:(gi + 1) * og])) for gi, p in enumerate(parts)]
            return np.concatenate([r[0] for r in res], axis=1), np.concatenate([r[1] for r in res], axis=0)

    if b is not None:
        out += b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        dxp, dw = core_bw(g)
        dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_result("conv2d", out, inputs, bw)


def maxpool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max pooling; padded cells hold -inf so they never win."""
    stride = stride or k
    if k < 1:
        raise ValueError("pool kernel must be >= 1")
    if padding > k // 2:
        raise ValueError(f"padding {padding} exceeds half the window {k}")
    n, c, h, w = x.shape
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError(f"pool window {k} exceeds padded extent of {h}x{w}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    win = _windows(np.ascontiguousarray(xp), k, stride, 1, ho, wo).reshape(n, c, k * k, ho, wo)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    hp, wp = xp.shape[2:]

    def bw(g):
        di, dj = np.divmod(arg, k)
        rows = di + (np.arange(ho) * stride)[:, None]
        cols = dj + (np.arange(wo) * stride)[None, :]
        base = (np.arange(n * c) * (hp * wp)).reshape(n, c, 1, 1)
        flat = (base + rows * wp + cols).ravel()
        dxp = np.bincount(flat, weights=g.ravel(), minlength=n * c * hp * wp)
        dxp = dxp.reshape(n, c, hp, wp).astype(x.dtype, copy=False)
        return (dxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result("maxpool2d", out, (x,), bw)
