import numpy as np
import pytest
from hypothesis import given, strategies as st

from hmpnet.blocks import (C2PSA, MCPC, SPPF, Attention, ConvNormAct, DynamicConv, GNDConv, HDFBlock, HGStem,
                           ScaleLayer, apply_transform, seed_init)
from hmpnet.tensor import Tensor, check_gradients, float64_mode
from hmpnet.tensor import ops


def closed_form_params(module) -> int:
    return sum(m.param_count() for _, m in module.named_modules())


def enumerated_params(module) -> int:
    return sum(p.size for p in module.parameters())


def zero_weights(module):
    for p in module.parameters():
        p.data[...] = 0


def oracle_transform(w: np.ndarray, name: str) -> np.ndarray:
    """Direct per-tap statement of the four difference kernels."""
    out = w.copy()
    if name == "cd":
        out[..., 1, 1] = w[..., 1, 1] - w.sum(axis=(-1, -2))
    elif name == "ad":
        ring = [(0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0)]
        for j, (r, c) in enumerate(ring):
            rn, cn = ring[(j + 1) % 8]
            out[..., r, c] = w[..., r, c] - w[..., rn, cn]
        out[..., 1, 1] = 0
    elif name == "hd":
        out = w - w.mean(axis=-1, keepdims=True)
    elif name == "vd":
        out = w - w.mean(axis=-2, keepdims=True)
    return out


# ----------------------------------------------------------------- stem

def test_hgstem_shapes_zero_and_params(rng):
    seed_init(0)
    stem = HGStem(3, 16, 32, gn=8).bind_names()
    y = stem(Tensor(rng.standard_normal((1, 3, 64, 64))))
    assert y.shape == (1, 32, 16, 16)
    assert np.all(stem(Tensor(np.zeros((1, 3, 64, 64)))).data == 0)
    assert closed_form_params(stem) == enumerated_params(stem)
    with pytest.raises(ValueError):
        stem(Tensor(np.zeros((1, 3, 30, 32))))


def test_conv_norm_act_width():
    seed_init(0)
    assert ConvNormAct(8, 24, 3, gn=8)(Tensor(np.ones((1, 8, 4, 4)))).shape[1] == 24


# ----------------------------------------------------------- dynamic conv

def test_dynamic_identical_experts_equal_static_conv(rng):
    seed_init(1)
    dyn = DynamicConv(4, 6, 3, experts=4)
    kern = rng.standard_normal(dyn.kernel_shape).astype(np.float32)
    dyn.experts.data[:] = kern.reshape(1, -1)
    x = Tensor(rng.standard_normal((3, 4, 7, 7)))
    static = ops.conv2d(x, Tensor(kern), None, 1, 1)
    np.testing.assert_allclose(dyn(x).data, static.data, atol=1e-6 * max(1, np.abs(static.data).max()))


def test_dynamic_attention_sums_to_one_and_large_temperature(rng):
    seed_init(2)
    with float64_mode():
        dyn = DynamicConv(4, 4, 3, groups=4, experts=3, temperature=1e7)
        dyn.attn.weight.data[:] = rng.standard_normal(dyn.attn.weight.shape)
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        a = dyn.attention(x).data
        np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)
        mean_k = dyn.experts.data.mean(axis=0).reshape(dyn.kernel_shape)
        ref = ops.conv2d(x, Tensor(mean_k), None, 1, 1, 1, 4)
        np.testing.assert_allclose(dyn(x).data, ref.data, atol=1e-4)
    with pytest.raises(ValueError):
        DynamicConv(4, 4, experts=0)


def test_dynamic_conv_is_per_sample(rng):
    seed_init(3)
    with float64_mode():
        dyn = DynamicConv(2, 2, 3, experts=2, temperature=1.0)
        dyn.attn.weight.data[:] = rng.standard_normal(dyn.attn.weight.shape) * 3
        x = rng.standard_normal((2, 2, 4, 4))
        both = dyn(Tensor(x)).data
        for i in range(2):
            np.testing.assert_allclose(dyn(Tensor(x[i:i + 1])).data[0], both[i], atol=1e-12)


# ------------------------------------------------------------ HDF block

def test_hdf_zero_weights_identity(rng):
    seed_init(4)
    blk = HDFBlock(8, repeats=2, gn=4)
    zero_weights(blk)
    x = Tensor(rng.standard_normal((2, 8, 5, 5)))
    np.testing.assert_array_equal(blk(x).data, x.data)
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 6, 4, 4))))


@given(n=st.integers(1, 2), h=st.integers(1, 6), w=st.integers(1, 6))
def test_hdf_preserves_shape(n, h, w):
    seed_init(5)
    blk = HDFBlock(4, gn=2)
    assert blk(Tensor(np.ones((n, 4, h, w)))).shape == (n, 4, h, w)


# ------------------------------------------------------------------ SPPF

def test_sppf_sequential_equals_parallel(rng):
    seed_init(6)
    sppf = SPPF(8, 8, gn=4)
    for _ in range(10):
        x = Tensor(rng.standard_normal((1, 4, 9, 11)))
        pools = sppf.pools(x)
        for p, k in zip(pools[1:], (5, 9, 13)):
            np.testing.assert_array_equal(p.data, ops.maxpool2d(x, k, 1, k // 2).data)
    assert ops.concat_channels(sppf.pools(x)).shape[1] == 4 * 4
    const = sppf.pools(Tensor(np.full((1, 4, 6, 6), 1.25)))
    assert all(np.all(p.data == 1.25) for p in const)


# ----------------------------------------------------------------- C2PSA

def test_c2psa_shape_and_attention_rows(rng):
    seed_init(7)
    blk = C2PSA(16, gn=4)
    x = Tensor(rng.standard_normal((2, 16, 3, 4)))
    assert blk(x).shape == x.shape
    w = blk.psa.attn.last_weights
    np.testing.assert_allclose(w.sum(axis=-1), 1, atol=1e-6)
    with pytest.raises(ValueError):
        C2PSA(15)


def test_c2psa_single_position_is_passthrough(rng):
    seed_init(8)
    blk = C2PSA(16, gn=4)
    x = Tensor(rng.standard_normal((2, 16, 1, 1)))
    full = blk(x).data
    blk.psa.attn.passthrough = True
    np.testing.assert_allclose(full, blk(x).data, atol=1e-5)


def test_attention_heads():
    assert Attention(128).heads == 2
    assert Attention(32).heads == 1


# ------------------------------------------------------------------ MCPC

def test_mcpc_identity_configuration(rng):
    m = MCPC(4, 4, kernels=(1,), norm_act=False)
    m.dw[0].weight.data[:] = 1
    m.pw.weight.data[:] = np.eye(4).reshape(4, 4, 1, 1)
    m.pw.bias.data[:] = 0
    x = Tensor(rng.standard_normal((1, 4, 5, 5)))
    np.testing.assert_allclose(m(x).data, x.data, atol=1e-7)


def test_mcpc_split_run_concat_oracle(rng):
    seed_init(9)
    with float64_mode():
        m = MCPC(8, 6, kernels=(3, 5, 7, 9), norm_act=False)
        x = Tensor(rng.standard_normal((2, 8, 9, 9)))
        parts = [ops.conv2d(Tensor(x.data[:, 2 * i:2 * i + 2]), dw.weight, None, 1, k // 2, 1, 2)
                 for i, (dw, k) in enumerate(zip(m.dw, (3, 5, 7, 9)))]
        ref = ops.conv2d(ops.concat_channels(parts), m.pw.weight, m.pw.bias)
        y = m(x)
        assert y.shape == (2, 6, 9, 9)
        np.testing.assert_allclose(y.data, ref.data, rtol=1e-12, atol=1e-12)
    assert MCPC(8, kernels=(3, 5, 7, 9), gn=4)(Tensor(np.ones((1, 8, 5, 5)))).shape == (1, 8, 5, 5)
    with pytest.raises(ValueError):
        MCPC(6, kernels=(3, 5, 7, 9))
    with pytest.raises(ValueError):
        MCPC(8, kernels=(2, 4))


# --------------------------------------------------------------- GNDConv

@pytest.mark.parametrize("name", ["cd", "ad", "hd", "vd"])
def test_transforms_match_tap_definitions(rng, name):
    w = rng.standard_normal((3, 2, 3, 3))
    np.testing.assert_allclose(apply_transform(w, name), oracle_transform(w, name), atol=1e-12)


def test_gndconv_without_branches_is_norm_of_conv(rng):
    seed_init(10)
    with float64_mode():
        g = GNDConv(4, 8, branches=(), gn=4)
        x = Tensor(rng.standard_normal((2, 4, 5, 5)))
        ref = ops.silu(g.norm(ops.conv2d(x, g.weight, g.bias, 1, 1)))
        np.testing.assert_allclose(g(x).data, ref.data, atol=1e-12)


def test_gndconv_fusion_and_zero_branches(rng):
    seed_init(11)
    with float64_mode():
        g = GNDConv(4, 8, gn=4)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)))
        np.testing.assert_allclose(g(x).data, g.forward_branches(x).data, rtol=1e-12, atol=1e-12)
        for dw in g.diff_weights:
            dw.data[:] = 0
        np.testing.assert_array_equal(g.fused_weight(), g.weight.data)
    assert g.fused_weight().size + g.bias.size == 8 * 4 * 9 + 8


def test_gndconv_param_closed_form():
    c = 16
    g = GNDConv(c, c, gn=16)
    assert g.param_count() + g.norm.param_count() == 5 * c * c * 9 + c + 2 * c
    assert closed_form_params(g) == enumerated_params(g)
    with pytest.raises(ValueError):
        GNDConv(4, 6, gn=4)  # strict group norm
    with pytest.raises(ValueError):
        GNDConv(4, 4, branches=("xd",), gn=4)


def test_difference_priors_interior(rng):
    """Null responses hold on interior pixels; zero padding breaks constancy at the border."""
    seed_init(12)
    g = GNDConv(3, 4, gn=4)
    const = Tensor(np.full((1, 3, 7, 7), 2.5))
    row_const = Tensor(np.repeat(rng.standard_normal((1, 3, 7, 1)), 7, axis=3))  # varies along y only
    col_const = Tensor(np.repeat(rng.standard_normal((1, 3, 1, 7)), 7, axis=2))  # varies along x only
    outs = dict(zip(g.branches, g.branch_outputs(const)[1:]))
    assert np.abs(outs["cd"].data[..., 1:-1, 1:-1]).max() < 1e-6
    assert np.abs(outs["ad"].data[..., 1:-1, 1:-1]).max() < 1e-6
    hd = dict(zip(g.branches, g.branch_outputs(row_const)[1:]))["hd"]
    vd = dict(zip(g.branches, g.branch_outputs(col_const)[1:]))["vd"]
    assert np.abs(hd.data[..., 1:-1, 1:-1]).max() < 1e-6
    assert np.abs(vd.data[..., 1:-1, 1:-1]).max() < 1e-6


# ----------------------------------------------------------------- scale

def test_scale_layer(rng):
    s = ScaleLayer()
    x = Tensor(rng.standard_normal((1, 2, 3, 3)))
    np.testing.assert_array_equal(s("P4", x).data, x.data)
    s.scales[0].data[:] = 0
    assert np.all(s("P3", x).data == 0)
    with pytest.raises(KeyError):
        s("P6", x)
    with float64_mode():
        s = ScaleLayer()
        s.scales[2].data[:] = 1.7
        x = Tensor(rng.standard_normal((1, 2, 3, 3)))
        up = rng.standard_normal((1, 2, 3, 3))
        check_gradients(lambda: ops.sum(ops.mul(s(2, x), Tensor(up))), [s.scales[2]])
        assert abs(s.scales[2].grad[0] - float((x.data * up).sum())) < 1e-10


@pytest.mark.parametrize("make,shape", [
    (lambda: HGStem(3, 4, 8, gn=2), (1, 3, 8, 8)),
    (lambda: HDFBlock(4, 1, 2, 2, 2.0, gn=2), (2, 4, 4, 4)),
    (lambda: C2PSA(8, gn=2), (1, 8, 2, 3)),
    (lambda: MCPC(4, 4, (3, 5), gn=2), (1, 4, 5, 5)),
])
def test_block_gradients(make, shape):
    rng = np.random.default_rng(0)
    seed_init(13)
    with float64_mode():
        blk = make()
        x = Tensor(rng.standard_normal(shape))
        r = rng.standard_normal(blk(x).shape)
        errs = check_gradients(lambda: ops.sum(ops.mul(blk(x), Tensor(r))), [x] + blk.parameters(), 1e-5)
    assert max(errs.values()) < 1e-4
