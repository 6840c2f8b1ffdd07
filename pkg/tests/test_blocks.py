import math

import numpy as np
import pytest

from ctxmod.blocks import AlphaCPB, BetaCPB, Readout, SelfAttention
from ctxmod.errors import ShapeError
from ctxmod.tensor import Tensor, backward, channel_norm, conv2d_valid, maxpool2d, no_grad, relu, tsum


def _x(rng, *shape):
    return Tensor(rng.normal(size=shape))


def test_alpha_shapes_match_the_quoted_pipeline(rng):
    # quoted: "(1 x 50 x 50) into (c x 9 x 9)"
    a1 = AlphaCPB(1, 30, rng, dtype=np.float64)
    a2 = AlphaCPB(30, 30, rng, dtype=np.float64)
    x = _x(rng, 2, 1, 50, 50)
    h = a1.forward(x)
    assert h.shape == (2, 30, 23, 23)
    assert a2.forward(h).shape == (2, 30, 9, 9)


def test_alpha_is_conv_relu_pool(rng):
    blk = AlphaCPB(1, 2, rng, dtype=np.float64)
    x = _x(rng, 1, 1, 12, 12)
    ref = maxpool2d(relu(conv2d_valid(x, blk.params["weight"], blk.params["bias"])))
    np.testing.assert_array_equal(blk.forward(x).data, ref.data)
    for p in blk.params.values():
        p.data[...] = 0
    assert np.all(blk.forward(x).data == 0)


def test_beta_shapes_and_locality(rng):
    b3 = BetaCPB(30, 30, 3, rng, dtype=np.float64)
    x = _x(rng, 1, 30, 9, 9)
    assert b3.forward(x).shape == (1, 30, 7, 7)
    assert BetaCPB(30, 30, 3, rng).forward(b3.forward(x)).shape == (1, 30, 5, 5)
    b1 = BetaCPB(4, 4, 1, rng, dtype=np.float64)
    x = rng.normal(size=(1, 4, 5, 5))
    y0 = b1.forward(Tensor(x)).data
    x2 = x.copy()
    x2[:, :, 0, 0] = 99.0  # perturb one other hypercolumn
    y1 = b1.forward(Tensor(x2)).data
    assert np.array_equal(y0[:, :, 2, 2], y1[:, :, 2, 2])
    with pytest.raises(ShapeError):
        BetaCPB(4, 4, 2, rng)


def test_beta_identity_map_is_relu(rng):
    b1 = BetaCPB(3, 3, 1, rng, dtype=np.float64)
    b1.params["weight"].data = np.eye(3).reshape(3, 3, 1, 1)
    b1.params["bias"].data = np.zeros(3)
    x = rng.normal(size=(1, 3, 4, 4))
    np.testing.assert_array_equal(b1.forward(Tensor(x)).data, np.maximum(x, 0))


def test_sa_parameter_counts(rng):
    c = 30
    f = SelfAttention(c, False, rng)
    t = SelfAttention(c, True, rng)
    assert f.param_breakdown()["SA(F)"] == 2 * (c * 5 + 5) == 310
    assert t.param_breakdown()["SA(T)"] == 310 + (c * 5 + 5) + (5 * c + c)
    assert f.param_breakdown()["SA(F).norm"] == 2 * c


def test_sa_gamma_false_is_a_shared_spatial_operator(rng):
    blk = SelfAttention(6, False, rng, dtype=np.float64)
    x = rng.normal(size=(2, 6, 5, 5))
    taps = {}
    blk.forward(Tensor(x), taps, prefix="")
    A = taps["attention"]
    assert A.shape == (2, 25, 25)
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-12)
    rebuilt = np.einsum("bij,bcj->bci", A, x.reshape(2, 6, 25)).reshape(2, 6, 5, 5)
    np.testing.assert_allclose(taps["attended"], rebuilt, atol=1e-12)


def test_sa_uniform_attention_gives_channel_means(rng):
    blk = SelfAttention(3, False, rng, norm="none", dtype=np.float64)
    for k in ("wq", "bq", "wk", "bk"):
        blk.params[k].data[...] = 0
    x = rng.normal(size=(1, 3, 4, 4))
    y = blk.forward(Tensor(x)).data
    np.testing.assert_allclose(y, np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape), atol=1e-12)


def test_sa_single_token_returns_normalized_input(rng):
    blk = SelfAttention(4, False, rng, dtype=np.float64)
    x = rng.normal(size=(1, 4, 1, 1))
    y = blk.forward(Tensor(x)).data
    ref = channel_norm(Tensor(x.reshape(1, 1, 4))).data.reshape(1, 4, 1, 1)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_sa_scaling_is_sqrt5(rng):
    blk = SelfAttention(3, True, rng, dtype=np.float64)
    tok = rng.normal(size=(1, 4, 3))
    p = {k: v.data for k, v in blk.params.items()}
    q = tok @ p["wq"].T + p["bq"]
    k = tok @ p["wk"].T + p["bk"]
    logits = q @ k.transpose(0, 2, 1) / math.sqrt(5)
    ref = np.exp(logits - logits.max(-1, keepdims=True))
    ref /= ref.sum(-1, keepdims=True)
    np.testing.assert_allclose(blk.attention(Tensor(tok)).data, ref, atol=1e-12)


def test_ctl_reads_only_the_center(rng):
    ro = Readout("ctl", (30, 9, 9), rng, dtype=np.float64)
    assert ro.center == (4, 4) and ro.params["weight"].shape == (1, 30)
    x = Tensor(rng.normal(size=(1, 30, 9, 9)), requires_grad=True)
    backward(tsum(ro.forward(x)))
    g = x.grad.copy()
    g[:, :, 4, 4] = 0
    assert np.all(g == 0)
    with pytest.raises(ShapeError):
        Readout("ctl", (30, 8, 8), rng)


def test_fcl_widths_and_bias_only(rng):
    ro = Readout("fcl", (30, 5, 5), rng)
    assert ro.params["weight"].shape == (1, 750)
    ro.params["weight"].data[...] = 0
    ro.params["bias"].data[...] = 0.25
    with no_grad():
        out = ro.forward(_x(rng, 3, 30, 5, 5)).data
    np.testing.assert_allclose(out, 0.25)
