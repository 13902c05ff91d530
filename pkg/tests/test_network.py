import time

import numpy as np
import pytest

from ctxisp import cmod as cm
from ctxisp import network as N
from ctxisp import tensor as T
from ctxisp.raw import BayerImage
from ctxisp.tensor import Tensor


def random_params(seed=0, guide=(32, 32), dtype=np.float64, live=True):
    """Initialised weights with non-zero residual scales and tail so every path matters."""
    rng = np.random.default_rng(seed)
    p = N.init_params(N.ModelConfig(guide_size=guide), seed=seed, dtype=dtype)
    if live:
        for name, t in p.items():
            if "res_scale" in name:
                t.data[...] = rng.uniform(0.5, 1.0, t.shape)
            elif name.startswith("tail."):
                t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
    return p


def t64(a):
    return Tensor(a, dtype=np.float64)


def sigmoid(v):
    return 1 / (1 + np.exp(-v))


def test_channel_attention_examples():
    p = random_params()
    pre = "blocks.0."
    x = np.random.default_rng(1).standard_normal((2, 64, 4, 4))
    zero = dict(p)
    for n in ("ca_reduce", "ca_expand"):
        zero[pre + n + ".weight"] = t64(np.zeros(p[pre + n + ".weight"].shape))
        zero[pre + n + ".bias"] = t64(np.zeros(p[pre + n + ".bias"].shape))
    np.testing.assert_allclose(N.channel_attention(t64(x), zero, pre).data, 0.5 * x)
    assert not N.channel_attention(t64(np.zeros_like(x)), zero, pre).data.any()

    from scipy.special import erf
    wr, br = p[pre + "ca_reduce.weight"].data[:, :, 0, 0], p[pre + "ca_reduce.bias"].data
    we, be = p[pre + "ca_expand.weight"].data[:, :, 0, 0], p[pre + "ca_expand.bias"].data
    pooled = x.mean(axis=(2, 3))
    h = pooled @ wr.T + br
    h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
    gate = sigmoid(h @ we.T + be)
    np.testing.assert_allclose(N.channel_attention(t64(x), p, pre).data, x * gate[:, :, None, None], atol=1e-12)


def test_block_identity_cases():
    x = np.random.default_rng(2).standard_normal((1, 32, 6, 6))
    p = random_params(live=False)
    np.testing.assert_array_equal(N.baseline_block_forward(t64(x), p, 0).data, x)
    q = dict(p)
    for name, t in p.items():
        if name.startswith("blocks.0.") and (name.endswith(".weight") or name.endswith(".bias")):
            q[name] = t64(np.zeros(t.shape))
        elif name.startswith("blocks.0.res_scale"):
            q[name] = t64(np.ones(1))
    np.testing.assert_array_equal(N.baseline_block_forward(t64(x), q, 0).data, x)


def test_block_local_support_with_constant_gate():
    p = random_params(3)
    pre = "blocks.1."
    p[pre + "ca_expand.weight"] = t64(np.zeros(p[pre + "ca_expand.weight"].shape))
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 32, 9, 9))
    base = N.baseline_block_forward(t64(x), p, 1).data
    x[0, :, 4, 4] += rng.standard_normal(32)
    diff = np.abs(N.baseline_block_forward(t64(x), p, 1).data - base).sum(axis=(0, 1))
    ys, xs = np.nonzero(diff > 1e-12)
    assert ys.min() >= 3 and ys.max() <= 5 and xs.min() >= 3 and xs.max() <= 5
    assert diff[3:6, 3:6].min() > 1e-6


def test_reconstruct_identity_at_init_and_shapes():
    p = N.init_params(N.ModelConfig(), seed=0)
    for h, w in ((8, 8), (10, 14)):
        y = np.random.default_rng(h).uniform(0, 1, (1, 3, h, w)).astype(np.float32)
        out = N.reconstruct(Tensor(y), p).data
        assert out.shape == y.shape
        np.testing.assert_array_equal(out, y)


def test_forward_patch_composition():
    p = random_params(5)
    rng = np.random.default_rng(6)
    x = t64(rng.uniform(0, 1, (2, 3, 8, 8)))
    g = t64(rng.uniform(0, 1, (2, 4, 32, 32)))
    y_c, rgb = N.isp_forward_patch(x, g, p)
    y_c2 = cm.cmod_forward(x, g, p)
    rgb2 = N.reconstruct(y_c2, p)
    np.testing.assert_allclose(y_c.data, y_c2.data, atol=1e-7)
    np.testing.assert_allclose(rgb.data, rgb2.data, atol=1e-7)
    h = T.conv2d(y_c, p["head.weight"], p["head.bias"], padding=1)
    for i in range(N.N_BLOCKS):
        h = N.baseline_block_forward(h, p, i)
    correction = T.conv2d(h, p["tail.weight"], p["tail.bias"], padding=1).data
    np.testing.assert_allclose(rgb.data - correction, y_c.data, atol=1e-15)
    _, again = N.isp_forward_patch(x, g, p)
    np.testing.assert_array_equal(again.data, rgb.data)


def test_reconstruct_translation_equivariant_with_frozen_gates():
    p = random_params(7)
    for i in range(N.N_BLOCKS):
        p[f"blocks.{i}.ca_expand.weight"] = t64(np.zeros(p[f"blocks.{i}.ca_expand.weight"].shape))
    x = np.random.default_rng(8).uniform(0, 1, (1, 3, 24, 24))
    a = N.reconstruct(t64(x), p).data
    b = N.reconstruct(t64(np.roll(x, (3, 2), axis=(2, 3))), p).data
    # receptive field radius: head 1 + 3 blocks * 1 + tail 1 = 5
    np.testing.assert_allclose(np.roll(a, (3, 2), axis=(2, 3))[..., 10:19, 10:19], b[..., 10:19, 10:19], atol=1e-12)


def test_reconstruct_gradient_check():
    p = random_params(9)
    names = [n for n in p if not n.startswith("cmod.")]
    rng = np.random.default_rng(10)
    y = Tensor(rng.uniform(0, 1, (1, 3, 6, 6)), requires_grad=True, dtype=np.float64)
    rep = T.grad_check(lambda y, *ps: N.reconstruct(y, dict(zip(names, ps))), [y] + [p[n] for n in names],
                       step=1e-5, max_coords=3, rng=rng)
    assert rep.max_error <= 1e-5


def constant_bayer(h, w, value=500):
    return BayerImage(np.full((h, w), value), 64, 1023)


def test_fullres_constant_raw_gives_constant_image():
    p = random_params(11, guide=(32, 32), dtype=np.float32)
    img = N.isp_forward_fullres(constant_bayer(64, 96), p, (32, 32))
    assert img.shape == (64, 96, 3)
    # zero padding at the border breaks constancy, the interior stays constant
    assert np.ptp(img[6:-6, 6:-6].reshape(-1, 3), axis=0).max() < 1e-5


def test_tiled_matches_whole_and_shares_mv():
    rng = np.random.default_rng(12)
    p = random_params(13, guide=(32, 32), dtype=np.float32)
    plane = rng.integers(64, 1024, size=(256, 192))
    b = BayerImage(plane, 64, 1023)
    whole, mv = N.isp_forward_fullres(b, p, (32, 32), return_mv=True)
    tiled, mv_t = N.isp_forward_fullres(b, p, (32, 32), tile=96, overlap=32, return_mv=True)
    np.testing.assert_array_equal(mv, mv_t)
    assert np.sqrt(np.mean((whole - tiled) ** 2)) <= 1e-5


def test_param_count_and_closed_form_macs():
    p = N.init_params(N.ModelConfig())
    assert 45_000 <= N.count_params(p) <= 85_000
    assert N.count_macs([N.ConvSpec(3, 64, 1)], 448, 448) == 38_535_168
    assert N.count_macs([N.ConvSpec(64, 64, 3, padding=1, groups=64)], 448, 448) == 115_605_504
    assert abs(N.count_macs(N.ModelConfig(), 448, 448) / 8.42e9 - 1) <= 0.30


def test_macs_match_executed_convolutions():
    cfg = N.ModelConfig(guide_size=(32, 32))
    p = N.init_params(cfg)
    with T.no_grad(), T.count_macs() as counter:
        N.isp_forward_patch(Tensor(np.zeros((1, 3, 16, 24))), Tensor(np.zeros((1, 4, 32, 32))), p)
    assert counter[0] == N.count_macs(cfg, 16, 24)


def test_macs_scale_with_area():
    cfg = N.ModelConfig()
    fixed = sum(s.macs(*s.in_hw) for s in N.model_conv_specs(cfg, 8, 8) if s.in_hw != (8, 8))

    def per_pixel(h, w):
        return (N.count_macs(cfg, h, w) - fixed) / (h * w)

    assert per_pixel(64, 64) == per_pixel(448, 448) == per_pixel(100, 36)


@pytest.mark.slow
def test_full_size_forward_backward_smoke():
    p = N.init_params(N.ModelConfig())
    x = Tensor(np.random.default_rng(14).uniform(0, 1, (1, 3, 448, 448)))
    g = Tensor(np.random.default_rng(15).uniform(0, 1, (1, 4, 128, 128)))
    t0 = time.perf_counter()
    _, rgb = N.isp_forward_patch(x, g, p)
    T.backward(T.reduce_mean(rgb))
    assert time.perf_counter() - t0 <= 60
    assert all(np.isfinite(t.grad).all() for t in p.values())
