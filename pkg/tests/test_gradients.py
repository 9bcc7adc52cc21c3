"""Analytic backward passes against fourth-order central differences.

float64 instances must agree to 1e-6 relative error.  The float32 check runs
the analytic pass in float32 and compares with a float64 difference quotient
at the same point, tolerance 1e-4.
"""

import numpy as np
import pytest

from helpers import (TINY_NET, check_input_grad, check_param_grads, fd_directional,
                     jittered_params, rel_err)
from implantformer import network as N
from implantformer.heatmap import encode_target, focal_loss, offset_loss
from implantformer.network import NetConfig

SEEDS = range(100)
TOL64 = 1e-6
TOL32 = 1e-4


def _sub(params, prefix):
    return {k: v for k, v in params.items() if k.startswith(prefix)}


@pytest.mark.parametrize("seed", SEEDS)
def test_stem(seed):
    rng = np.random.default_rng(seed)
    params = _sub(jittered_params(TINY_NET, seed), "stem.")
    x = rng.standard_normal((1, 5, 6, 3))
    r = rng.standard_normal((1, 5, 6, 3))

    def loss(p, x=x):
        return float(np.sum(N.conv_stem_forward(p, x)[0] * r))

    _, caches = N.conv_stem_forward(params, x)
    dx, grads = N.conv_stem_backward(params, r, caches)
    assert check_param_grads(loss, params, grads, rng) < TOL64
    assert check_input_grad(lambda z: loss(params, z), x, dx, rng) < TOL64


@pytest.mark.parametrize("seed", SEEDS)
def test_encoder_block(seed):
    rng = np.random.default_rng(seed)
    params = _sub(jittered_params(TINY_NET, seed), "enc.1.")
    x = rng.standard_normal((2, 5, 8))
    r = rng.standard_normal((2, 5, 8))

    def loss(p, x=x):
        return float(np.sum(N.mhsa_block(p, "enc.1.", x, 2)[0] * r))

    _, _, cache = N.mhsa_block(params, "enc.1.", x, 2)
    dx, grads = N.mhsa_block_backward(params, "enc.1.", r, cache)
    assert check_param_grads(loss, params, grads, rng) < TOL64
    assert check_input_grad(lambda z: loss(params, z), x, dx, rng) < TOL64


@pytest.mark.parametrize("seed", SEEDS)
def test_reassemble(seed):
    rng = np.random.default_rng(seed)
    j = seed % 4                       # cycles s = 2, 4, 8, 16 against m = 4
    s = TINY_NET.ratios[j]
    read = "add" if seed % 8 >= 4 else "ignore"
    cfg = NetConfig(**{**TINY_NET.to_json(), "read": read})
    params = _sub(jittered_params(cfg, seed), f"reassemble.{j}.")
    tokens = rng.standard_normal((1, 17, 8))
    out, cache = N.reassemble(params, j, tokens, cfg, s)
    assert out.shape == (1, 16 // s, 16 // s, 4)
    r = rng.standard_normal(out.shape)

    def loss(p, t=tokens):
        return float(np.sum(N.reassemble(p, j, t, cfg, s)[0] * r))

    dtok, grads = N.reassemble_backward(params, j, r, cache, cfg)
    assert check_param_grads(loss, params, grads, rng) < TOL64
    assert check_input_grad(lambda t: loss(params, t), tokens, dtok, rng) < TOL64


@pytest.mark.parametrize("seed", SEEDS)
def test_fusion(seed):
    rng = np.random.default_rng(seed)
    fusion = "add" if seed % 5 == 0 else "concat"
    cfg = NetConfig(**{**TINY_NET.to_json(), "fusion": fusion})
    params = _sub(jittered_params(cfg, seed), "fuse.")
    maps = [rng.standard_normal((1, n, n, 4)) for n in (1, 2, 4, 8)]
    out, caches = N.decoder_fuse(params, maps, fusion)
    r = rng.standard_normal(out.shape)

    def loss(p, ms=maps):
        return float(np.sum(N.decoder_fuse(p, ms, fusion)[0] * r))

    dmaps, grads = N.decoder_fuse_backward(params, r, caches, fusion)
    if params:
        assert check_param_grads(loss, params, grads, rng) < TOL64
    for i in range(len(maps)):
        def f(m, i=i):
            ms = list(maps)
            ms[i] = m
            return loss(params, ms)
        assert check_input_grad(f, maps[i], dmaps[i], rng) < TOL64


@pytest.mark.parametrize("seed", SEEDS)
def test_heads(seed):
    rng = np.random.default_rng(seed)
    params = _sub(jittered_params(TINY_NET, seed), "head.")
    f = rng.standard_normal((2, 4, 4, 4))
    r1 = rng.standard_normal((2, 4, 4))
    r2 = rng.standard_normal((2, 4, 4, 2))

    def loss(p, f=f):
        heat, off, _ = N.heads(p, f)
        return float(np.sum(heat * r1) + np.sum(off * r2))

    _, _, cache = N.heads(params, f)
    df, grads = N.heads_backward(params, r1, r2, cache)
    assert check_param_grads(loss, params, grads, rng) < TOL64
    assert check_input_grad(lambda z: loss(params, z), f, df, rng) < TOL64


@pytest.mark.parametrize("seed", SEEDS)
def test_focal_loss(seed):
    rng = np.random.default_rng(seed)
    kps = rng.uniform(0, 32, size=(2, 2))
    target = encode_target(kps, 32, 32, g=4, radius=2.0, dtype=np.float64).heatmap
    pred = rng.uniform(0.02, 0.98, size=target.shape)
    loss, grad = focal_loss(pred, target, 2)
    num = fd_directional(lambda p: focal_loss(p, target, 2)[0], pred,
                         v := rng.standard_normal(pred.shape) / 8, 1e-5)
    assert rel_err(float(np.sum(grad * v)), num) < TOL64


@pytest.mark.parametrize("seed", SEEDS)
def test_offset_loss(seed):
    rng = np.random.default_rng(seed)
    target = rng.uniform(0, 1, size=(2, 4, 4, 2))
    mask = rng.random((2, 4, 4)) < 0.3
    mask[0, 0, 0] = True
    # keep every residual clear of the |.| kink
    pred = target + rng.choice([-1, 1], size=target.shape) * rng.uniform(0.1, 0.5, target.shape)
    _, grad = offset_loss(pred, target, mask)
    v = rng.standard_normal(pred.shape)
    num = fd_directional(lambda p: offset_loss(p, target, mask)[0], pred, v / np.linalg.norm(v),
                         1e-4)
    assert rel_err(float(np.sum(grad * v / np.linalg.norm(v))), num) < TOL64


def _net_loss(config, images, r_heat, r_off):
    def loss(p):
        heat, off, _, _ = N.forward(images, p, config)
        return float(np.sum(heat * r_heat) + np.sum(off * r_off))
    return loss


@pytest.mark.parametrize("seed", SEEDS)
def test_full_network_tiny(seed):
    """Joint direction over every parameter tensor plus the input image."""
    rng = np.random.default_rng(seed)
    fusion, stem = ("add", False) if seed % 4 == 3 else ("concat", True)
    cfg = NetConfig(**{**TINY_NET.to_json(), "fusion": fusion, "use_stem": stem})
    params = jittered_params(cfg, seed)
    images = rng.standard_normal((1, 16, 16, 3))
    hs = cfg.heatmap_size
    r_heat = rng.standard_normal((1, hs, hs))
    r_off = rng.standard_normal((1, hs, hs, 2))
    _, _, _, cache = N.forward(images, params, cfg)
    grads = N.backward(r_heat, r_off, cache, params, cfg)
    loss = _net_loss(cfg, images, r_heat, r_off)
    names = sorted(params)
    dirs = {k: rng.standard_normal(params[k].shape) for k in names}
    norm = np.sqrt(sum(np.sum(d * d) for d in dirs.values()))

    def along(t):
        return loss({k: params[k] + t * dirs[k] / norm for k in names})

    num = fd_directional(along, 0.0, 1.0, 1e-4)
    ana = sum(float(np.sum(grads[k] * dirs[k])) for k in names) / norm
    assert rel_err(ana, num) < TOL64


@pytest.mark.parametrize("seed", range(3))
def test_full_network_per_tensor(seed):
    rng = np.random.default_rng(seed)
    params = jittered_params(TINY_NET, seed)
    images = rng.standard_normal((2, 16, 16, 3))
    r_heat = rng.standard_normal((2, 8, 8))
    r_off = rng.standard_normal((2, 8, 8, 2))
    _, _, _, cache = N.forward(images, params, TINY_NET)
    grads = N.backward(r_heat, r_off, cache, params, TINY_NET)
    assert check_param_grads(_net_loss(TINY_NET, images, r_heat, r_off), params, grads,
                             rng) < TOL64


def test_toy_network_float64_and_float32():
    cfg = NetConfig()
    rng = np.random.default_rng(0)
    p64 = jittered_params(cfg, 0, scale=0.05)
    images = rng.uniform(0, 1, (1, 64, 64, 3))
    r_heat = rng.standard_normal((1, 16, 16))
    r_off = rng.standard_normal((1, 16, 16, 2))
    loss = _net_loss(cfg, images, r_heat, r_off)
    _, _, _, cache = N.forward(images, p64, cfg)
    g64 = N.backward(r_heat, r_off, cache, p64, cfg)
    p32 = {k: v.astype(np.float32) for k, v in p64.items()}
    _, _, _, cache = N.forward(images.astype(np.float32), p32, cfg)
    g32 = N.backward(r_heat.astype(np.float32), r_off.astype(np.float32), cache, p32, cfg)
    assert all(g.dtype == np.float32 for g in g32.values())
    base = {k: v.astype(np.float32).astype(np.float64) for k, v in p64.items()}
    worst64 = worst32 = 0.0
    for name in sorted(p64):
        v = rng.standard_normal(p64[name].shape)
        v /= np.linalg.norm(v)

        def along(t, name=name, ref=p64):
            trial = dict(ref)
            trial[name] = ref[name] + t * v
            return loss(trial)

        worst64 = max(worst64, rel_err(float(np.sum(g64[name] * v)), fd_directional(along, 0.0, 1.0, 1e-4)))
        num32 = fd_directional(lambda t: along(t, ref=base), 0.0, 1.0, 1e-4)
        worst32 = max(worst32, rel_err(float(np.sum(g32[name].astype(np.float64) * v)), num32))
    assert worst64 < TOL64
    assert worst32 < TOL32
