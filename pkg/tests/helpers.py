"""Finite-difference oracle and small shared fixtures for the test suite."""

import numpy as np

from implantformer.network import NetConfig, init_params

# every resample path: transposed conv (2), identity (4), strided conv (8, 16)
TINY_NET = NetConfig(image_size=16, patch_size=4, embed_dim=8, heads=2, layers=4,
                     taps=(1, 2, 3, 4), ratios=(2, 4, 8, 16), reassemble_dim=4,
                     decoder_dim=4, stem_width=2, mlp_ratio=2, head_width=4)


def fd_directional(f, x, v, h):
    """Fourth-order central difference of f along direction v at x."""
    return (-f(x + 2 * h * v) + 8 * f(x + h * v) - 8 * f(x - h * v) + f(x - 2 * h * v)) / (12 * h)


def rel_err(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_param_grads(loss, params, grads, rng, h=1e-4):
    """Directional FD check of every tensor in ``params``; returns the worst rel. error.

    ``loss(params)`` must be a scalar function; ``grads`` its analytic gradient.
    """
    worst = 0.0
    for name in sorted(params):
        v = rng.standard_normal(params[name].shape)
        v /= np.linalg.norm(v) or 1.0

        def along(p, name=name):
            trial = dict(params)
            trial[name] = p
            return loss(trial)

        num = fd_directional(along, params[name], v, h)
        ana = float(np.sum(grads[name] * v))
        worst = max(worst, rel_err(ana, num))
    return worst


def check_input_grad(f, x, dx, rng, h=1e-4):
    v = rng.standard_normal(x.shape)
    v /= np.linalg.norm(v)
    return rel_err(float(np.sum(dx * v)), fd_directional(f, x, v, h))


def jittered_params(config, seed, dtype=np.float64, scale=0.3):
    """Init params plus N(0, scale) noise so no tensor sits at a symmetric point."""
    rng = np.random.default_rng(seed + 1000)
    p = init_params(config, seed, dtype)
    return {k: v + scale * rng.standard_normal(v.shape).astype(dtype) for k, v in p.items()}
