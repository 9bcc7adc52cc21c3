"""Differentiable building blocks on NHWC / (B, T, D) numpy arrays.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes ``(dout, cache)`` and returns ``(dx, grads)`` where ``grads`` is a dict
keyed like the parameters it was given.  Arithmetic stays in the dtype of the
inputs, so float64 parameters give a float64 graph for gradient checks.
"""

import numpy as np

from . import _kernels
from .errors import ShapeError

GELU_C = float(np.sqrt(2.0 / np.pi))


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ------------------------------------------------------------------ dense


def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w):
    din, dout = w.shape
    x2 = x.reshape(-1, din)
    dy2 = dy.reshape(-1, dout)
    return dy @ w.T, {"w": x2.T @ dy2, "b": dy2.sum(axis=0)}


# ------------------------------------------------------------------- conv


def conv_forward(x, w, b, k=3, stride=1, pad=1):
    """``w`` has shape (k*k*Cin, Cout) in (ky, kx, cin) order."""
    bsz, h, wd, cin = x.shape
    if w.shape[0] != k * k * cin:
        raise ShapeError(f"conv weight {w.shape} does not match {k}x{k}x{cin} input")
    oh, ow = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    cols = _kernels.im2col(x, k, stride, pad, oh, ow).reshape(bsz * oh * ow, -1)
    y = (cols @ w + b).reshape(bsz, oh, ow, -1)
    return y, (cols, x.shape, k, stride, pad, oh, ow)


def conv_backward(dy, cache, w):
    cols, xshape, k, stride, pad, oh, ow = cache
    bsz, h, wd, cin = xshape
    dy2 = dy.reshape(-1, w.shape[1])
    grads = {"w": cols.T @ dy2, "b": dy2.sum(axis=0)}
    dcols = (dy2 @ w.T).reshape(bsz, oh, ow, k, k, cin)
    return _kernels.col2im(dcols, h, wd, stride, pad), grads


def conv_transpose_forward(x, w, b, out_h, out_w, k=3, stride=2, pad=1):
    """Adjoint of a stride-``stride`` conv that maps (out_h, out_w) to x's size.

    ``w`` has shape (Cin, k*k*Cout).
    """
    bsz, h, wd, cin = x.shape
    if conv_out_size(out_h, k, stride, pad) != h or conv_out_size(out_w, k, stride, pad) != wd:
        raise ShapeError(f"transposed conv cannot map {h}x{wd} to {out_h}x{out_w}")
    cout = w.shape[1] // (k * k)
    x2 = x.reshape(-1, cin)
    cols = (x2 @ w).reshape(bsz, h, wd, k, k, cout)
    y = _kernels.col2im(cols, out_h, out_w, stride, pad) + b
    return y, (x2, x.shape, k, stride, pad)


def conv_transpose_backward(dy, cache, w):
    x2, xshape, k, stride, pad = cache
    bsz, h, wd, cin = xshape
    dcols = _kernels.im2col(dy, k, stride, pad, h, wd).reshape(bsz * h * wd, -1)
    grads = {"w": x2.T @ dcols, "b": dy.reshape(-1, dy.shape[-1]).sum(axis=0)}
    return (dcols @ w.T).reshape(xshape), grads


# ------------------------------------------------------------ activations


def gelu_forward(x):
    inner = GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = GELU_C * (1 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def layernorm_forward(x, g, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def layernorm_backward(dy, cache):
    xhat, inv, g = cache
    d = xhat.shape[-1]
    grads = {"g": (dy * xhat).reshape(-1, d).sum(axis=0), "b": dy.reshape(-1, d).sum(axis=0)}
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, grads


def softmax(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


# -------------------------------------------------------------- attention


def attention_forward(x, p, heads):
    """Multi-head self-attention; ``p`` holds qkv.w/b and proj.w/b."""
    bsz, t, d = x.shape
    if d % heads:
        raise ShapeError(f"token dim {d} not divisible by {heads} heads")
    dh = d // heads
    qkv, _ = linear_forward(x, p["qkv.w"], p["qkv.b"])
    qkv = qkv.reshape(bsz, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = x.dtype.type(1.0 / np.sqrt(dh))
    attn = softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
    out, _ = linear_forward(ctx, p["proj.w"], p["proj.b"])
    return out, attn, (x, q, k, v, attn, ctx, scale, heads)


def attention_backward(dout, cache, p):
    x, q, k, v, attn, ctx, scale, heads = cache
    bsz, t, d = x.shape
    dh = d // heads
    dctx, g_proj = linear_backward(dout, ctx, p["proj.w"])
    dctx = dctx.reshape(bsz, t, heads, dh).transpose(0, 2, 1, 3)
    dattn = dctx @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ dctx
    ds = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, t, 3 * d)
    dx, g_qkv = linear_backward(dqkv, x, p["qkv.w"])
    return dx, {"qkv.w": g_qkv["w"], "qkv.b": g_qkv["b"],
                "proj.w": g_proj["w"], "proj.b": g_proj["b"]}


# ------------------------------------------------------------- resampling

_UPSAMPLE_CACHE = {}


def upsample_matrix(n, dtype):
    """(2n, n) bilinear interpolation matrix, half-pixel centers, edge clamp."""
    key = (n, np.dtype(dtype).str)
    if key not in _UPSAMPLE_CACHE:
        m = np.zeros((2 * n, n))
        for i in range(2 * n):
            src = max((i + 0.5) / 2 - 0.5, 0.0)
            i0 = min(int(np.floor(src)), n - 1)
            i1 = min(i0 + 1, n - 1)
            lam = src - i0
            m[i, i0] += 1 - lam
            m[i, i1] += lam
        _UPSAMPLE_CACHE[key] = m.astype(dtype)
    return _UPSAMPLE_CACHE[key]


def upsample2x_forward(x):
    bsz, h, w, c = x.shape
    uh, uw = upsample_matrix(h, x.dtype), upsample_matrix(w, x.dtype)
    y = np.matmul(uh, x.reshape(bsz, h, w * c)).reshape(bsz, 2 * h, w, c)
    y = np.matmul(uw, y.transpose(0, 2, 1, 3).reshape(bsz, w, 2 * h * c))
    return y.reshape(bsz, 2 * w, 2 * h, c).transpose(0, 2, 1, 3), x.shape


def upsample2x_backward(dy, xshape):
    bsz, h, w, c = xshape
    uh, uw = upsample_matrix(h, dy.dtype), upsample_matrix(w, dy.dtype)
    d = dy.transpose(0, 2, 1, 3).reshape(bsz, 2 * w, 2 * h * c)
    d = np.matmul(uw.T, d).reshape(bsz, w, 2 * h, c).transpose(0, 2, 1, 3)
    d = np.matmul(uh.T, d.reshape(bsz, 2 * h, w * c))
    return d.reshape(bsz, h, w, c)
