"""Hot inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``IMPLANTFORMER_DISABLE_NUMBA`` is unset or ``0``.  Both paths are
kept importable (``numpy_kernels`` / ``numba_kernels``) so tests and the
benchmark can compare them directly.

Both ``col2im`` paths accumulate kernel taps in the same (ky, kx) order, so
they agree bit-for-bit.
"""

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and os.environ.get("IMPLANTFORMER_DISABLE_NUMBA", "0") in ("", "0")


def _padded_extent(size, out, k, stride, pad):
    return max(size + pad, (out - 1) * stride + k)


# ---------------------------------------------------------------- numpy path


def _im2col_np(x, k, stride, pad, out_h, out_w):
    b, h, w, c = x.shape
    hb = _padded_extent(h, out_h, k, stride, pad)
    wb = _padded_extent(w, out_w, k, stride, pad)
    xp = np.zeros((b, hb, wb, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x
    cols = np.empty((b, out_h, out_w, k, k, c), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + stride * out_h:stride,
                                          kx:kx + stride * out_w:stride, :]
    return cols


def _col2im_np(cols, h, w, stride, pad):
    b, out_h, out_w, k, _, c = cols.shape
    hb = _padded_extent(h, out_h, k, stride, pad)
    wb = _padded_extent(w, out_w, k, stride, pad)
    xp = np.zeros((b, hb, wb, c), dtype=cols.dtype)
    for ky in range(k):
        for kx in range(k):
            xp[:, ky:ky + stride * out_h:stride,
               kx:kx + stride * out_w:stride, :] += cols[:, :, :, ky, kx, :]
    return xp[:, pad:pad + h, pad:pad + w, :].copy()


def _local_max_np(heat):
    h, w = heat.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = heat
    best = np.full((h, w), -np.inf)
    for dy in range(3):
        for dx in range(3):
            np.maximum(best, padded[dy:dy + h, dx:dx + w], out=best)
    return heat >= best


def _draw_gaussian_np(heat, cx, cy, sigma, radius):
    h, w = heat.shape
    y0, y1 = max(0, cy - radius), min(h, cy + radius + 1)
    x0, x1 = max(0, cx - radius), min(w, cx + radius + 1)
    dy = np.arange(y0, y1)[:, None] - cy
    dx = np.arange(x0, x1)[None, :] - cx
    g = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    np.maximum(heat[y0:y1, x0:x1], g, out=heat[y0:y1, x0:x1])
    return heat


def _disk_mask_np(h, w, cx, cy, radius):
    ys = np.arange(h)[:, None] - cy
    xs = np.arange(w)[None, :] - cx
    return xs * xs + ys * ys <= radius * radius


numpy_kernels = SimpleNamespace(
    im2col=_im2col_np,
    col2im=_col2im_np,
    local_max=_local_max_np,
    draw_gaussian=_draw_gaussian_np,
    disk_mask=_disk_mask_np,
)


# ---------------------------------------------------------------- numba path

if HAS_NUMBA:

    @njit(cache=True)
    def _im2col_loop(x, k, stride, pad, out_h, out_w):
        b, h, w, c = x.shape
        cols = np.empty((b, out_h, out_w, k, k, c), dtype=x.dtype)
        for n in range(b):
            for oy in range(out_h):
                for ky in range(k):
                    iy = oy * stride + ky - pad
                    row_ok = 0 <= iy < h
                    for ox in range(out_w):
                        base = ox * stride - pad
                        for kx in range(k):
                            ix = base + kx
                            if row_ok and 0 <= ix < w:
                                for ch in range(c):
                                    cols[n, oy, ox, ky, kx, ch] = x[n, iy, ix, ch]
                            else:
                                for ch in range(c):
                                    cols[n, oy, ox, ky, kx, ch] = 0
        return cols

    @njit(cache=True)
    def _col2im_loop(cols, h, w, stride, pad):
        b, out_h, out_w, k, _, c = cols.shape
        x = np.zeros((b, h, w, c), dtype=cols.dtype)
        for n in range(b):
            for ky in range(k):
                for kx in range(k):
                    for oy in range(out_h):
                        iy = oy * stride + ky - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(out_w):
                            ix = ox * stride + kx - pad
                            if ix < 0 or ix >= w:
                                continue
                            for ch in range(c):
                                x[n, iy, ix, ch] += cols[n, oy, ox, ky, kx, ch]
        return x

    @njit(cache=True)
    def _local_max_loop(heat):
        h, w = heat.shape
        keep = np.zeros((h, w), dtype=np.bool_)
        for y in range(h):
            for x in range(w):
                v = heat[y, x]
                ok = True
                for dy in range(-1, 2):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(-1, 2):
                        xx = x + dx
                        if xx < 0 or xx >= w:
                            continue
                        if heat[yy, xx] > v:
                            ok = False
                keep[y, x] = ok
        return keep

    @njit(cache=True)
    def _draw_gaussian_loop(heat, cx, cy, sigma, radius):
        h, w = heat.shape
        denom = 2.0 * sigma * sigma
        for y in range(max(0, cy - radius), min(h, cy + radius + 1)):
            for x in range(max(0, cx - radius), min(w, cx + radius + 1)):
                dx = x - cx
                dy = y - cy
                g = np.exp(-(dx * dx + dy * dy) / denom)
                if g > heat[y, x]:
                    heat[y, x] = g
        return heat

    @njit(cache=True)
    def _disk_mask_loop(h, w, cx, cy, radius):
        mask = np.zeros((h, w), dtype=np.bool_)
        r2 = radius * radius
        for y in range(h):
            dy = y - cy
            for x in range(w):
                dx = x - cx
                if dx * dx + dy * dy <= r2:
                    mask[y, x] = True
        return mask

    def _im2col_nb(x, k, stride, pad, out_h, out_w):
        return _im2col_loop(np.ascontiguousarray(x), k, stride, pad, out_h, out_w)

    def _col2im_nb(cols, h, w, stride, pad):
        return _col2im_loop(np.ascontiguousarray(cols), h, w, stride, pad)

    def _local_max_nb(heat):
        return _local_max_loop(np.ascontiguousarray(heat, dtype=np.float64))

    def _draw_gaussian_nb(heat, cx, cy, sigma, radius):
        return _draw_gaussian_loop(heat, int(cx), int(cy), float(sigma), int(radius))

    def _disk_mask_nb(h, w, cx, cy, radius):
        return _disk_mask_loop(int(h), int(w), float(cx), float(cy), float(radius))

    numba_kernels = SimpleNamespace(
        im2col=_im2col_nb,
        col2im=_col2im_nb,
        local_max=_local_max_nb,
        draw_gaussian=_draw_gaussian_nb,
        disk_mask=_disk_mask_nb,
    )
else:  # pragma: no cover
    numba_kernels = None


active = numba_kernels if USE_NUMBA else numpy_kernels

im2col = active.im2col
col2im = active.col2im
local_max = active.local_max
draw_gaussian = active.draw_gaussian
disk_mask = active.disk_mask


def set_threads(n):
    """Cap BLAS and numba worker threads (used for ``IMPLANTFORMER_THREADS``)."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=n)
    if HAS_NUMBA:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
