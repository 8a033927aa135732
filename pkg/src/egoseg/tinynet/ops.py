"""Functional NCHW tensor operators with exact analytic backward passes.

Every forward returns ``(y, cache)``; the matching backward takes the
upstream gradient plus the cache and returns gradients for each input.
Float dtype is preserved (f64 in, f64 out) so gradient checks can run at
full precision.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Column matrices larger than this are built in row chunks during
# cache-free inference to bound peak memory at benchmark resolutions.
_COL_CHUNK_BYTES = 192 * 1024 * 1024


def conv_out_len(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    eff = dilation * (k - 1) + 1
    return (size + 2 * pad - eff) // stride + 1


def _im2col(x, kh, kw, stride, pad, dilation):
    """(N, C, H, W) -> (N, C*kh*kw, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    oh = conv_out_len(h, kh, stride, pad, dilation)
    ow = conv_out_len(w, kw, stride, pad, dilation)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv output would be empty for input {h}x{w}, kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    eff_h = dilation * (kh - 1) + 1
    eff_w = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eff_h, eff_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation][:, :, :oh, :ow]
    # (N, C, OH, OW, kh, kw) -> (N, C, kh, kw, OH, OW)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad, dilation, oh, ow):
    """Adjoint of :func:`_im2col`: scatter-add patches back into an image."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        ys = i * dilation
        for j in range(kw):
            xs = j * dilation
            dxp[:, :, ys : ys + stride * oh : stride, xs : xs + stride * ow : stride] += cols6[
                :, :, i, j
            ]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d_forward(x, w, b=None, stride=1, pad=0, dilation=1, keep_cache=True):
    """2D convolution. ``x``: (N, C, H, W); ``w``: (F, C, kh, kw); ``b``: (F,)."""
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ValueError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    w2 = w.reshape(f, -1)

    oh = conv_out_len(h, kh, stride, pad, dilation)
    ow = conv_out_len(wd, kw, stride, pad, dilation)
    col_bytes = n * c * kh * kw * oh * ow * x.dtype.itemsize
    if not keep_cache and col_bytes > _COL_CHUNK_BYTES:
        y = _conv2d_chunked(x, w2, f, kh, kw, stride, pad, dilation, oh, ow)
    else:
        cols, oh, ow = _im2col(x, kh, kw, stride, pad, dilation)
        y = np.matmul(w2, cols).reshape(n, f, oh, ow)
    if b is not None:
        y += b.reshape(1, f, 1, 1)
    cache = (x, w, b is not None, stride, pad, dilation, oh, ow) if keep_cache else None
    return y, cache


def _conv2d_chunked(x, w2, f, kh, kw, stride, pad, dilation, oh, ow):
    """Row-chunked inference path; bounds the transient column matrix."""
    n, c, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    y = np.empty((n, f, oh, ow), dtype=x.dtype)
    per_row = n * c * kh * kw * ow * x.dtype.itemsize
    rows = max(int(_COL_CHUNK_BYTES // max(per_row, 1)), 1)
    eff_h = dilation * (kh - 1) + 1
    for r0 in range(0, oh, rows):
        r1 = min(r0 + rows, oh)
        y0 = r0 * stride
        y1 = (r1 - 1) * stride + eff_h
        sub = xp[:, :, y0:y1]
        cols, soh, sow = _im2col(sub, kh, kw, stride, 0, dilation)
        y[:, :, r0:r1] = np.matmul(w2, cols).reshape(n, f, soh, sow)[:, :, : r1 - r0]
    return y


def conv2d_backward(dy, cache):
    """Returns (dx, dw, db); db is None when the forward had no bias."""
    x, w, has_b, stride, pad, dilation, oh, ow = cache
    n = x.shape[0]
    f, c, kh, kw = w.shape
    cols, _, _ = _im2col(x, kh, kw, stride, pad, dilation)
    dy2 = dy.reshape(n, f, oh * ow)
    dw = np.einsum("nfp,ncp->fc", dy2, cols).reshape(f, c * kh * kw).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3)) if has_b else None
    dcols = np.matmul(w.reshape(f, -1).T, dy2)
    dx = _col2im(dcols, x.shape, kh, kw, stride, pad, dilation, oh, ow)
    return dx, dw, db


def deconv2d_forward(x, w, b=None, stride=2, pad=1, keep_cache=True):
    """Transposed convolution. ``w``: (C_in, C_out, kh, kw).

    With kernel 4, stride 2, pad 1 the output is exactly (2H, 2W).
    """
    n, c_in, h, wd = x.shape
    cw, c_out, kh, kw = w.shape
    if cw != c_in:
        raise ValueError(f"channel mismatch: input {x.shape} vs weight {w.shape}")
    oh = (h - 1) * stride - 2 * pad + kh
    ow = (wd - 1) * stride - 2 * pad + kw
    if oh < 1 or ow < 1:
        raise ValueError(f"deconv output would be empty for input {h}x{wd}")
    cols = np.matmul(w.reshape(c_in, -1).T, x.reshape(n, c_in, h * wd))
    y = _col2im(cols, (n, c_out, oh, ow), kh, kw, stride, pad, 1, h, wd)
    if b is not None:
        y += b.reshape(1, c_out, 1, 1)
    cache = (x, w, b is not None, stride, pad, oh, ow) if keep_cache else None
    return y, cache


def deconv2d_backward(dy, cache):
    x, w, has_b, stride, pad, oh, ow = cache
    n, c_in, h, wd = x.shape
    _, c_out, kh, kw = w.shape
    cols_dy, _, _ = _im2col(dy, kh, kw, stride, pad, 1)
    dx = np.matmul(w.reshape(c_in, -1), cols_dy).reshape(x.shape)
    dw = np.einsum("ncp,nkp->ck", x.reshape(n, c_in, h * wd), cols_dy).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3)) if has_b else None
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    Train mode normalizes by batch statistics and returns updated running
    stats; eval mode normalizes by the provided running stats. Returns
    ``(y, cache, new_running_mean, new_running_var)``.
    """
    if gamma.shape[0] != x.shape[1]:
        raise ValueError(f"batchnorm parameter length {gamma.shape[0]} != channels {x.shape[1]}")
    if mode == "train":
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1 - momentum) * running_mean + momentum * mu
        new_rv = (1 - momentum) * running_var + momentum * var
    elif mode == "eval":
        mu, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
    y = gamma.reshape(1, -1, 1, 1) * xhat + beta.reshape(1, -1, 1, 1)
    cache = (xhat, gamma, inv_std, mode)
    return y, cache, new_rm, new_rv


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, mode = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    g = gamma.reshape(1, -1, 1, 1)
    if mode == "eval":
        return dy * g * inv_std.reshape(1, -1, 1, 1), dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dxhat = dy * g
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv_std.reshape(1, -1, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu_forward(x, keep_cache=True):
    y = np.maximum(x, 0)
    return y, ((x > 0) if keep_cache else None)


def relu_backward(dy, cache):
    return dy * cache


def maxpool2d_forward(x, kernel=2, stride=None, pad=0, keep_cache=True):
    """Max pooling; ``maxpool2x2`` is kernel=2, stride=2."""
    stride = stride or kernel
    n, c, h, w = x.shape
    oh = conv_out_len(h, kernel, stride, pad, 1)
    ow = conv_out_len(w, kernel, stride, pad, 1)
    if oh < 1 or ow < 1:
        raise ValueError(f"pool output would be empty for input {h}x{w}")
    fill = np.array(-np.inf, dtype=x.dtype)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=fill) if pad else x
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow].reshape(n, c, oh, ow, kernel * kernel)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    cache = (x.shape, kernel, stride, pad, arg) if keep_cache else None
    return np.ascontiguousarray(y), cache


def maxpool2d_backward(dy, cache):
    x_shape, kernel, stride, pad, arg = cache
    n, c, h, w = x_shape
    oh, ow = arg.shape[2:]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dy.dtype)
    ohs = np.arange(oh)[None, None, :, None]
    ows = np.arange(ow)[None, None, None, :]
    py = ohs * stride + arg // kernel
    px = ows * stride + arg % kernel
    ns = np.arange(n)[:, None, None, None]
    cs = np.arange(c)[None, :, None, None]
    np.add.at(dxp, (ns, cs, py, px), dy)
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def avgpool_factor_forward(x, factor, keep_cache=True):
    """Average pooling with kernel = stride = factor, ceil mode at borders.

    Border cells average only the pixels that actually exist.
    """
    n, c, h, w = x.shape
    if factor > h and factor > w:
        raise ValueError(f"pool factor {factor} exceeds feature map {h}x{w} in both dims")
    f = factor
    oh = -(-h // f)
    ow = -(-w // f)
    xp = np.pad(x, ((0, 0), (0, 0), (0, oh * f - h), (0, ow * f - w)))
    sums = xp.reshape(n, c, oh, f, ow, f).sum(axis=(3, 5))
    cnt_h = np.minimum(f, h - np.arange(oh) * f)
    cnt_w = np.minimum(f, w - np.arange(ow) * f)
    counts = np.outer(cnt_h, cnt_w).astype(x.dtype)
    y = sums / counts
    cache = (x.shape, f, counts) if keep_cache else None
    return y, cache


def avgpool_factor_backward(dy, cache):
    x_shape, f, counts = cache
    n, c, h, w = x_shape
    g = dy / counts
    dx = np.repeat(np.repeat(g, f, axis=2), f, axis=3)
    return np.ascontiguousarray(dx[:, :, :h, :w])


def _interp_axis(out_len, in_len, dtype):
    scale = in_len / out_len
    src = np.clip((np.arange(out_len, dtype=np.float64) + 0.5) * scale - 0.5, 0, in_len - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, in_len - 1)
    return i0, i1, (src - i0).astype(dtype)


def upsample_bilinear_forward(x, oh, ow, keep_cache=True):
    """Bilinear resize to (oh, ow) with half-pixel-center alignment."""
    n, c, h, w = x.shape
    y0, y1, fy = _interp_axis(oh, h, x.dtype)
    x0, x1, fx = _interp_axis(ow, w, x.dtype)
    fyc = fy.reshape(1, 1, -1, 1)
    fxc = fx.reshape(1, 1, 1, -1)
    rows = x[:, :, y0] * (1 - fyc) + x[:, :, y1] * fyc
    y = rows[:, :, :, x0] * (1 - fxc) + rows[:, :, :, x1] * fxc
    cache = (x.shape, y0, y1, fy, x0, x1, fx) if keep_cache else None
    return y, cache


def upsample_bilinear_backward(dy, cache):
    x_shape, y0, y1, fy, x0, x1, fx = cache
    n, c, h, w = x_shape
    oh = y0.shape[0]
    fyc = fy.reshape(1, 1, -1, 1)
    fxc = fx.reshape(1, 1, 1, -1)
    drows = np.zeros((n, c, oh, w), dtype=dy.dtype)
    np.add.at(drows, (slice(None), slice(None), slice(None), x0), dy * (1 - fxc))
    np.add.at(drows, (slice(None), slice(None), slice(None), x1), dy * fxc)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    np.add.at(dx, (slice(None), slice(None), y0), drows * (1 - fyc))
    np.add.at(dx, (slice(None), slice(None), y1), drows * fyc)
    return dx


def concat_forward(xs, keep_cache=True):
    y = np.concatenate(xs, axis=1)
    return y, ([a.shape[1] for a in xs] if keep_cache else None)


def concat_backward(dy, cache):
    return np.split(dy, np.cumsum(cache)[:-1], axis=1)
