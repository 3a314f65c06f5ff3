"""Forward/backward primitives for channel-first 3D feature maps.

Every tensor is an ndarray of shape ``(channels, x, y, z)`` (batch size 1).
Forward functions return ``(out, cache)``; the matching backward takes the
upstream gradient and the cache.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    pass


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    c, nx, ny, nz = x.shape
    if k == 1:
        return x.reshape(c, -1)
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    cols = np.empty((c, k, k, k, nx, ny, nz), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xp[:, i:i + nx, j:j + ny, l:l + nz]
    return cols.reshape(c * k ** 3, -1)


def _col2im(dcols: np.ndarray, shape, k: int) -> np.ndarray:
    c, nx, ny, nz = shape
    if k == 1:
        return dcols.reshape(shape)
    p = k // 2
    dcols = dcols.reshape(c, k, k, k, nx, ny, nz)
    dxp = np.zeros((c, nx + 2 * p, ny + 2 * p, nz + 2 * p), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[:, i:i + nx, j:j + ny, l:l + nz] += dcols[:, i, j, l]
    return dxp[:, p:p + nx, p:p + ny, p:p + nz]


def conv3d_forward(x, w, b):
    """Stride-1 'same' convolution; ``w`` is ``(out, in, k, k, k)`` with odd k."""
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel expects {w.shape[1]} input channels, got {x.shape[0]}")
    k = w.shape[2]
    cols = _im2col(x, k)
    out = w.reshape(w.shape[0], -1) @ cols
    out += b[:, None]
    return out.reshape((w.shape[0],) + x.shape[1:]), (cols, x.shape, w)


def conv3d_backward(dout, cache):
    cols, xshape, w = cache
    d2 = dout.reshape(dout.shape[0], -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    dx = _col2im(w.reshape(w.shape[0], -1).T @ d2, xshape, w.shape[2])
    return dx, dw, db


def conv3d(x, w, b):
    return conv3d_forward(x, w, b)[0]


def group_norm_forward(x, scale, shift, groups, eps=1e-5):
    c = x.shape[0]
    if c % groups:
        raise ShapeError(f"{c} channels not divisible into {groups} groups")
    xg = x.reshape(groups, -1)
    mean = xg.mean(axis=1, keepdims=True)
    var = xg.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mean) * inv).reshape(x.shape)
    bshape = (c,) + (1,) * (x.ndim - 1)
    out = xhat * scale.reshape(bshape) + shift.reshape(bshape)
    return out, (xhat, inv, scale, groups)


def group_norm_backward(dout, cache):
    xhat, inv, scale, groups = cache
    c = dout.shape[0]
    axes = tuple(range(1, dout.ndim))
    dscale = (dout * xhat).sum(axis=axes)
    dshift = dout.sum(axis=axes)
    dxhat = (dout * scale.reshape((c,) + (1,) * (dout.ndim - 1))).reshape(groups, -1)
    xh = xhat.reshape(groups, -1)
    m = xh.shape[1]
    dx = inv / m * (m * dxhat - dxhat.sum(axis=1, keepdims=True)
                    - xh * (dxhat * xh).sum(axis=1, keepdims=True))
    return dx.reshape(dout.shape), dscale, dshift


def group_norm(x, scale, shift, groups, eps=1e-5):
    return group_norm_forward(x, scale, shift, groups, eps)[0]


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def relu(x):
    return np.maximum(x, 0)


def _pool_view(x):
    c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ShapeError(f"max pooling needs even spatial dims, got {x.shape[1:]}")
    v = x.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).transpose(0, 1, 3, 5, 2, 4, 6)
    return v.reshape(c, nx // 2, ny // 2, nz // 2, 8)


def max_pool_forward(x):
    v = _pool_view(x)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def max_pool_backward(dout, cache):
    idx, shape = cache
    c, nx, ny, nz = shape
    dv = np.zeros(idx.shape + (8,), dtype=dout.dtype)
    np.put_along_axis(dv, idx[..., None], dout[..., None], axis=-1)
    dv = dv.reshape(c, nx // 2, ny // 2, nz // 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
    return dv.reshape(shape)


def max_pool_2x(x):
    return max_pool_forward(x)[0]


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(dout):
    c, nx, ny, nz = dout.shape
    return dout.reshape(c, nx // 2, 2, ny // 2, 2, nz // 2, 2).sum(axis=(2, 4, 6))


def concat_skip(*tensors):
    shapes = {t.shape[1:] for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"cannot concatenate spatial shapes {sorted(shapes)}")
    return np.concatenate(tensors, axis=0)


def split_channels(dout, sizes):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=0)


def dropout_forward(x, rate, training, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not training or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


def dropout(x, rate, training, rng=None):
    return dropout_forward(x, rate, training, rng)[0]


def softmax_forward(z):
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_backward(dp, p):
    return p * (dp - (dp * p).sum(axis=0, keepdims=True))


def he_uniform(rng, shape, dtype=np.float32):
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
