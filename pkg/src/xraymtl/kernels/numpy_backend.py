"""Pure-numpy convolution kernels (im2col + BLAS matmul).

Fallback path for environments without numba; also the reference the
numba backend is benchmarked and tested against.
"""

from __future__ import annotations

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """Unfold x (M,Ci,H,W) into patch columns (M, Ci*kh*kw, Ho*Wo)."""
    m, ci, h, w = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    sm, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(m, ci, kh, kw, ho, wo),
        strides=(sm, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return view.reshape(m, ci * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, xshape: tuple[int, ...], kh: int, kw: int,
            stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Fold patch columns back by scatter-add; adjoint of _im2col."""
    m, ci, h, w = xshape
    xp = np.zeros((m, ci, h + 2 * pad, w + 2 * pad))
    grid = cols.reshape(m, ci, kh, kw, ho, wo)
    for c in range(ci):
        for a in range(kh):
            for b in range(kw):
                # within one (a, b) tap the strided targets are disjoint
                xp[:, c, a:a + stride * ho:stride, b:b + stride * wo:stride] += grid[:, c, a, b]
    if pad:
        return xp[:, :, pad:-pad, pad:-pad].copy()
    return xp


def conv2d_forward(x, w, b, stride, pad):
    co = w.shape[0]
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    y = np.matmul(w.reshape(co, -1), cols)
    if b is not None:
        y += b[:, None]
    return y.reshape(x.shape[0], co, ho, wo)


def conv2d_backward(x, w, dy, stride, pad, need_dx=True):
    m, co = dy.shape[0], dy.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    dy2 = dy.reshape(m, co, ho * wo)
    db = dy2.sum(axis=(0, 2))
    dw = np.matmul(dy2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    dx = None
    if need_dx:
        dcols = np.matmul(w.reshape(co, -1).T, dy2)
        dx = _col2im(dcols, x.shape, kh, kw, stride, pad, ho, wo)
    return dx, dw, db


def convt2d_forward(a, w, b, stride, pad, out_h, out_w):
    m, ci = a.shape[0], a.shape[1]
    co, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    ha, wa = a.shape[2], a.shape[3]
    g = np.matmul(w.reshape(ci, -1).T, a.reshape(m, ci, ha * wa))
    z = _col2im(g, (m, co, out_h, out_w), kh, kw, stride, pad, ha, wa)
    if b is not None:
        z += b[None, :, None, None]
    return z


def convt2d_backward(a, w, dz, stride, pad):
    m, ci = a.shape[0], a.shape[1]
    kh, kw = w.shape[2], w.shape[3]
    ha, wa = a.shape[2], a.shape[3]
    colsz, ho, wo = _im2col(dz, kh, kw, stride, pad)
    assert (ho, wo) == (ha, wa)
    a2 = a.reshape(m, ci, ha * wa)
    db = dz.sum(axis=(0, 2, 3))
    dw = np.matmul(a2, colsz.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    da = np.matmul(w.reshape(ci, -1), colsz).reshape(a.shape)
    return da, dw, db
