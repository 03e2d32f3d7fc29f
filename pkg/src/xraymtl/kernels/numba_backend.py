"""Numba-jitted convolution kernels.

Same im2col + GEMM strategy as the numpy backend, but the unfold/fold
loops run in nopython mode (no pad copies, no stride-trick temporaries)
and the GEMM goes through np.dot. First call per signature pays JIT
compilation; cache=True persists the compiled code on disk.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _im2col_nb(x, kh, kw, stride, pad, ho, wo):
    m, ci, h, w = x.shape
    ck = ci * kh * kw
    cols = np.zeros((m, ck, ho * wo))
    for s in range(m):
        for c in range(ci):
            for a in range(kh):
                for b in range(kw):
                    row = (c * kh + a) * kw + b
                    for i in range(ho):
                        hh = i * stride - pad + a
                        if hh < 0 or hh >= h:
                            continue
                        base = i * wo
                        for j in range(wo):
                            ww = j * stride - pad + b
                            if 0 <= ww < w:
                                cols[s, row, base + j] = x[s, c, hh, ww]
    return cols


@njit(cache=True, fastmath=True)
def _col2im_nb(cols, m, ci, h, w, kh, kw, stride, pad, ho, wo):
    out = np.zeros((m, ci, h, w))
    for s in range(m):
        for c in range(ci):
            for a in range(kh):
                for b in range(kw):
                    row = (c * kh + a) * kw + b
                    for i in range(ho):
                        hh = i * stride - pad + a
                        if hh < 0 or hh >= h:
                            continue
                        base = i * wo
                        for j in range(wo):
                            ww = j * stride - pad + b
                            if 0 <= ww < w:
                                out[s, c, hh, ww] += cols[s, row, base + j]
    return out


@njit(cache=True)
def _conv2d_forward_nb(x, w2, b, stride, pad, kh, kw, ho, wo):
    m = x.shape[0]
    co = w2.shape[0]
    cols = _im2col_nb(x, kh, kw, stride, pad, ho, wo)
    y = np.empty((m, co, ho, wo))
    for s in range(m):
        ys = np.dot(w2, cols[s])
        for c in range(co):
            for p in range(ho * wo):
                y[s, c, p // wo, p % wo] = ys[c, p] + b[c]
    return y


@njit(cache=True)
def _conv2d_backward_nb(x, w2, dy, stride, pad, kh, kw, need_dx):
    m, co, ho, wo = dy.shape
    ck = w2.shape[1]
    cols = _im2col_nb(x, kh, kw, stride, pad, ho, wo)
    dy2 = np.ascontiguousarray(dy.reshape(m, co, ho * wo))
    db = np.zeros(co)
    dw2 = np.zeros((co, ck))
    for s in range(m):
        colst = np.ascontiguousarray(cols[s].T)
        dw2 += np.dot(dy2[s], colst)
        for c in range(co):
            for p in range(ho * wo):
                db[c] += dy2[s, c, p]
    if need_dx:
        w2t = np.ascontiguousarray(w2.T)
        dcols = np.empty((m, ck, ho * wo))
        for s in range(m):
            dcols[s] = np.dot(w2t, dy2[s])
        dx = _col2im_nb(dcols, m, x.shape[1], x.shape[2], x.shape[3],
                        kh, kw, stride, pad, ho, wo)
        return dx, dw2, db
    return np.zeros((0, 0, 0, 0)), dw2, db


@njit(cache=True)
def _convt2d_forward_nb(a, w2t, b, stride, pad, kh, kw, out_h, out_w):
    m, ci, ha, wa = a.shape
    co = b.shape[0]
    a2 = np.ascontiguousarray(a.reshape(m, ci, ha * wa))
    g = np.empty((m, w2t.shape[0], ha * wa))
    for s in range(m):
        g[s] = np.dot(w2t, a2[s])
    z = _col2im_nb(g, m, co, out_h, out_w, kh, kw, stride, pad, ha, wa)
    for s in range(m):
        for c in range(co):
            for i in range(out_h):
                for j in range(out_w):
                    z[s, c, i, j] += b[c]
    return z


@njit(cache=True)
def _convt2d_backward_nb(a, w2, dz, stride, pad, kh, kw):
    m, ci, ha, wa = a.shape
    co = dz.shape[1]
    colsz = _im2col_nb(dz, kh, kw, stride, pad, ha, wa)
    a2 = np.ascontiguousarray(a.reshape(m, ci, ha * wa))
    db = np.zeros(co)
    dw2 = np.zeros((ci, w2.shape[1]))
    da = np.empty((m, ci, ha, wa))
    for s in range(m):
        colst = np.ascontiguousarray(colsz[s].T)
        dw2 += np.dot(a2[s], colst)
        das = np.dot(w2, colsz[s])
        for c in range(ci):
            for p in range(ha * wa):
                da[s, c, p // wa, p % wa] = das[c, p]
    for s in range(m):
        for c in range(co):
            for i in range(dz.shape[2]):
                for j in range(dz.shape[3]):
                    db[c] += dz[s, c, i, j]
    return da, dw2, db


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride, pad):
    co, ci, kh, kw = w.shape
    ho = _out_size(x.shape[2], kh, stride, pad)
    wo = _out_size(x.shape[3], kw, stride, pad)
    w2 = np.ascontiguousarray(w.reshape(co, ci * kh * kw))
    bias = b if b is not None else np.zeros(co)
    return _conv2d_forward_nb(np.ascontiguousarray(x), w2, bias, stride, pad, kh, kw, ho, wo)


def conv2d_backward(x, w, dy, stride, pad, need_dx=True):
    co, ci, kh, kw = w.shape
    w2 = np.ascontiguousarray(w.reshape(co, ci * kh * kw))
    dx, dw2, db = _conv2d_backward_nb(
        np.ascontiguousarray(x), w2, np.ascontiguousarray(dy), stride, pad, kh, kw, need_dx)
    return (dx if need_dx else None), dw2.reshape(w.shape), db


def convt2d_forward(a, w, b, stride, pad, out_h, out_w):
    ci, co, kh, kw = w.shape
    w2t = np.ascontiguousarray(w.reshape(ci, co * kh * kw).T)
    bias = b if b is not None else np.zeros(co)
    return _convt2d_forward_nb(np.ascontiguousarray(a), w2t, bias, stride, pad, kh, kw, out_h, out_w)


def convt2d_backward(a, w, dz, stride, pad):
    ci, co, kh, kw = w.shape
    w2 = np.ascontiguousarray(w.reshape(ci, co * kh * kw))
    da, dw2, db = _convt2d_backward_nb(
        np.ascontiguousarray(a), w2, np.ascontiguousarray(dz), stride, pad, kh, kw)
    return da, dw2.reshape(w.shape), db
