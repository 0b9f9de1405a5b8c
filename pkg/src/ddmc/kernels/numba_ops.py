"""Numba builds of the hot kernels.

Convolutions are im2col + GEMM: per sample we fill a [H*W, Ci*k*k]
column buffer and hand the contraction to np.dot, which numba lowers
to BLAS.  That keeps a single kernel shape competitive from 2-channel
64x64 feature maps up to 128-channel bottlenecks on one core.

All loops are serial on purpose: no cross-thread reductions, so
results are bit-stable run to run and match the numpy backend.
"""

import numpy as np

try:
    from numba import njit
except ImportError:      # pragma: no cover - exercised only without numba
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap


@njit(cache=True, fastmath=True)
def _conv2d_forward(xp, w2t, b, out, k):
    # xp: padded input [N, Ci, H+2p, W+2p], w2t: [Ci*k*k, Co] contiguous,
    # out: [N, Co, H, W] preallocated.
    n_, co_, h_, w_ = out.shape
    ci_ = xp.shape[1]
    hw = h_ * w_
    col = np.empty((hw, ci_ * k * k), dtype=xp.dtype)
    for n in range(n_):
        for ci in range(ci_):
            base = ci * k * k
            for u in range(k):
                for v in range(k):
                    cidx = base + u * k + v
                    for i in range(h_):
                        o = i * w_
                        for j in range(w_):
                            col[o + j, cidx] = xp[n, ci, i + u, j + v]
        y2 = np.dot(col, w2t)
        for co in range(co_):
            for i in range(h_):
                o = i * w_
                for j in range(w_):
                    out[n, co, i, j] = y2[o + j, co] + b[co]


@njit(cache=True, fastmath=True)
def _conv2d_grad_input(gyp, wflip2, gx, k):
    # gyp: padded upstream grad [N, Co, H+2p, W+2p],
    # wflip2: [Co*k*k, Ci] contiguous (spatially flipped weights).
    n_, ci_, h_, w_ = gx.shape
    co_ = gyp.shape[1]
    hw = h_ * w_
    col = np.empty((hw, co_ * k * k), dtype=gyp.dtype)
    for n in range(n_):
        for co in range(co_):
            base = co * k * k
            for u in range(k):
                for v in range(k):
                    cidx = base + u * k + v
                    for i in range(h_):
                        o = i * w_
                        for j in range(w_):
                            col[o + j, cidx] = gyp[n, co, i + u, j + v]
        g2 = np.dot(col, wflip2)
        for ci in range(ci_):
            for i in range(h_):
                o = i * w_
                for j in range(w_):
                    gx[n, ci, i, j] = g2[o + j, ci]


@njit(cache=True, fastmath=True)
def _conv2d_grad_weights(xp, gy, gw2, gb, k):
    # gw2: [Co, Ci*k*k] accumulator, gb: [Co] accumulator, both zeroed.
    n_, co_, h_, w_ = gy.shape
    ci_ = xp.shape[1]
    hw = h_ * w_
    col = np.empty((hw, ci_ * k * k), dtype=xp.dtype)
    for n in range(n_):
        for ci in range(ci_):
            base = ci * k * k
            for u in range(k):
                for v in range(k):
                    cidx = base + u * k + v
                    for i in range(h_):
                        o = i * w_
                        for j in range(w_):
                            col[o + j, cidx] = xp[n, ci, i + u, j + v]
        gy2 = gy[n].reshape(co_, hw)
        gw2 += np.dot(gy2, col)
        for co in range(co_):
            s = 0.0
            for i in range(h_):
                for j in range(w_):
                    s += gy[n, co, i, j]
            gb[co] += s


@njit(cache=True, fastmath=True)
def _maxpool2x2_forward(x, y, idx):
    n_, c_, hh, ww = y.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(hh):
                for j in range(ww):
                    best = x[n, c, 2 * i, 2 * j]
                    code = np.uint8(0)
                    v = x[n, c, 2 * i, 2 * j + 1]
                    if v > best:
                        best = v
                        code = np.uint8(1)
                    v = x[n, c, 2 * i + 1, 2 * j]
                    if v > best:
                        best = v
                        code = np.uint8(2)
                    v = x[n, c, 2 * i + 1, 2 * j + 1]
                    if v > best:
                        best = v
                        code = np.uint8(3)
                    y[n, c, i, j] = best
                    idx[n, c, i, j] = code


@njit(cache=True, fastmath=True)
def _maxpool2x2_backward(gy, idx, gx):
    n_, c_, hh, ww = gy.shape
    for n in range(n_):
        for c in range(c_):
            for i in range(hh):
                for j in range(ww):
                    code = idx[n, c, i, j]
                    di = code >> 1
                    dj = code & 1
                    gx[n, c, 2 * i + di, 2 * j + dj] = gy[n, c, i, j]


@njit(cache=True, fastmath=True)
def _warp_forward(x, tx, ty, theta, out):
    # Backward map src = R(-theta) (dst - c - t) + c, written out with
    # ct = cos(theta), st = sin(theta): sx = ct*a + st*b, sy = -st*a + ct*b.
    n_, c_, h_, w_ = x.shape
    cx = (w_ - 1) / 2.0
    cy = (h_ - 1) / 2.0
    for n in range(n_):
        ct = np.cos(theta[n])
        st = np.sin(theta[n])
        for i in range(h_):
            b = i - cy - ty[n]
            for j in range(w_):
                a = j - cx - tx[n]
                sx = ct * a + st * b + cx
                sy = -st * a + ct * b + cy
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                fx = sx - x0
                fy = sy - y0
                w00 = (1.0 - fx) * (1.0 - fy)
                w10 = fx * (1.0 - fy)
                w01 = (1.0 - fx) * fy
                w11 = fx * fy
                in00 = 0 <= x0 < w_ and 0 <= y0 < h_
                in10 = 0 <= x0 + 1 < w_ and 0 <= y0 < h_
                in01 = 0 <= x0 < w_ and 0 <= y0 + 1 < h_
                in11 = 0 <= x0 + 1 < w_ and 0 <= y0 + 1 < h_
                for c in range(c_):
                    v = 0.0
                    if in00:
                        v += w00 * x[n, c, y0, x0]
                    if in10:
                        v += w10 * x[n, c, y0, x0 + 1]
                    if in01:
                        v += w01 * x[n, c, y0 + 1, x0]
                    if in11:
                        v += w11 * x[n, c, y0 + 1, x0 + 1]
                    out[n, c, i, j] = v


@njit(cache=True, fastmath=True)
def _warp_backward(x, tx, ty, theta, gy, gx, gtx, gty, gth, need_input_grad):
    n_, c_, h_, w_ = x.shape
    cx = (w_ - 1) / 2.0
    cy = (h_ - 1) / 2.0
    for n in range(n_):
        ct = np.cos(theta[n])
        st = np.sin(theta[n])
        atx = 0.0
        aty = 0.0
        ath = 0.0
        for i in range(h_):
            b = i - cy - ty[n]
            for j in range(w_):
                a = j - cx - tx[n]
                sx = ct * a + st * b + cx
                sy = -st * a + ct * b + cy
                x0 = int(np.floor(sx))
                y0 = int(np.floor(sy))
                fx = sx - x0
                fy = sy - y0
                in00 = 0 <= x0 < w_ and 0 <= y0 < h_
                in10 = 0 <= x0 + 1 < w_ and 0 <= y0 < h_
                in01 = 0 <= x0 < w_ and 0 <= y0 + 1 < h_
                in11 = 0 <= x0 + 1 < w_ and 0 <= y0 + 1 < h_
                w00 = (1.0 - fx) * (1.0 - fy)
                w10 = fx * (1.0 - fy)
                w01 = (1.0 - fx) * fy
                w11 = fx * fy
                gsx = 0.0
                gsy = 0.0
                for c in range(c_):
                    p00 = x[n, c, y0, x0] if in00 else 0.0
                    p10 = x[n, c, y0, x0 + 1] if in10 else 0.0
                    p01 = x[n, c, y0 + 1, x0] if in01 else 0.0
                    p11 = x[n, c, y0 + 1, x0 + 1] if in11 else 0.0
                    g = gy[n, c, i, j]
                    gsx += g * ((1.0 - fy) * (p10 - p00) + fy * (p11 - p01))
                    gsy += g * ((1.0 - fx) * (p01 - p00) + fx * (p11 - p10))
                    if need_input_grad:
                        if in00:
                            gx[n, c, y0, x0] += w00 * g
                        if in10:
                            gx[n, c, y0, x0 + 1] += w10 * g
                        if in01:
                            gx[n, c, y0 + 1, x0] += w01 * g
                        if in11:
                            gx[n, c, y0 + 1, x0 + 1] += w11 * g
                # d src / d params: sx depends on (tx, ty, theta) through
                # a and b; dsx/dtheta = sy - cy, dsy/dtheta = -(sx - cx).
                atx += gsx * (-ct) + gsy * st
                aty += gsx * (-st) + gsy * (-ct)
                ath += gsx * (sy - cy) - gsy * (sx - cx)
        gtx[n] = atx
        gty[n] = aty
        gth[n] = ath
