"""Backend dispatch for the hot kernels.

Callers see one set of array-in / array-out functions; the active
backend (see ddmc.backend) decides whether the numba or the numpy
build runs underneath.  Shapes are validated here so both builds can
assume clean inputs.
"""

import numpy as np

from ..backend import active_backend
from ..errors import ShapeError
from . import numpy_ops as _np_ops


def _as_c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, b):
    """Same-padded stride-1 conv of [N,Ci,H,W] with [Co,Ci,k,k] + bias."""
    if x.ndim != 4 or w.ndim != 4 or b.ndim != 1:
        raise ShapeError("conv2d expects x[N,Ci,H,W], w[Co,Ci,k,k], b[Co]")
    if w.shape[1] != x.shape[1]:
        raise ShapeError("conv2d channel mismatch: x has %d input channels, "
                         "w expects %d" % (x.shape[1], w.shape[1]))
    if w.shape[2] != w.shape[3] or w.shape[2] % 2 != 1:
        raise ShapeError("conv2d kernel must be square with odd side, got %s"
                         % (w.shape[2:],))
    if b.shape[0] != w.shape[0]:
        raise ShapeError("conv2d bias length %d != %d output channels"
                         % (b.shape[0], w.shape[0]))
    if active_backend() == "numpy":
        return _np_ops.conv2d_forward(x, w, b)
    from . import numba_ops as nb
    k = w.shape[2]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    w2t = _as_c(w.transpose(1, 2, 3, 0).reshape(w.shape[1] * k * k, w.shape[0]))
    out = np.empty((x.shape[0], w.shape[0], x.shape[2], x.shape[3]),
                   dtype=x.dtype)
    nb._conv2d_forward(xp, w2t, _as_c(b), out, k)
    return out


def conv2d_grad_input(gy, w):
    if active_backend() == "numpy":
        return _np_ops.conv2d_grad_input(gy, w)
    from . import numba_ops as nb
    co, ci, k, _ = w.shape
    p = k // 2
    gyp = np.pad(gy, ((0, 0), (0, 0), (p, p), (p, p)))
    wflip2 = _as_c(w[:, :, ::-1, ::-1].reshape(co, ci, k * k)
                   .transpose(0, 2, 1).reshape(co * k * k, ci))
    gx = np.empty((gy.shape[0], ci, gy.shape[2], gy.shape[3]), dtype=gy.dtype)
    nb._conv2d_grad_input(gyp, wflip2, gx, k)
    return gx


def conv2d_grad_weights(x, gy, k):
    if active_backend() == "numpy":
        return _np_ops.conv2d_grad_weights(x, gy, k)
    from . import numba_ops as nb
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    co = gy.shape[1]
    ci = x.shape[1]
    gw2 = np.zeros((co, ci * k * k), dtype=x.dtype)
    gb = np.zeros(co, dtype=x.dtype)
    nb._conv2d_grad_weights(xp, _as_c(gy), gw2, gb, k)
    return gw2.reshape(co, ci, k, k), gb


def maxpool2x2_forward(x):
    """2x2/stride-2 max pool; returns (pooled, uint8 argmax codes)."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("maxpool2x2 needs [N,C,H,W] with even H and W, "
                         "got %s" % (x.shape,))
    if active_backend() == "numpy":
        return _np_ops.maxpool2x2_forward(x)
    from . import numba_ops as nb
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.uint8)
    nb._maxpool2x2_forward(_as_c(x), y, idx)
    return y, idx


def maxpool2x2_backward(gy, idx, h, w):
    if active_backend() == "numpy":
        return _np_ops.maxpool2x2_backward(gy, idx, h, w)
    from . import numba_ops as nb
    n, c = gy.shape[:2]
    gx = np.zeros((n, c, h, w), dtype=gy.dtype)
    nb._maxpool2x2_backward(_as_c(gy), idx, gx)
    return gx


def warp_forward(x, tx, ty, theta):
    """Rigid warp of [N,C,H,W] by per-sample (tx, ty, theta) pixels/radians."""
    if x.ndim != 4:
        raise ShapeError("warp expects x[N,C,H,W], got %s" % (x.shape,))
    n = x.shape[0]
    if not (tx.shape == ty.shape == theta.shape == (n,)):
        raise ShapeError("warp params must be three [N]=[%d] vectors" % n)
    if active_backend() == "numpy":
        return _np_ops.warp_forward(x, tx, ty, theta)
    from . import numba_ops as nb
    out = np.empty_like(x)
    nb._warp_forward(_as_c(x), _as_c(tx), _as_c(ty), _as_c(theta), out)
    return out


def warp_backward(x, tx, ty, theta, gy, need_input_grad=True):
    """Returns (gx or None, gtx, gty, gtheta)."""
    if active_backend() == "numpy":
        return _np_ops.warp_backward(x, tx, ty, theta, gy, need_input_grad)
    from . import numba_ops as nb
    n = x.shape[0]
    gx = np.zeros_like(x)
    gtx = np.empty(n, dtype=x.dtype)
    gty = np.empty(n, dtype=x.dtype)
    gth = np.empty(n, dtype=x.dtype)
    nb._warp_backward(_as_c(x), _as_c(tx), _as_c(ty), _as_c(theta), _as_c(gy),
                      gx, gtx, gty, gth, need_input_grad)
    return (gx if need_input_grad else None), gtx, gty, gth


def upsample2x_forward(x):
    """Nearest-neighbour 2x upsampling (same path on both backends)."""
    return _np_ops.upsample2x_forward(x)


def upsample2x_backward(gy):
    return _np_ops.upsample2x_backward(gy)
