"""Rigid 2-D motion: parameters, algebra, and differentiable warps.

A rigid transform is (tx, ty, theta): translation in pixels along the
x (column) and y (row) axes plus rotation in radians about the image
centre c = ((W-1)/2, (H-1)/2).  Applying it to an image resamples by
the backward map src = R(-theta) (dst - c - t) + c with bilinear
interpolation and zero fill, so transforms compose as

    compose(p1, p2): theta = theta1 + theta2, t = R(theta2) t1 + t2
    invert(p):       theta' = -theta,         t' = -R(-theta) t
"""

import math
from dataclasses import dataclass

import numpy as np

from .diffcore.tensor import Tensor, warp_rigid
from .errors import ValidationError
from .fourier import ComplexImage


@dataclass(frozen=True)
class RigidParams:
    """One rigid transform: pixels, pixels, radians."""

    tx: float
    ty: float
    theta: float

    def __post_init__(self):
        for name in ("tx", "ty", "theta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValidationError("rigid parameter %s is not finite: %r"
                                      % (name, v))

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0)

    def as_array(self, dtype=np.float64):
        return np.array([self.tx, self.ty, self.theta], dtype=dtype)


def invert(p):
    """The transform that undoes p."""
    c = math.cos(-p.theta)
    s = math.sin(-p.theta)
    return RigidParams(tx=-(c * p.tx - s * p.ty),
                       ty=-(s * p.tx + c * p.ty),
                       theta=-p.theta)


def compose(p1, p2):
    """The transform equal to applying p1 first, then p2."""
    c = math.cos(p2.theta)
    s = math.sin(p2.theta)
    return RigidParams(tx=c * p1.tx - s * p1.ty + p2.tx,
                       ty=s * p1.tx + c * p1.ty + p2.ty,
                       theta=p1.theta + p2.theta)


def apply_rigid(img, p):
    """Warp a ComplexImage by a fixed rigid transform.

    The transform enters as a constant, so gradients flow only to the
    image planes.
    """
    re = img.real
    h, w = re.data.shape[-2:]
    if re.data.ndim != 2:
        raise ValidationError("apply_rigid expects single [H, W] planes, "
                              "got %s" % (re.shape,))
    from .fourier import pair_to_channels, channels_to_pair
    x = pair_to_channels(img)
    params = Tensor(p.as_array(dtype=x.data.dtype)[None, :])
    y = warp_rigid(x, params)
    return channels_to_pair(y, ComplexImage)


def warp_channels(x, params):
    """Differentiable rigid warp of a [N, C, H, W] tensor.

    params: [N, 3] Tensor of (tx, ty, theta) or a single RigidParams
    broadcast over the batch.
    """
    if isinstance(params, RigidParams):
        n = x.shape[0]
        params = Tensor(np.repeat(params.as_array(x.data.dtype)[None, :],
                                  n, axis=0))
    return warp_rigid(x, params)
