"""Cartesian undersampling: line masks and data consistency.

Masks select whole k-space rows (phase-encode lines).  A mask for
acceleration R on an H-row grid samples exactly floor(H/R) rows: a
fixed block of centre rows is always kept and the remainder are drawn
without replacement, weighted by a Gaussian profile centred on the
middle row.
"""

from dataclasses import dataclass

import numpy as np

from .diffcore.tensor import Tensor, add, scale_by
from .errors import MaskBudgetError, ShapeError, ValidationError
from .fourier import KSpaceGrid, ifft2c


@dataclass
class SamplingMask:
    """Row-sampling pattern for one k-space grid."""

    height: int
    sampled: np.ndarray          # bool [height]
    acceleration: int
    seed: int

    def __post_init__(self):
        self.sampled = np.asarray(self.sampled, dtype=bool)
        if self.sampled.shape != (self.height,):
            raise ShapeError("mask rows %s != height %d"
                             % (self.sampled.shape, self.height))

    @property
    def n_sampled(self):
        return int(self.sampled.sum())

    def row_indices(self):
        return np.flatnonzero(self.sampled)

    def plane(self, dtype=np.float32):
        """[H, 1] float plane that broadcasts over [..., H, W] grids."""
        return self.sampled.astype(dtype)[:, None]

    def save(self, path):
        rows = " ".join(str(i) for i in self.row_indices())
        with open(path, "w") as f:
            f.write("%d %d %d\n%s\n" % (self.height, self.acceleration,
                                        self.seed, rows))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            lines = f.read().split("\n")
        try:
            h, r, seed = (int(v) for v in lines[0].split())
            rows = [int(v) for v in lines[1].split()]
        except (IndexError, ValueError) as e:
            raise ValidationError("unreadable mask file %s: %s"
                                  % (path, e)) from e
        if rows != sorted(rows):
            raise ValidationError("mask rows must be ascending in %s" % path)
        sampled = np.zeros(h, dtype=bool)
        if rows and (rows[0] < 0 or rows[-1] >= h):
            raise ValidationError("mask row out of range in %s" % path)
        sampled[rows] = True
        return cls(height=h, sampled=sampled, acceleration=r, seed=seed)


# Rows H/2-3 .. H/2+2 are always kept: the low-frequency band that
# anchors contrast and the DC sample.
CENTER_ROWS = 6


def make_mask(height, acceleration, n_center=CENTER_ROWS, sigma_frac=0.25,
              seed=0):
    """Draw a Gaussian-weighted Cartesian line mask.

    Parameters
    ----------
    height : int
        Number of k-space rows.
    acceleration : int
        Undersampling factor R; exactly floor(height/R) rows are kept.
    n_center : int
        Rows around the grid centre that are always sampled.
    sigma_frac : float
        Std of the Gaussian row-weighting, as a fraction of height.
    seed : int
        Seed for the row draw.

    Returns
    -------
    SamplingMask
    """
    if height < 2 or acceleration < 1:
        raise ValidationError("need height >= 2 and acceleration >= 1, got "
                              "%d, %d" % (height, acceleration))
    if not 0 < sigma_frac <= 1:
        raise ValidationError("sigma_frac must lie in (0, 1], got %r"
                              % sigma_frac)
    budget = height // acceleration
    if budget < n_center:
        raise MaskBudgetError(
            "floor(%d/%d) = %d rows cannot cover the %d-row centre block"
            % (height, acceleration, budget, n_center))
    lo = height // 2 - n_center // 2
    hi = lo + n_center
    if lo < 0 or hi > height:
        raise MaskBudgetError("centre block [%d, %d) exceeds the grid"
                              % (lo, hi))
    sampled = np.zeros(height, dtype=bool)
    sampled[lo:hi] = True

    rest = np.flatnonzero(~sampled)
    n_extra = budget - n_center
    if n_extra > 0:
        rng = np.random.default_rng(seed)
        sigma = sigma_frac * height
        w = np.exp(-0.5 * ((rest - height / 2.0) / sigma) ** 2)
        w /= w.sum()
        picked = rng.choice(rest, size=n_extra, replace=False, p=w)
        sampled[picked] = True
    return SamplingMask(height=height, sampled=sampled,
                        acceleration=acceleration, seed=seed)


def _check_grid(k, mask, op):
    if k.real.data.shape[-2] != mask.height:
        raise ShapeError("%s: grid has %d rows, mask %d"
                         % (op, k.real.data.shape[-2], mask.height))


def undersample(k, mask):
    """Zero the unsampled rows of a k-space grid."""
    _check_grid(k, mask, "undersample")
    plane = mask.plane(dtype=k.real.data.dtype)
    return KSpaceGrid(scale_by(k.real, plane), scale_by(k.imag, plane))


def zero_filled(k_u):
    """Direct inverse transform of undersampled k-space."""
    return ifft2c(k_u)


def data_consistency(k_pred, y_u, mask):
    """Replace predicted k-space rows with measured ones where sampled.

    out = M * y_u + (1 - M) * k_pred, elementwise per plane.  Sampled
    rows of the output equal y_u bit for bit, so the op is idempotent.
    """
    _check_grid(k_pred, mask, "data_consistency")
    if k_pred.real.shape != y_u.real.shape:
        raise ShapeError("data_consistency: predicted %s vs measured %s"
                         % (k_pred.real.shape, y_u.real.shape))
    m = mask.plane(dtype=k_pred.real.data.dtype)
    keep = 1.0 - m
    re = add(scale_by(y_u.real, m), scale_by(k_pred.real, keep))
    im = add(scale_by(y_u.imag, m), scale_by(k_pred.imag, keep))
    return KSpaceGrid(re, im)


def _mask_plane(mask, x, op):
    """Resolve a SamplingMask or a precomputed (possibly batched) float
    plane to an array broadcastable over the channel tensor x."""
    if isinstance(mask, SamplingMask):
        plane = mask.plane(dtype=x.data.dtype)
    else:
        plane = np.asarray(mask, dtype=x.data.dtype)
    if np.broadcast_shapes(x.shape, plane.shape) != x.shape:
        raise ShapeError("%s: mask plane %s does not broadcast onto %s"
                         % (op, plane.shape, x.shape))
    return plane


def apply_mask_channels(x, mask):
    """Row mask on a [..., 2, H, W] k-space channel tensor."""
    return scale_by(x, _mask_plane(mask, x, "apply_mask"))


def data_consistency_channels(k_pred, y_u, mask):
    """data_consistency on [..., 2, H, W] channel tensors; y_u may be a
    Tensor or a plain ndarray (treated as constant)."""
    measured = y_u if isinstance(y_u, Tensor) else Tensor(y_u)
    if measured.shape != k_pred.shape:
        raise ShapeError("data_consistency: predicted %s vs measured %s"
                         % (k_pred.shape, measured.shape))
    m = _mask_plane(mask, k_pred, "data_consistency")
    return add(scale_by(measured, m), scale_by(k_pred, 1.0 - m))
