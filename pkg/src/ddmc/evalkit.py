"""Brain-masked image quality metrics and report rendering.

Metrics compare magnitudes (ground truth is real-valued, estimates may
carry residual imaginary parts) inside the brain mask only, with the
peak fixed at 1.0 so values are comparable across records.  Both
metrics ignore everything outside the mask: PSNR by masked averaging,
SSIM by zeroing the images outside the mask before windowing, so no
unmasked pixel can leak into any window statistic it is averaged over.
"""

import csv
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError
from .fourier import ComplexImage

PSNR_CAP = 100.0


@dataclass(frozen=True)
class MetricResult:
    psnr: float
    ssim: float
    n_pixels: int


def _magnitude_of(a):
    if isinstance(a, ComplexImage):
        return a.magnitude().astype(np.float64)
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("metrics expect 2-D images, got %s" % (arr.shape,))
    return arr


def _check_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError("mask %s does not match image %s"
                         % (mask.shape, shape))
    if not mask.any():
        raise ValidationError("empty mask: no pixels to evaluate")
    return mask


def psnr(a, b, mask, peak=1.0):
    """Peak SNR in dB over magnitudes at masked pixels, capped at 100."""
    am = _magnitude_of(a)
    bm = _magnitude_of(b)
    if am.shape != bm.shape:
        raise ShapeError("psnr inputs disagree: %s vs %s"
                         % (am.shape, bm.shape))
    m = _check_mask(mask, am.shape)
    err = am[m] - bm[m]
    mse = float(np.mean(err * err))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def _gaussian_kernel(window, sigma):
    half = (window - 1) / 2.0
    x = np.arange(window, dtype=np.float64) - half
    g = np.exp(-0.5 * (x / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def _local_mean(x, kernel):
    win = sliding_window_view(x, kernel.shape)
    return np.tensordot(win, kernel, axes=((2, 3), (0, 1)))


def ssim(a, b, mask, window=11, sigma=1.5, k1=0.01, k2=0.03,
         dynamic_range=1.0):
    """Mean local SSIM over masked pixels.

    Local statistics use an 11x11 Gaussian window (sigma 1.5) at fully
    interior positions; the map is averaged where the window centre is
    masked.  Images are zeroed outside the mask first so the metric
    cannot see unmasked pixels.
    """
    am = _magnitude_of(a)
    bm = _magnitude_of(b)
    if am.shape != bm.shape:
        raise ShapeError("ssim inputs disagree: %s vs %s"
                         % (am.shape, bm.shape))
    m = _check_mask(mask, am.shape)
    h, w = am.shape
    if h < window or w < window:
        raise ValidationError("image %dx%d smaller than %dx%d ssim window"
                              % (h, w, window, window))
    am = np.where(m, am, 0.0)
    bm = np.where(m, bm, 0.0)
    kern = _gaussian_kernel(window, sigma)
    mu1 = _local_mean(am, kern)
    mu2 = _local_mean(bm, kern)
    s11 = _local_mean(am * am, kern) - mu1 * mu1
    s22 = _local_mean(bm * bm, kern) - mu2 * mu2
    s12 = _local_mean(am * bm, kern) - mu1 * mu2
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    smap = num / den
    half = window // 2
    centres = m[half:h - half, half:w - half]
    if not centres.any():
        raise ValidationError("mask has no pixels with a fully interior "
                              "%dx%d window" % (window, window))
    return float(smap[centres].mean())


def metrics(a, b, mask):
    """PSNR and SSIM in one result."""
    m = np.asarray(mask, dtype=bool)
    return MetricResult(psnr=psnr(a, b, m), ssim=ssim(a, b, m),
                        n_pixels=int(m.sum()))


def write_pgm(path, img01):
    """Write a [0, 1] image as binary 8-bit PGM (P5)."""
    arr = np.asarray(img01, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError("pgm needs a 2-D image, got %s" % (arr.shape,))
    byte = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(byte.tobytes())
    return path


def render_report(records, outputs, out_dir, err_scale=5.0):
    """Write per-record grayscale panels, error maps, and a metrics CSV.

    Parameters
    ----------
    records : list of ContrastPairRecord
    outputs : list of dict
        Per record, named panels (e.g. zero_filled, synthesis,
        registration, final), each a ComplexImage or a magnitude
        array.  A ground_truth panel of the target is added
        automatically.
    out_dir : str
    err_scale : float
        Absolute error maps are scaled by this factor before the
        [0, 1] clip, for visibility.

    Returns
    -------
    list of written file paths.
    """
    if len(records) != len(outputs):
        raise ValidationError("got %d records but %d output dicts"
                              % (len(records), len(outputs)))
    os.makedirs(out_dir, exist_ok=True)
    written = []
    rows = []
    def as_mag(v):
        if hasattr(v, "magnitude"):
            v = v.magnitude()
        return np.asarray(v, dtype=np.float64)

    for rec, panels in zip(records, outputs):
        truth = as_mag(rec.tgt)
        named = dict(panels)
        named["ground_truth"] = rec.tgt
        for name in sorted(named):
            mag = as_mag(named[name])
            base = os.path.join(out_dir, "rec_%05d_%s" % (rec.record_id, name))
            written.append(write_pgm(base + ".pgm", mag))
            err = np.abs(mag - truth) * err_scale
            written.append(write_pgm(base + "_err.pgm", err))
            r = metrics(mag, truth, rec.brain_mask)
            rows.append((rec.record_id, name, "%.6f" % r.psnr,
                         "%.6f" % r.ssim, r.n_pixels))
    csv_path = os.path.join(out_dir, "report.csv")
    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(("record_id", "panel", "psnr", "ssim", "n_pixels"))
        wr.writerows(rows)
    written.append(csv_path)
    return written
