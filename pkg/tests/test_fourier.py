"""Centered orthonormal Fourier ops against a brute-force DFT oracle."""

import numpy as np
import pytest

from ddmc.diffcore import Tensor, grad_check, mse
from ddmc.errors import ShapeError
from ddmc.fourier import (ComplexImage, KSpaceGrid, channels_to_pair,
                          fft2c, fft2c_channels, ifft2c, ifft2c_channels,
                          pair_to_channels)


def dft2_centered_loops(z):
    """Naive centered orthonormal DFT, the oracle.

    With centred indices p = i - H//2 (and the matching output offset),
    entry (k, l) is sum z[p, q] exp(-2πi(kp/H + lq/W)) / sqrt(HW).
    """
    h, w = z.shape
    out = np.zeros((h, w), np.complex128)
    ii = np.arange(h) - h // 2
    jj = np.arange(w) - w // 2
    for k in range(h):
        for l in range(w):
            kk = k - h // 2
            ll = l - w // 2
            phase = np.exp(-2j * np.pi * (kk * ii[:, None] / h
                                          + ll * jj[None, :] / w))
            out[k, l] = (z * phase).sum() / np.sqrt(h * w)
    return out


def random_image(rng, h=8, w=8, dtype=np.float64):
    re = rng.standard_normal((h, w)).astype(dtype)
    im = rng.standard_normal((h, w)).astype(dtype)
    return ComplexImage.from_arrays(re, im)


def test_fft_matches_naive_dft():
    rng = np.random.default_rng(0)
    img = random_image(rng, 8, 8)
    k = fft2c(img)
    want = dft2_centered_loops(img.real.data + 1j * img.imag.data)
    got = k.real.data + 1j * k.imag.data
    assert np.max(np.abs(got - want)) < 1e-10


def test_roundtrip_float32():
    rng = np.random.default_rng(1)
    img = random_image(rng, 64, 64, np.float32)
    back = ifft2c(fft2c(img))
    assert back.real.data.dtype == np.float32
    err = max(np.max(np.abs(back.real.data - img.real.data)),
              np.max(np.abs(back.imag.data - img.imag.data)))
    assert err < 1e-6


def test_parseval_energy_preserved():
    rng = np.random.default_rng(2)
    img = random_image(rng, 32, 16)
    k = fft2c(img)
    e_img = np.sum(img.real.data**2 + img.imag.data**2)
    e_k = np.sum(k.real.data**2 + k.imag.data**2)
    assert abs(e_img - e_k) / e_img < 1e-6


def test_dc_component_is_scaled_mean():
    # centered layout puts the zero frequency at (H//2, W//2)
    rng = np.random.default_rng(3)
    img = random_image(rng, 8, 8)
    k = fft2c(img)
    z = img.real.data + 1j * img.imag.data
    want = z.sum() / np.sqrt(z.size)
    got = k.real.data[4, 4] + 1j * k.imag.data[4, 4]
    assert abs(got - want) < 1e-10


def test_impulse_at_centre_is_flat_spectrum():
    re = np.zeros((8, 8))
    re[4, 4] = 1.0
    k = fft2c(ComplexImage.from_arrays(re, np.zeros_like(re)))
    assert np.max(np.abs(k.real.data - 1.0 / 8.0)) < 1e-12
    assert np.max(np.abs(k.imag.data)) < 1e-12


def test_pair_transform_gradients():
    rng = np.random.default_rng(4)
    re = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
    im = Tensor(rng.standard_normal((8, 8)), requires_grad=True)
    tr = Tensor(rng.standard_normal((8, 8)))
    ti = Tensor(rng.standard_normal((8, 8)))

    def fn(*_):
        k = fft2c(ComplexImage(re, im))
        back = ifft2c(k)
        return mse(back.real, tr) + mse(k.imag, ti)

    assert grad_check(fn, [re, im], n_samples=40,
                      rng=np.random.default_rng(5)) < 1e-6


def test_channels_transform_gradients_and_consistency():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 2, 8, 8)), requires_grad=True)
    tgt = Tensor(rng.standard_normal((2, 2, 8, 8)))

    def fn(*_):
        return mse(ifft2c_channels(fft2c_channels(x)), tgt)

    assert grad_check(fn, [x], n_samples=40,
                      rng=np.random.default_rng(7)) < 1e-6

    # channels path agrees with the pair path
    img = ComplexImage.from_arrays(x.data[0, 0].copy(), x.data[0, 1].copy())
    k_pair = fft2c(img)
    k_ch = fft2c_channels(Tensor(x.data[:1].copy())).data
    assert np.max(np.abs(k_ch[0, 0] - k_pair.real.data)) < 1e-12
    assert np.max(np.abs(k_ch[0, 1] - k_pair.imag.data)) < 1e-12


def test_kind_discipline():
    rng = np.random.default_rng(8)
    img = random_image(rng)
    k = fft2c(img)
    assert isinstance(k, KSpaceGrid)
    assert isinstance(ifft2c(k), ComplexImage)


def test_linearity():
    rng = np.random.default_rng(10)
    x = random_image(rng)
    z = random_image(rng)
    a, b = 1.7, -0.4
    lhs = fft2c(ComplexImage.from_arrays(
        a * x.real.data + b * z.real.data,
        a * x.imag.data + b * z.imag.data)).as_complex()
    rhs = a * fft2c(x).as_complex() + b * fft2c(z).as_complex()
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_pair_channels_roundtrip():
    rng = np.random.default_rng(9)
    img = random_image(rng)
    x = pair_to_channels(img)
    assert x.shape == (1, 2, 8, 8)
    back = channels_to_pair(x, ComplexImage)
    assert np.array_equal(back.real.data, img.real.data)
    assert np.array_equal(back.imag.data, img.imag.data)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ComplexImage.from_arrays(np.zeros((4, 4)), np.zeros((4, 5)))


def test_magnitude():
    img = ComplexImage.from_arrays(np.full((2, 2), 3.0),
                                   np.full((2, 2), 4.0))
    assert np.array_equal(img.magnitude(), np.full((2, 2), 5.0))
