"""The three trained networks and their single-image surfaces.

SynthNet   cross-contrast synthesis, a small U-Net from the reference
           contrast to a target-contrast estimate (one per branch).
RegNet     rigid registration, a strided conv stack regressing
           (tx, ty, theta) and warping the moving image with it.  Both
           branches share one parameter set via
           shared_registration_binding.
ReconNet   reconstruction, a U-Net over the fused input channels whose
           output passes through data consistency.

Networks run on [N, 2, H, W] re/im channel tensors; the *_forward
functions wrap single ComplexImage / KSpaceGrid values.  Parameters
live in a ParamSet; layers look their tensors up by name at call time,
which is what makes parameter sharing a pointer swap.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import (ParamSet, Tensor, batchnorm2d, concat_channels,
                       conv2d, fully_connected, maxpool2x2, relu, reshape,
                       upsample2x, warp_rigid)
from .diffcore.init import bn_param, conv_param, fc_param
from .errors import ParamError, ShapeError, ValidationError
from .fourier import (ComplexImage, KSpaceGrid, channels_to_pair,
                      fft2c_channels, ifft2c_channels, pair_to_channels)
from .acquisition import data_consistency_channels
from .geometry import RigidParams, apply_rigid, compose


@dataclass(frozen=True)
class SynthNetConfig:
    in_channels: int = 2
    out_channels: int = 2
    base_channels: int = 16
    depth: int = 3

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class RegNetConfig:
    in_size: int = 64
    channels: tuple = (16, 32, 32)
    fc_hidden: int = 64

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass(frozen=True)
class ReconNetConfig:
    in_channels: int = 4
    out_channels: int = 2
    base_channels: int = 16
    depth: int = 3
    dc_enabled: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _ensure_conv(ps, name, co, ci, k, rng):
    wname = name + ".w"
    if wname in ps:
        if ps[wname].shape != (co, ci, k, k):
            raise ParamError("loaded %r has shape %s, expected %s"
                             % (wname, ps[wname].shape, (co, ci, k, k)))
        return
    conv_param(ps, name, co, ci, k, rng)


def _ensure_bn(ps, name, c):
    gname = name + ".gamma"
    if gname in ps:
        if ps[gname].shape != (c,):
            raise ParamError("loaded %r has shape %s, expected (%d,)"
                             % (gname, ps[gname].shape, c))
        return
    bn_param(ps, name, c)


def _ensure_fc(ps, name, n_out, n_in, rng, zero_init=False):
    wname = name + ".w"
    if wname in ps:
        if ps[wname].shape != (n_out, n_in):
            raise ParamError("loaded %r has shape %s, expected %s"
                             % (wname, ps[wname].shape, (n_out, n_in)))
        return
    fc_param(ps, name, n_out, n_in, rng, zero_init=zero_init)


class _ConvBNRelu:
    """conv 3x3 -> batchnorm -> relu, parameters fetched by name at
    call time so rebinding the owning net's ParamSet just works."""

    def __init__(self, net, name, ci, co, rng):
        self.net = net
        self.name = name
        _ensure_conv(net.params, name + ".conv", co, ci, 3, rng)
        _ensure_bn(net.params, name + ".bn", co)

    def __call__(self, x):
        ps = self.net.params
        n = self.name
        y = conv2d(x, ps[n + ".conv.w"], ps[n + ".conv.b"])
        y = batchnorm2d(y, ps[n + ".bn.gamma"], ps[n + ".bn.beta"],
                        ps[n + ".bn.running_mean"],
                        ps[n + ".bn.running_var"], self.net.training)
        return relu(y)


class _Network:
    """Shared constructor: build fresh params or bind to loaded ones."""

    def __init__(self, config, params=None, rng=None):
        self.config = config
        self.training = True
        fresh = params is None
        self.params = ParamSet() if fresh else params
        self._build(rng if rng is not None else np.random.default_rng(0))
        if fresh:
            self.params.freeze()

    def train_mode(self):
        self.training = True
        return self

    def eval_mode(self):
        self.training = False
        return self


class _UNet:
    """Encoder-decoder with skip concats; depth resolution levels,
    one conv block per encoder level, two per decoder level."""

    def __init__(self, net, prefix, cin, cout, base, depth, rng):
        if depth < 2:
            raise ValidationError("unet depth must be >= 2, got %d" % depth)
        self.net = net
        self.prefix = prefix
        self.depth = depth
        chans = [base * 2 ** l for l in range(depth)]
        self.enc = []
        for l in range(depth):
            ci = cin if l == 0 else chans[l - 1]
            self.enc.append(_ConvBNRelu(net, "%senc%d" % (prefix, l),
                                        ci, chans[l], rng))
        self.up = []
        self.dec = []
        for l in range(depth - 2, -1, -1):
            self.up.append(_ConvBNRelu(net, "%sup%d" % (prefix, l),
                                       chans[l + 1], chans[l], rng))
            self.dec.append(_ConvBNRelu(net, "%sdec%d" % (prefix, l),
                                        2 * chans[l], chans[l], rng))
        _ensure_conv(net.params, prefix + "out", cout, base, 3, rng)

    def __call__(self, x):
        div = 2 ** (self.depth - 1)
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeError("unet input %dx%d not divisible by %d"
                             % (x.shape[2], x.shape[3], div))
        skips = []
        h = x
        for l, blk in enumerate(self.enc):
            if l > 0:
                h = maxpool2x2(h)
            h = blk(h)
            skips.append(h)
        for i, l in enumerate(range(self.depth - 2, -1, -1)):
            h = upsample2x(h)
            h = self.up[i](h)
            h = concat_channels([h, skips[l]])
            h = self.dec[i](h)
        ps = self.net.params
        return conv2d(h, ps[self.prefix + "out.w"], ps[self.prefix + "out.b"])


class SynthNet(_Network):
    """Reference contrast -> synthetic target contrast."""

    def _build(self, rng):
        c = self.config
        self.unet = _UNet(self, "", c.in_channels, c.out_channels,
                          c.base_channels, c.depth, rng)

    def __call__(self, x):
        if x.shape[1] != self.config.in_channels:
            raise ShapeError("synthesis net expects %d channels, got %d"
                             % (self.config.in_channels, x.shape[1]))
        return self.unet(x)


class ReconNet(_Network):
    """Fused input channels -> raw reconstruction (pre data consistency)."""

    def _build(self, rng):
        c = self.config
        self.unet = _UNet(self, "", c.in_channels, c.out_channels,
                          c.base_channels, c.depth, rng)

    def __call__(self, x):
        if x.shape[1] != self.config.in_channels:
            raise ShapeError("reconstruction net expects %d channels, got %d"
                             % (self.config.in_channels, x.shape[1]))
        return self.unet(x)


class RegNet(_Network):
    """Moving + fixed image -> rigid params, plus the warped moving image.

    Four conv/BN/relu/pool stages then two fully connected layers; the
    final layer is zero-initialised so an untrained net predicts the
    identity transform.
    """

    def _build(self, rng):
        c = self.config
        if c.in_size % 2 ** len(c.channels):
            raise ValidationError("reg net input size %d not divisible by %d"
                                  % (c.in_size, 2 ** len(c.channels)))
        self.blocks = []
        ci = 4
        for i, co in enumerate(c.channels):
            self.blocks.append(_ConvBNRelu(self, "enc%d" % i, ci, co, rng))
            ci = co
        side = c.in_size // 2 ** len(c.channels)
        self.flat_dim = side * side * c.channels[-1]
        _ensure_fc(self.params, "fc1", c.fc_hidden, self.flat_dim, rng)
        _ensure_fc(self.params, "fc2", 3, c.fc_hidden, rng, zero_init=True)

    def __call__(self, moving, fixed):
        if moving.shape != fixed.shape:
            raise ShapeError("moving %s and fixed %s disagree"
                             % (moving.shape, fixed.shape))
        if moving.shape[1] != 2:
            raise ShapeError("registration inputs need 2 channels, got %d"
                             % moving.shape[1])
        if moving.shape[2] != self.config.in_size or \
                moving.shape[3] != self.config.in_size:
            raise ShapeError("reg net is sized for %dx%d inputs, got %dx%d"
                             % (self.config.in_size, self.config.in_size,
                                moving.shape[2], moving.shape[3]))
        h = concat_channels([moving, fixed])
        for blk in self.blocks:
            h = maxpool2x2(blk(h))
        h = reshape(h, (h.shape[0], self.flat_dim))
        ps = self.params
        h = relu(fully_connected(h, ps["fc1.w"], ps["fc1.b"]))
        p = fully_connected(h, ps["fc2.w"], ps["fc2.b"])
        warped = warp_rigid(moving, p)
        return p, warped


def shared_registration_binding(g_image, g_kspace):
    """Make both registration branches read and update one ParamSet.

    Returns the shared set (the image branch's).  Layer lookups go
    through net.params at call time, so swapping the pointer is enough.
    """
    if g_image.config != g_kspace.config:
        raise ValidationError("cannot share registration params across "
                              "different configs: %s vs %s"
                              % (g_image.config, g_kspace.config))
    g_kspace.params = g_image.params
    return g_image.params


def synth_forward(net, src):
    """Single-image synthesis; the output keeps the input's kind."""
    kind = type(src)
    if kind not in (ComplexImage, KSpaceGrid):
        raise ValidationError("synth_forward needs a ComplexImage or "
                              "KSpaceGrid, got %s" % kind.__name__)
    x = pair_to_channels(src)
    return channels_to_pair(net(x), kind)


def reg_forward(net, moving, fixed):
    """Single-image registration: (RigidParams, warped ComplexImage)."""
    for img, nm in ((moving, "moving"), (fixed, "fixed")):
        if not isinstance(img, ComplexImage):
            raise ValidationError("reg_forward %s must be a ComplexImage"
                                  % nm)
    p, warped = net(pair_to_channels(moving), pair_to_channels(fixed))
    est = RigidParams(float(p.data[0, 0]), float(p.data[0, 1]),
                      float(p.data[0, 2]))
    return est, channels_to_pair(warped, ComplexImage)


def register_refined(net, moving, fixed, n_iters=3):
    """Registration with iterative compositional refinement.

    Re-runs the net on the moving image warped by the running estimate
    and composes the residual prediction, so later passes see a nearly
    aligned pair where the regression is most accurate.  The returned
    warp resamples the original moving image once.
    """
    if n_iters < 1:
        raise ValidationError("n_iters must be >= 1, got %r" % n_iters)
    est, warped = reg_forward(net, moving, fixed)
    for _ in range(n_iters - 1):
        dp, _ = reg_forward(net, apply_rigid(moving, est), fixed)
        est = compose(est, dp)
    return est, apply_rigid(moving, est)


def _kspace_channels_const(y_u):
    data = np.stack([y_u.real.data, y_u.imag.data])[None]
    return Tensor(data)


def recon_forward(net, fused_input, y_u, mask):
    """Single-image reconstruction with data consistency.

    fused_input is one ComplexImage/KSpaceGrid or a list of them (all
    the same kind); the kind selects the branch.  The image branch
    round-trips its estimate through k-space for consistency with the
    measured rows; the k-space branch applies consistency directly.
    """
    inputs = fused_input if isinstance(fused_input, (list, tuple)) \
        else [fused_input]
    kinds = {type(v) for v in inputs}
    if len(kinds) != 1 or kinds & {ComplexImage, KSpaceGrid} != kinds:
        raise ValidationError("recon_forward inputs must be all ComplexImage "
                              "or all KSpaceGrid")
    kind = kinds.pop()
    x = concat_channels([pair_to_channels(v) for v in inputs])
    raw = net(x)
    if not net.config.dc_enabled:
        return channels_to_pair(raw, kind)
    y_ch = _kspace_channels_const(y_u)
    if kind is ComplexImage:
        k_pred = fft2c_channels(raw)
        k_dc = data_consistency_channels(k_pred, y_ch, mask)
        return channels_to_pair(ifft2c_channels(k_dc), ComplexImage)
    k_dc = data_consistency_channels(raw, y_ch, mask)
    return channels_to_pair(k_dc, KSpaceGrid)
