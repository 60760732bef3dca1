"""Dense layer primitives: forward and backward passes on (C, H, W) arrays.

All functions are pure: a forward pass returns ``(output, ctx)`` where ``ctx``
carries whatever the matching backward pass needs (inputs, masks, argmax
maps).  Arrays are numpy ndarrays in channel-major layout; float32 by
default, float64 for gradient checking.  Any non-finite value produced by an
operation raises ``NonFiniteError`` instead of propagating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


def ensure_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite values in result")
    return arr


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a (transposed) convolution.

    ``output_pad`` is meaningful for transposed convolutions only and must be
    smaller than the stride.
    """

    kernel_h: int
    kernel_w: int
    stride: int
    pad_h: int
    pad_w: int
    in_channels: int
    out_channels: int
    output_pad: int = 0

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ShapeError(f"kernel must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        if not 0 <= self.output_pad < self.stride:
            raise ShapeError(
                f"output_pad {self.output_pad} must be in [0, stride={self.stride})")

    @classmethod
    def same(cls, kernel, in_channels, out_channels):
        """Stride-1 'same' convolution; requires an odd kernel."""
        if kernel % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel, got {kernel}")
        p = (kernel - 1) // 2
        return cls(kernel, kernel, 1, p, p, in_channels, out_channels)

    @classmethod
    def upscale2x(cls, kernel, in_channels, out_channels):
        """Stride-2 transposed-conv geometry that exactly doubles H and W."""
        p = (kernel - 1) // 2
        return cls(kernel, kernel, 2, p, p, in_channels, out_channels, output_pad=1)

    def conv_out_hw(self, h, w):
        ho = (h + 2 * self.pad_h - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.pad_w - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel "
                             f"{self.kernel_h}x{self.kernel_w} pad {self.pad_h},{self.pad_w}")
        return ho, wo

    def tconv_out_hw(self, h, w):
        ho = (h - 1) * self.stride - 2 * self.pad_h + self.kernel_h + self.output_pad
        wo = (w - 1) * self.stride - 2 * self.pad_w + self.kernel_w + self.output_pad
        if ho < 1 or wo < 1:
            raise ShapeError(f"transposed conv output would be {ho}x{wo}")
        return ho, wo


def _check_chw(x, op):
    if x.ndim != 3:
        raise ShapeError(f"{op}: expected (C, H, W) input, got shape {x.shape}")


def _pad_hw(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw)))


def _im2col(x, kh, kw, stride, ho, wo):
    """(C, H, W) -> (C*kh*kw, ho*wo) patch matrix for a stride-s convolution."""
    c = x.shape[0]
    sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(c, kh, kw, ho, wo),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return windows.reshape(c * kh * kw, ho * wo)


def _col2im(cols, c, h, w, kh, kw, stride, ho, wo):
    """Adjoint of _im2col: scatter-add patch columns back into (C, H, W)."""
    out = np.zeros((c, h, w), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + ho * stride:stride, b:b + wo * stride:stride] += cols[:, a, b]
    return out


# ---------------------------------------------------------------- convolution

def conv2d_forward(x, w, b, spec: ConvSpec):
    """Cross-correlation of x (C_in,H,W) with w (C_out,C_in,kh,kw) plus bias."""
    _check_chw(x, "conv2d")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"conv2d: input has {x.shape[0]} channels, "
                         f"spec expects {spec.in_channels}")
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"conv2d: weights shaped {w.shape}, spec wants "
                         f"({spec.out_channels},{spec.in_channels},"
                         f"{spec.kernel_h},{spec.kernel_w})")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"conv2d: bias shaped {b.shape}, expected ({spec.out_channels},)")
    h, wd = x.shape[1:]
    ho, wo = spec.conv_out_hw(h, wd)
    xp = _pad_hw(x, spec.pad_h, spec.pad_w)
    cols = np.ascontiguousarray(_im2col(xp, spec.kernel_h, spec.kernel_w,
                                        spec.stride, ho, wo))
    y = w.reshape(spec.out_channels, -1) @ cols
    y += b[:, None]
    y = y.reshape(spec.out_channels, ho, wo)
    ensure_finite(y, "conv2d")
    ctx = (cols, w, (h, wd), spec)
    return y, ctx


def conv2d_backward(grad_out, ctx, need_input_grad=True, need_weight_grad=True):
    """Gradients of conv2d_forward; returns (grad_x, grad_w, grad_b)."""
    cols, w, (h, wd), spec = ctx
    ho, wo = spec.conv_out_hw(h, wd)
    if grad_out.shape != (spec.out_channels, ho, wo):
        raise ShapeError(f"conv2d backward: grad shaped {grad_out.shape}, "
                         f"expected ({spec.out_channels},{ho},{wo})")
    g = grad_out.reshape(spec.out_channels, -1)
    grad_w = grad_b = grad_x = None
    if need_weight_grad:
        grad_w = (g @ cols.T).reshape(w.shape)
        grad_b = g.sum(axis=1)
        ensure_finite(grad_w, "conv2d backward")
    if need_input_grad:
        dcols = w.reshape(spec.out_channels, -1).T @ g
        hp, wp = h + 2 * spec.pad_h, wd + 2 * spec.pad_w
        dxp = _col2im(dcols, spec.in_channels, hp, wp,
                      spec.kernel_h, spec.kernel_w, spec.stride, ho, wo)
        grad_x = dxp[:, spec.pad_h:spec.pad_h + h, spec.pad_w:spec.pad_w + wd]
        ensure_finite(grad_x, "conv2d backward")
    return grad_x, grad_w, grad_b


# ----------------------------------------------------- transposed convolution

def tconv2d_forward(x, w, b, spec: ConvSpec):
    """Transposed convolution (adjoint of conv2d with the same spec).

    Weights are oriented (C_in, C_out, kh, kw).  Output spatial size is
    (H-1)*stride - 2*pad + kernel + output_pad per axis.
    """
    _check_chw(x, "tconv2d")
    if x.shape[0] != spec.in_channels:
        raise ShapeError(f"tconv2d: input has {x.shape[0]} channels, "
                         f"spec expects {spec.in_channels}")
    if w.shape != (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w):
        raise ShapeError(f"tconv2d: weights shaped {w.shape}, spec wants "
                         f"({spec.in_channels},{spec.out_channels},"
                         f"{spec.kernel_h},{spec.kernel_w})")
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"tconv2d: bias shaped {b.shape}, expected ({spec.out_channels},)")
    h, wd = x.shape[1:]
    ho, wo = spec.tconv_out_hw(h, wd)
    # Scatter into the "full" grid (stride-spaced windows), then crop padding.
    # op extra zeros on the bottom/right keep the crop in bounds.
    full_h = (h - 1) * spec.stride + spec.kernel_h + spec.output_pad
    full_w = (wd - 1) * spec.stride + spec.kernel_w + spec.output_pad
    cols = w.reshape(spec.in_channels, -1).T @ x.reshape(spec.in_channels, -1)
    full = _col2im(cols, spec.out_channels, full_h, full_w,
                   spec.kernel_h, spec.kernel_w, spec.stride, h, wd)
    y = full[:, spec.pad_h:spec.pad_h + ho, spec.pad_w:spec.pad_w + wo]
    y = y + b[:, None, None]
    ensure_finite(y, "tconv2d")
    ctx = (x, w, spec)
    return y, ctx


def tconv2d_backward(grad_out, ctx, need_input_grad=True, need_weight_grad=True):
    """Gradients of tconv2d_forward; returns (grad_x, grad_w, grad_b)."""
    x, w, spec = ctx
    h, wd = x.shape[1:]
    ho, wo = spec.tconv_out_hw(h, wd)
    if grad_out.shape != (spec.out_channels, ho, wo):
        raise ShapeError(f"tconv2d backward: grad shaped {grad_out.shape}, "
                         f"expected ({spec.out_channels},{ho},{wo})")
    full_h = (h - 1) * spec.stride + spec.kernel_h + spec.output_pad
    full_w = (wd - 1) * spec.stride + spec.kernel_w + spec.output_pad
    gfull = np.zeros((spec.out_channels, full_h, full_w), dtype=grad_out.dtype)
    gfull[:, spec.pad_h:spec.pad_h + ho, spec.pad_w:spec.pad_w + wo] = grad_out
    cols = np.ascontiguousarray(_im2col(gfull, spec.kernel_h, spec.kernel_w,
                                        spec.stride, h, wd))
    grad_x = grad_w = grad_b = None
    if need_input_grad:
        grad_x = (w.reshape(spec.in_channels, -1) @ cols).reshape(x.shape)
        ensure_finite(grad_x, "tconv2d backward")
    if need_weight_grad:
        grad_w = (x.reshape(spec.in_channels, -1) @ cols.T).reshape(w.shape)
        grad_b = grad_out.sum(axis=(1, 2))
        ensure_finite(grad_w, "tconv2d backward")
    return grad_x, grad_w, grad_b


# -------------------------------------------------------------------- pooling

def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2; also returns the argmax map."""
    _check_chw(x, "maxpool2x2")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: spatial extents must be even, got {h}x{w}")
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(
        c, h // 2, w // 2, 4)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    ensure_finite(y, "maxpool2x2")
    return y, (idx, x.shape)


def maxpool2x2_backward(grad_out, ctx):
    idx, in_shape = ctx
    c, h, w = in_shape
    if grad_out.shape != (c, h // 2, w // 2):
        raise ShapeError(f"maxpool2x2 backward: grad shaped {grad_out.shape}, "
                         f"expected ({c},{h // 2},{w // 2})")
    scatter = np.zeros((c, h // 2, w // 2, 4), dtype=grad_out.dtype)
    np.put_along_axis(scatter, idx[..., None], grad_out[..., None], axis=3)
    return scatter.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)


# ---------------------------------------------------------------- activations

def pointwise_activation(x, kind):
    """Elementwise ReLU or sigmoid; returns (y, ctx) for the backward pass."""
    if kind == "relu":
        y = np.maximum(x, 0)
        ctx = ("relu", x > 0)
    elif kind == "sigmoid":
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        y = out
        ctx = ("sigmoid", y)
    else:
        raise ValueError(f"unknown activation kind {kind!r}")
    ensure_finite(y, kind)
    return y, ctx


def pointwise_activation_backward(grad_out, ctx):
    kind, cached = ctx
    if kind == "relu":
        return grad_out * cached
    return grad_out * cached * (1.0 - cached)


# -------------------------------------------------------------------- dropout

def dropout(x, rate, training, rng=None):
    """Inverted dropout; identity at inference.  Returns (y, mask_ctx)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    y = np.where(keep, x * scale, x.dtype.type(0.0))
    ensure_finite(y, "dropout")
    return y, (keep, scale)


def dropout_backward(grad_out, ctx):
    if ctx is None:
        return grad_out
    keep, scale = ctx
    return np.where(keep, grad_out * scale, grad_out.dtype.type(0.0))


# ----------------------------------------------------------------- upsampling

def upsample_nearest(x, factor):
    """Replicate every pixel into a factor x factor block."""
    _check_chw(x, "upsample_nearest")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def upsample_nearest_backward(grad_out, factor):
    if factor == 1:
        return grad_out
    c, h, w = grad_out.shape
    return grad_out.reshape(c, h // factor, factor, w // factor, factor).sum(axis=(2, 4))


# -------------------------------------------------------------- concatenation

def concat_depth(inputs):
    """Stack feature maps along the channel axis; spatial sizes must agree."""
    if not inputs:
        raise ShapeError("concat_depth: no inputs")
    hw = inputs[0].shape[1:]
    for i, t in enumerate(inputs):
        _check_chw(t, "concat_depth")
        if t.shape[1:] != hw:
            raise ShapeError(f"concat_depth: input {i} is {t.shape[1]}x{t.shape[2]}, "
                             f"expected {hw[0]}x{hw[1]}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=0)


def concat_depth_backward(grad_out, channel_counts):
    """Split the gradient back into the per-input channel slices."""
    if grad_out.shape[0] != sum(channel_counts):
        raise ShapeError(f"concat_depth backward: grad has {grad_out.shape[0]} channels, "
                         f"inputs sum to {sum(channel_counts)}")
    splits = np.cumsum(channel_counts)[:-1]
    return np.split(grad_out, splits, axis=0)
