"""Differentiable kernel operations: convolution, pooling, resize, activations.

Every forward has an explicit backward. Inputs and outputs are 4-axis arrays
(batch x channel x height x width). All reductions run in a fixed order, so
repeated calls on identical inputs are bit-identical.
"""

from dataclasses import dataclass

import numpy as np

from .tensor import check_finite


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-d cross-correlation (no kernel flip)."""
    kh: int
    kw: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad: int = 0

    def out_hw(self, h, w):
        oh = (h + 2 * self.pad - self.kh) // self.stride + 1
        ow = (w + 2 * self.pad - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"conv output would be empty for input {h}x{w} with {self}")
        return oh, ow


def _im2col(xp, kh, kw, stride):
    """Patch matrix (N*oh*ow, C*kh*kw) from a pre-padded input."""
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, oh, ow, c, kh, kw),
        (sn, sh * stride, sw * stride, sc, sh, sw), writeable=False)
    return view.reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d(x, weights, bias, spec: ConvSpec, *, return_cols=False):
    """Cross-correlation with zero padding. weights: (outC, inC, kh, kw).

    return_cols additionally hands back the patch matrix so a following
    conv2d_backward can skip rebuilding it.
    """
    n, c, h, w = x.shape
    if c != spec.in_channels:
        raise ValueError(f"input has {c} channels, spec expects {spec.in_channels}")
    if weights.shape != (spec.out_channels, spec.in_channels, spec.kh, spec.kw):
        raise ValueError(f"weight shape {weights.shape} does not match {spec}")
    if bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape}, expected ({spec.out_channels},)")
    spec.out_hw(h, w)
    p = spec.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols, oh, ow = _im2col(xp, spec.kh, spec.kw, spec.stride)
    out = cols @ weights.reshape(spec.out_channels, -1).T
    out += bias
    out = np.ascontiguousarray(out.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))
    check_finite(out, "conv2d output")
    return (out, cols) if return_cols else out


def conv2d_backward(x, weights, spec: ConvSpec, grad_out, *, cols=None,
                    need_input_grad=True):
    """Exact gradients of conv2d. Returns (grad_x, grad_weights, grad_bias).

    need_input_grad=False skips the input gradient (returned as None) for
    layers whose input is not differentiated further.
    """
    n, c, h, w = x.shape
    oh, ow = spec.out_hw(h, w)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ValueError(f"grad shape {grad_out.shape}, expected {(n, spec.out_channels, oh, ow)}")
    p, s, kh, kw = spec.pad, spec.stride, spec.kh, spec.kw
    if cols is None:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols, _, _ = _im2col(xp, kh, kw, s)

    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, spec.out_channels)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = (g2.T @ cols).reshape(spec.out_channels, c, kh, kw)
    if not need_input_grad:
        return None, grad_w, grad_b

    # (c*kh*kw, n*oh*ow) puts each kernel offset's plane contiguous, so the
    # col2im accumulation below runs over dense blocks
    gt = (weights.reshape(spec.out_channels, -1).T @ g2.T) \
        .reshape(c, kh, kw, n, oh, ow)
    gxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            gxp[:, :, a:a + s * oh:s, b:b + s * ow:s] += gt[:, a, b]
    grad_x = gxp[:, :, p:p + h, p:p + w] if p else gxp
    return np.ascontiguousarray(grad_x.transpose(1, 0, 2, 3)), grad_w, grad_b


def maxpool2d(x, window, stride, pad=0):
    """Max pooling with -inf padding (padded cells never win).

    Returns (output, argmax) where argmax holds flat indices into x for
    backward routing.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if pad >= window:
        raise ValueError("pad must be smaller than the window")
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if window > hp or window > wp:
        raise ValueError(f"window {window} larger than padded input {hp}x{wp}")
    if window == 2 and stride == 2 and pad == 0 and h % 2 == 0 and w % 2 == 0:
        return _maxpool_2x2(x)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)),
                constant_values=-np.inf) if pad else x
    oh = (hp - window) // stride + 1
    ow = (wp - window) // stride + 1
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, oh, ow, window, window),
        (sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    flat = view.reshape(n, c, oh, ow, window * window)
    win = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, win[..., None], axis=-1)[..., 0]
    check_finite(out, "maxpool2d output")

    rr = np.arange(oh)[:, None] * stride - pad
    cc = np.arange(ow)[None, :] * stride - pad
    in_r = rr[None, None] + win // window
    in_c = cc[None, None] + win % window
    base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h * w
    argmax = base + in_r * w + in_c
    return np.ascontiguousarray(out), argmax


def _maxpool_2x2(x):
    """Fast path for the ubiquitous 2x2/stride-2 pool; ties pick the first
    cell in window row-major order, matching the generic path."""
    n, c, h, w = x.shape
    a00 = x[:, :, 0::2, 0::2]
    a01 = x[:, :, 0::2, 1::2]
    a10 = x[:, :, 1::2, 0::2]
    a11 = x[:, :, 1::2, 1::2]
    out = np.maximum(np.maximum(a00, a01), np.maximum(a10, a11))
    check_finite(out, "maxpool2d output")
    win = np.where(a00 == out, 0,
                   np.where(a01 == out, 1, np.where(a10 == out, 2, 3)))
    rr = np.arange(h // 2)[:, None] * 2
    cc = np.arange(w // 2)[None, :] * 2
    in_r = rr[None, None] + win // 2
    in_c = cc[None, None] + win % 2
    base = (np.arange(n)[:, None, None, None] * c
            + np.arange(c)[None, :, None, None]) * h * w
    return np.ascontiguousarray(out), base + in_r * w + in_c


def maxpool2d_backward(argmax, grad_out, input_shape):
    """Route gradients to the recorded argmax cells."""
    total = int(np.prod(input_shape))
    flat = np.bincount(argmax.ravel(), weights=grad_out.ravel().astype(np.float64),
                       minlength=total)
    return flat.reshape(input_shape).astype(grad_out.dtype)


def _resize_axis(n_in, n_out):
    """Half-pixel-center source coordinates with edge clamping."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, frac


def bilinear_resize(x, out_h, out_w):
    """Bilinear resample to (out_h, out_w); exact on constants and identity sizes."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    n, c, h, w = x.shape
    if out_h == h and out_w == w:
        return x.copy()
    r0, r1, fr = _resize_axis(h, out_h)
    c0, c1, fc = _resize_axis(w, out_w)
    fr = fr.astype(x.dtype)[:, None]
    fc = fc.astype(x.dtype)
    a = x[:, :, r0, :]
    rows = a + fr * (x[:, :, r1, :] - a)
    b = rows[:, :, :, c0]
    return b + fc * (rows[:, :, :, c1] - b)


_RESIZE_MATRIX_CACHE = {}


def _resize_matrix(n_in, n_out, dtype):
    key = (n_in, n_out, np.dtype(dtype).str)
    m = _RESIZE_MATRIX_CACHE.get(key)
    if m is None:
        i0, i1, f = _resize_axis(n_in, n_out)
        m = np.zeros((n_out, n_in), dtype=dtype)
        rows = np.arange(n_out)
        np.add.at(m, (rows, i0), (1.0 - f).astype(dtype))
        np.add.at(m, (rows, i1), f.astype(dtype))
        _RESIZE_MATRIX_CACHE[key] = m
    return m


def bilinear_resize_backward(grad_out, in_h, in_w):
    """Adjoint of bilinear_resize back to (in_h, in_w)."""
    n, c, oh, ow = grad_out.shape
    if oh == in_h and ow == in_w:
        return grad_out.copy()
    r = _resize_matrix(in_h, oh, grad_out.dtype)
    cm = _resize_matrix(in_w, ow, grad_out.dtype)
    return np.matmul(r.T, np.matmul(grad_out, cm))


def softmax_channels(x):
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if x.shape[1] < 1:
        raise ValueError("softmax needs at least one channel")
    check_finite(x, "softmax input")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def relu(x):
    out = np.maximum(x, 0)
    return out, x > 0


def relu_backward(mask, grad_out):
    return grad_out * mask


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(out, grad_out):
    return grad_out * out * (1.0 - out)
