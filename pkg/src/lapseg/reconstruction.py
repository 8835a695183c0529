"""High-resolution score synthesis from per-class basis functions.

A bank holds K basis functions per class with support 2s applied at stride
s (overlap factor 2). Coefficients predicted from a low-resolution feature
map are expanded into class scores by summing overlapping basis stamps:
coefficient (p, q) contributes its class basis, scaled, to the output block
rows s*p .. s*p+2s-1 and the matching columns. Banks are initialized from a
PCA dictionary fit to binary segment patches.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .rng import Stream
from .ops import ConvSpec, conv2d
from .tensor import check_finite

log = logging.getLogger(__name__)


@dataclass
class BasisBank:
    stride: int                # s: upsampling factor
    functions: np.ndarray      # (2s, 2s, K, C)

    def __post_init__(self):
        s = self.stride
        if s < 1:
            raise ValueError("stride must be >= 1")
        if self.functions.shape[:2] != (2 * s, 2 * s):
            raise ValueError(
                f"basis support {self.functions.shape[:2]} must be exactly {(2 * s, 2 * s)}")
        check_finite(self.functions, "basis bank")

    @property
    def bases_per_class(self):
        return self.functions.shape[2]

    @property
    def num_classes(self):
        return self.functions.shape[3]


@dataclass
class CoefficientHead:
    weight: np.ndarray   # (K*C, F, 5, 5)
    bias: np.ndarray     # (K*C,)
    bases_per_class: int
    num_classes: int

    def spec(self):
        kc, f = self.weight.shape[0], self.weight.shape[1]
        return ConvSpec(self.weight.shape[2], self.weight.shape[3], f, kc, stride=1, pad=2)


def init_coefficient_head(feature_channels, bases_per_class, num_classes,
                          seed=0, name="head", dtype=np.float32):
    """Near-zero start: uniform +-1e-3 weights, zero bias."""
    st = Stream(seed, name)
    kc = bases_per_class * num_classes
    w = ((st.uniform((kc, feature_channels, 5, 5)) * 2.0 - 1.0) * 1e-3).astype(dtype)
    b = np.zeros(kc, dtype=dtype)
    return CoefficientHead(weight=w, bias=b, bases_per_class=bases_per_class,
                           num_classes=num_classes)


def predict_coefficients(features, head, *, return_cols=False):
    """5x5 linear convolution, reshaped to (N, C, K, h, w).

    Output channel c*K + k holds basis k of class c (K consecutive channels
    per class).
    """
    out = conv2d(features, head.weight, head.bias, head.spec(), return_cols=return_cols)
    if return_cols:
        out, cols = out
    n, _, h, w = out.shape
    out = out.reshape(n, head.num_classes, head.bases_per_class, h, w)
    return (out, cols) if return_cols else out


def _uv_views(coeffs_padded, h, w, u, v):
    return coeffs_padded[:, :, :, 1 - u:1 - u + h, 1 - v:1 - v + w]


def reconstruct(coeffs, bank):
    """Synthesize class scores (N, C, s*h, s*w) from coefficients (N, C, K, h, w)."""
    n, c, k, h, w = coeffs.shape
    s = bank.stride
    if (k, c) != (bank.bases_per_class, bank.num_classes):
        raise ValueError(
            f"coefficients are K={k}, C={c} but bank is K={bank.bases_per_class}, "
            f"C={bank.num_classes}")
    bkc = bank.functions.transpose(2, 3, 0, 1).astype(coeffs.dtype)   # (K, C, 2s, 2s)
    cp = np.pad(coeffs, ((0, 0), (0, 0), (0, 0), (1, 0), (1, 0)))
    blocks = np.zeros((n, c, h, s, w, s), dtype=coeffs.dtype)
    for u in (0, 1):
        for v in (0, 1):
            xs = _uv_views(cp, h, w, u, v)
            bs = bkc[:, :, s * u:s * (u + 1), s * v:s * (v + 1)]
            xm = xs.transpose(1, 0, 3, 4, 2).reshape(c, n * h * w, k)
            bm = bs.transpose(1, 0, 2, 3).reshape(c, k, s * s)
            t = (xm @ bm).reshape(c, n, h, w, s, s)
            blocks += t.transpose(1, 0, 2, 4, 3, 5)
    out = blocks.reshape(n, c, s * h, s * w)
    return check_finite(out, "reconstruct output")


def reconstruct_backward(coeffs, bank, grad_scores):
    """Exact adjoints of reconstruct; returns (grad_coeffs, grad_functions)."""
    n, c, k, h, w = coeffs.shape
    s = bank.stride
    if grad_scores.shape != (n, c, s * h, s * w):
        raise ValueError(f"grad shape {grad_scores.shape}, expected {(n, c, s * h, s * w)}")
    gb = grad_scores.reshape(n, c, h, s, w, s).transpose(1, 0, 2, 4, 3, 5) \
        .reshape(c, n * h * w, s * s)
    bkc = bank.functions.transpose(2, 3, 0, 1).astype(coeffs.dtype)
    gcp = np.zeros((n, c, k, h + 1, w + 1), dtype=coeffs.dtype)
    gfun = np.zeros_like(bank.functions)
    cp = np.pad(coeffs, ((0, 0), (0, 0), (0, 0), (1, 0), (1, 0)))
    for u in (0, 1):
        for v in (0, 1):
            bm = bkc[:, :, s * u:s * (u + 1), s * v:s * (v + 1)] \
                .transpose(1, 0, 2, 3).reshape(c, k, s * s)
            gx = (gb @ bm.transpose(0, 2, 1)).reshape(c, n, h, w, k).transpose(1, 0, 4, 2, 3)
            gcp[:, :, :, 1 - u:1 - u + h, 1 - v:1 - v + w] += gx
            xs = _uv_views(cp, h, w, u, v)
            xm = xs.transpose(1, 0, 3, 4, 2).reshape(c, n * h * w, k)
            gB = np.matmul(xm.transpose(0, 2, 1), gb)   # (c, k, s*s)
            gfun[s * u:s * (u + 1), s * v:s * (v + 1)] += \
                gB.reshape(c, k, s, s).transpose(2, 3, 1, 0)
    grad_coeffs = np.ascontiguousarray(gcp[:, :, :, 1:, 1:])
    return grad_coeffs, gfun


# ---------------------------------------------------------------------------
# basis dictionaries

def fit_basis_pca(patch_set, k):
    """Top-k left singular vectors of the uncentered patch matrix.

    Components come back unit-norm, ordered by decreasing singular value,
    sign-fixed so the largest-magnitude entry is positive. Fewer patches
    than k yields fewer components (logged, not fatal).
    """
    patches = patch_set.patches
    n = patches.shape[0]
    if n == 0:
        log.warning("class %d has no patches; returning empty basis", patch_set.class_id)
        return np.zeros((0,) + patches.shape[1:], dtype=np.float64), np.zeros(0)
    ps = patches.shape[1]
    m = patches.reshape(n, ps * ps).astype(np.float64).T    # (d, n), uncentered
    u_mat, sv, _ = np.linalg.svd(m, full_matrices=False)
    k_eff = min(k, n)
    if k_eff < k:
        log.warning("class %d: only %d patches for %d requested components",
                    patch_set.class_id, n, k)
    comps = u_mat[:, :k_eff].T.reshape(k_eff, ps, ps).copy()
    for i in range(k_eff):
        j = np.argmax(np.abs(comps[i]))
        if comps[i].flat[j] < 0:
            comps[i] = -comps[i]
    return comps, sv[:k_eff]


def downsample_basis(components, target):
    """Block-average 32x32 components down to target x target, re-normalized."""
    k, ps, _ = components.shape
    if target > ps:
        raise ValueError(f"target {target} exceeds source resolution {ps}")
    if ps % target:
        raise ValueError(f"{ps} is not divisible by target {target}")
    f = ps // target
    small = components.reshape(k, target, f, target, f).mean(axis=(2, 4))
    out = small.copy()
    for i in range(k):
        nrm = np.linalg.norm(small[i])
        if nrm > 1e-12:
            out[i] = small[i] / nrm
    return out


def tent_basis(s, dtype=np.float64):
    """Separable tent with 2s support; stride-s translates tile to 1 in the interior."""
    t = np.arange(2 * s, dtype=dtype)
    profile = 1.0 - np.abs(t - (s - 0.5)) / s
    return np.outer(profile, profile)


def build_bank(stride, bases_per_class, num_classes, class_components=None,
               dtype=np.float32):
    """Assemble a BasisBank from per-class PCA components (padded with zeros).

    class_components: list indexed by class of (k_i, 2s, 2s) arrays, already
    at bank resolution. Classes with missing components fall back to a tent
    for basis 0 and zeros elsewhere.
    """
    s2 = 2 * stride
    funcs = np.zeros((s2, s2, bases_per_class, num_classes), dtype=dtype)
    tent = tent_basis(stride)
    tent = tent / np.linalg.norm(tent)
    for c in range(num_classes):
        comps = None
        if class_components is not None and c < len(class_components):
            comps = class_components[c]
        if comps is None or comps.shape[0] == 0:
            funcs[:, :, 0, c] = tent.astype(dtype)
            continue
        kc = min(bases_per_class, comps.shape[0])
        funcs[:, :, :kc, c] = comps[:kc].transpose(1, 2, 0).astype(dtype)
        if kc < bases_per_class:
            log.warning("class %d bank padded with %d zero bases",
                        c, bases_per_class - kc)
    return BasisBank(stride=stride, functions=funcs)
