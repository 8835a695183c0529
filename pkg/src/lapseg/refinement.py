"""Coarse-to-fine score fusion with multiplicative boundary gating.

The coarsest branch reconstructs a low-frequency score map; each finer
branch 2x-upsamples the running estimate, computes a boundary mask from it,
and adds its own reconstruction only where the mask is open. The mask is
treated as a constant in the backward pass.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import reconstruction
from .ops import bilinear_resize, bilinear_resize_backward, conv2d_backward, \
    softmax_channels


@dataclass(frozen=True)
class PyramidConfig:
    num_classes: int
    branch_strides: tuple = (32, 16, 8, 4)
    recon_stride: int = 4
    mask_pool: int = 9
    confidence_tau: float = 0.0
    bases_per_class: int = 10
    masking: bool = True

    def __post_init__(self):
        for a, b in zip(self.branch_strides, self.branch_strides[1:]):
            if a != 2 * b:
                raise ValueError("consecutive branch outputs must differ by exactly 2x")
        if self.branch_strides[-1] % self.recon_stride:
            raise ValueError("finest branch stride must be divisible by the recon factor")
        if self.mask_pool % 2 == 0:
            raise ValueError("mask pool size must be odd")
        if not 0.0 <= self.confidence_tau <= 1.0:
            raise ValueError("confidence threshold must lie in [0, 1]")


@dataclass
class LevelOutput:
    stride: int                      # feature stride feeding this branch
    raw: np.ndarray                  # branch reconstruction before fusion
    fused: np.ndarray                # running estimate after this branch
    mask: Optional[np.ndarray]       # boundary gate (None on the coarsest branch)


def _box_dilate(x, pool):
    """Stride-1 max filter of odd size; equals maxpool2d(x, pool, 1, (pool-1)/2).

    Separable shifted maxima instead of windowed argmax: the gate needs no
    backward routing, and this keeps the window-9 pass cheap.
    """
    r = (pool - 1) // 2
    rows = x.copy()
    for d in range(1, r + 1):
        np.maximum(rows[..., d:, :], x[..., :-d, :], out=rows[..., d:, :])
        np.maximum(rows[..., :-d, :], x[..., d:, :], out=rows[..., :-d, :])
    out = rows.copy()
    for d in range(1, r + 1):
        np.maximum(out[..., d:], rows[..., :-d], out=out[..., d:])
        np.maximum(out[..., :-d], rows[..., d:], out=out[..., :-d])
    return out


def boundary_mask(scores, pool, tau=0.0):
    """Binary per-class gate from already-upsampled coarse scores.

    A pixel is confident when its max softmax probability reaches tau. Per
    class, confident foreground and background are dilated by a stride-1 max
    pool of the given (odd) size; the mask opens where the two dilations
    overlap, plus everywhere unconfident.
    """
    if pool % 2 == 0:
        raise ValueError("pool size must be odd")
    n, c, h, w = scores.shape
    if tau <= 0.0:
        # every pixel is confident; argmax over raw scores equals argmax
        # over softmax probabilities, so skip the exp entirely
        arg = scores.argmax(axis=1)
        confident = None
    else:
        probs = softmax_channels(scores)
        arg = probs.argmax(axis=1)
        confident = probs.max(axis=1) >= tau
    onehot = arg[:, None] == np.arange(c)[None, :, None, None]
    if confident is None:
        fg = onehot.view(np.uint8)
        bg = (~onehot).view(np.uint8)
    else:
        fg = (onehot & confident[:, None]).view(np.uint8)
        bg = (~onehot & confident[:, None]).view(np.uint8)
    band = np.minimum(_box_dilate(fg, pool), _box_dilate(bg, pool))
    if confident is not None:
        band = np.maximum(band, (~confident[:, None]).view(np.uint8))
    return band.astype(scores.dtype)


def fuse_level(coarse, fine, mask):
    """coarse + mask * fine per class; bit-exact identity where the gate is shut."""
    if not (coarse.shape == fine.shape == mask.shape):
        raise ValueError(
            f"shape mismatch: coarse {coarse.shape}, fine {fine.shape}, mask {mask.shape}")
    return np.where(mask != 0, coarse + mask * fine, coarse)


def pyramid_forward(pyr, heads, banks, config, active_strides=None, fixed_masks=None):
    """Run the branch chain coarse to fine; returns (levels, cache).

    active_strides must be a coarse-first prefix of config.branch_strides
    (stage-wise training runs only the leading branches). fixed_masks, when
    given, replaces the computed gate per level; gradient verification uses
    it to hold gates at their forward values.
    """
    strides = tuple(active_strides or config.branch_strides)
    if strides != tuple(config.branch_strides[:len(strides)]):
        raise ValueError(f"active strides {strides} must be a prefix of "
                         f"{config.branch_strides}")
    levels = []
    steps = []
    fused = None
    for i, stride in enumerate(strides):
        if stride not in heads or stride not in banks:
            raise ValueError(f"missing parameters for the {stride}x branch")
        feats = pyr[stride]
        coeffs, cols = reconstruction.predict_coefficients(feats, heads[stride],
                                                           return_cols=True)
        raw = reconstruction.reconstruct(coeffs, banks[stride])
        if fused is None:
            mask = None
            new_fused = raw
        else:
            h, w = raw.shape[2], raw.shape[3]
            up = bilinear_resize(fused, h, w)
            if fixed_masks is not None and fixed_masks[i] is not None:
                mask = fixed_masks[i]
            elif config.masking:
                mask = boundary_mask(up, config.mask_pool, config.confidence_tau)
            else:
                mask = np.ones_like(raw)
            new_fused = fuse_level(up, raw, mask)
        levels.append(LevelOutput(stride=stride, raw=raw, fused=new_fused, mask=mask))
        steps.append({"stride": stride, "feats": feats, "coeffs": coeffs, "mask": mask,
                      "cols": cols,
                      "prev_hw": None if fused is None else fused.shape[2:]})
        fused = new_fused
    return levels, {"steps": steps, "config": config}


def pyramid_backward(cache, heads, banks, level_grads, train_bases=False):
    """Backward through the branch chain with masks held constant.

    level_grads: per-level gradients on the fused outputs (None entries are
    zero). Returns (head_grads, bank_grads, tap_grads) where tap_grads maps
    feature stride -> gradient on that backbone tap.
    """
    steps = cache["steps"]
    head_grads, bank_grads, tap_grads = {}, {}, {}
    g = None
    for i in reversed(range(len(steps))):
        st = steps[i]
        stride = st["stride"]
        lg = level_grads[i]
        if lg is not None:
            g = lg if g is None else g + lg
        if g is None:
            continue
        g_raw = g if st["mask"] is None else g * st["mask"]
        gc, gderiv = reconstruction.reconstruct_backward(st["coeffs"], banks[stride], g_raw)
        if train_bases:
            bank_grads[stride] = gderiv
        head = heads[stride]
        n, c, k, h, w = gc.shape
        gflat = gc.reshape(n, c * k, h, w)
        gx, gw, gb = conv2d_backward(st["feats"], head.weight, head.spec(), gflat,
                                     cols=st["cols"])
        head_grads[stride] = (gw, gb)
        tap_grads[stride] = gx if stride not in tap_grads else tap_grads[stride] + gx
        if st["prev_hw"] is not None:
            g = bilinear_resize_backward(g, st["prev_hw"][0], st["prev_hw"][1])
        else:
            g = None
    return head_grads, bank_grads, tap_grads
