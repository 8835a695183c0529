"""Segmentation losses, disk morphology, and the dilation/erosion targets.

Per-branch cross-entropy is taken at each branch's native resolution against
nearest-downsampled ground truth. The auxiliary objectives supervise
disk-dilated and disk-eroded class masks with a logistic loss; dilated
segments of different classes may overlap, so a k-way softmax would be
wrong there.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .data import VOID
from .ops import sigmoid, softmax_channels

log = logging.getLogger(__name__)


@dataclass
class DETargets:
    dilated: np.ndarray    # (C, h, w) binary, downsampled
    eroded: np.ndarray     # (C, h, w) binary, downsampled
    valid: np.ndarray      # (h, w) bool, False where truth was void
    radius: int


@dataclass
class LossReport:
    branch: dict = field(default_factory=dict)   # stride -> softmax loss
    de_dilation: float = 0.0
    de_erosion: float = 0.0
    de_weight: float = 1.0

    @property
    def total(self):
        return sum(self.branch.values()) + self.de_weight * (self.de_dilation + self.de_erosion)


def softmax_xent(scores, truth, void=VOID):
    """Mean cross-entropy over non-void pixels; returns (loss, grad_scores)."""
    n, c, h, w = scores.shape
    if truth.shape != (n, h, w):
        raise ValueError(f"truth shape {truth.shape}, expected {(n, h, w)}")
    valid = truth != void
    if (truth[valid] >= c).any():
        raise ValueError(f"labels must be < {c} or void")
    count = int(valid.sum())
    if count == 0:
        log.warning("all pixels void; loss contributes nothing")
        return 0.0, np.zeros_like(scores)
    probs = softmax_channels(scores)
    safe = np.where(valid, truth, 0).astype(np.int64)
    p_true = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    eps = np.finfo(scores.dtype).tiny
    loss = float(-(np.log(np.maximum(p_true, eps)) * valid).sum() / count)
    grad = probs * (valid[:, None].astype(scores.dtype) / count)
    nn, ii, jj = np.nonzero(valid)
    grad[nn, truth[nn, ii, jj].astype(np.int64), ii, jj] -= 1.0 / count
    return loss, grad.astype(scores.dtype)


def downsample_truth(truth, factor):
    """Nearest-neighbor label downsampling (top-left of each block)."""
    if factor == 1:
        return truth
    h, w = truth.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"extents {h}x{w} not divisible by {factor}")
    return truth[..., ::factor, ::factor]


def disk_dilate(mask, radius):
    """Minkowski dilation by the discrete euclidean disk of the given radius."""
    m = np.asarray(mask, dtype=bool)
    if radius == 0 or not m.any():
        return m.copy()
    d = ndimage.distance_transform_edt(~m)
    return d * d <= radius * radius + 0.5


def disk_erode(mask, radius):
    """Minkowski erosion; outside the image counts as background."""
    m = np.asarray(mask, dtype=bool)
    if radius == 0:
        return m.copy()
    padded = np.pad(m, radius, constant_values=False)
    d = ndimage.distance_transform_edt(padded)
    d = d[radius:-radius, radius:-radius]
    return d * d > radius * radius + 0.5


def build_de_targets(truth, radius, out_factor, num_classes, void=VOID):
    """Per-class dilated/eroded masks at full resolution, then downsampled."""
    h, w = truth.shape
    dil = np.zeros((num_classes, h // out_factor, w // out_factor), dtype=np.float32)
    ero = np.zeros_like(dil)
    for c in range(num_classes):
        m = truth == c
        if m.any():
            dil[c] = downsample_truth(disk_dilate(m, radius), out_factor)
            ero[c] = downsample_truth(disk_erode(m, radius), out_factor)
    valid = downsample_truth(truth != void, out_factor)
    return DETargets(dilated=dil, eroded=ero, valid=valid, radius=radius)


def logistic_loss(logits, targets, valid=None):
    """Mean binary logistic loss with exact gradient; returns (loss, grad)."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    if valid is None:
        valid = np.ones(logits.shape, dtype=bool)
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    z, t = logits, targets
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = float((elem * valid).sum() / count)
    grad = (sigmoid(z) - t) * valid / count
    return loss, grad.astype(logits.dtype)


def stack_de_targets(per_sample):
    """Stack per-sample DETargets into batched (dilated, eroded, valid) arrays."""
    return (np.stack([t.dilated for t in per_sample]),
            np.stack([t.eroded for t in per_sample]),
            np.stack([t.valid for t in per_sample]))


def assemble_losses(levels, truth, de_logits=None, de_targets=None,
                    de_weight=1.0, recon_stride=4, on_raw=False, void=VOID):
    """Branch losses at their native resolutions plus optional DE terms.

    de_logits is a (dilation, erosion) pair of (N, C, h, w) logit maps and
    de_targets the matching stack_de_targets() triple. Returns
    (report, level_grads, de_grads); de_grads is (grad_dil, grad_ero) or
    None. Branch losses supervise fused outputs unless on_raw is set.
    """
    report = LossReport(de_weight=de_weight)
    level_grads = []
    for lv in levels:
        factor = lv.stride // recon_stride
        target = downsample_truth(truth, factor)
        scores = lv.raw if on_raw else lv.fused
        loss, grad = softmax_xent(scores, target, void=void)
        report.branch[lv.stride] = loss
        level_grads.append(grad)
    de_grads = None
    if de_logits is not None:
        if de_targets is None:
            raise ValueError("DE logits provided without targets")
        dil_t, ero_t, valid = de_targets
        dil_logits, ero_logits = de_logits
        vmask = np.broadcast_to(valid[:, None].astype(bool), dil_logits.shape)
        ld, gd = logistic_loss(dil_logits, dil_t, vmask)
        le, ge = logistic_loss(ero_logits, ero_t, vmask)
        report.de_dilation = ld
        report.de_erosion = le
        de_grads = (gd * de_weight, ge * de_weight)
    return report, level_grads, de_grads
