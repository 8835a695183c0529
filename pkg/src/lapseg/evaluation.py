"""Benchmark metrics, boundary-band (tri-map) analysis, multi-scale inference."""

from dataclasses import dataclass

import numpy as np

from .data import VOID
from .ops import bilinear_resize, softmax_channels


class ConfusionMatrix:
    """C x C pixel-count accumulator; entry (g, p) = truth g predicted p."""

    def __init__(self, num_classes):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, truth, region=None, void=VOID):
        if pred.shape != truth.shape:
            raise ValueError(f"pred {pred.shape} vs truth {truth.shape}")
        sel = truth != void
        if region is not None:
            sel &= region.astype(bool)
        p, t = pred[sel].astype(np.int64), truth[sel].astype(np.int64)
        if len(t) and (max(p.max(), t.max()) >= self.num_classes or min(p.min(), t.min()) < 0):
            raise ValueError(f"labels out of range for {self.num_classes} classes")
        flat = np.bincount(t * self.num_classes + p, minlength=self.num_classes ** 2)
        self.counts += flat.reshape(self.num_classes, self.num_classes)
        return self


@dataclass
class MetricSummary:
    pixel_acc: float
    mean_class_acc: float
    mean_iou: float
    per_class_iou: np.ndarray    # NaN for classes with empty union
    evaluated: np.ndarray        # bool, classes included in the mean


def metrics(cm):
    """Pixel accuracy, mean class accuracy, mean IoU from a confusion matrix.

    Classes absent from both prediction and truth carry no union and are
    excluded from the mean IoU (reported via the evaluated flags).
    """
    counts = cm.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(counts).astype(np.float64)
    row = counts.sum(axis=1).astype(np.float64)   # truth pixels per class
    col = counts.sum(axis=0).astype(np.float64)   # predicted pixels per class
    union = row + col - tp
    evaluated = union > 0
    per_class = np.full(cm.num_classes, np.nan)
    per_class[evaluated] = tp[evaluated] / union[evaluated]
    with_truth = row > 0
    class_acc = tp[with_truth] / row[with_truth]
    return MetricSummary(
        pixel_acc=float(tp.sum() / total),
        mean_class_acc=float(class_acc.mean()) if with_truth.any() else float("nan"),
        mean_iou=float(per_class[evaluated].mean()) if evaluated.any() else float("nan"),
        per_class_iou=per_class,
        evaluated=evaluated)


def _dilate3x3(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    out[1:, 1:] |= mask[:-1, :-1]
    out[1:, :-1] |= mask[:-1, 1:]
    out[:-1, 1:] |= mask[1:, :-1]
    out[:-1, :-1] |= mask[1:, 1:]
    return out


def trimap_band(truth, radius, void=VOID):
    """Pixels within Chebyshev radius of a ground-truth label edge.

    The boundary set holds the non-void pixels on both sides of any
    4-neighbor label change; band(r) covers r pixels on each side of the
    edge, so band(1) is the boundary set itself. Image borders are not
    boundaries unless a differing neighbor exists.
    """
    if radius < 1:
        raise ValueError("band radius must be >= 1")
    t = truth
    nonvoid = t != void
    boundary = np.zeros_like(nonvoid)
    diff_v = (t[1:, :] != t[:-1, :]) & nonvoid[1:, :] & nonvoid[:-1, :]
    boundary[1:, :] |= diff_v
    boundary[:-1, :] |= diff_v
    diff_h = (t[:, 1:] != t[:, :-1]) & nonvoid[:, 1:] & nonvoid[:, :-1]
    boundary[:, 1:] |= diff_h
    boundary[:, :-1] |= diff_h
    band = boundary
    for _ in range(radius - 1):
        band = _dilate3x3(band)
    return band


def trimap_curve(pred, truth, radii, num_classes, void=VOID):
    """(radius, mean_iou, pixel_acc) rows for metrics restricted to each band."""
    rows = []
    for r in radii:
        cm = ConfusionMatrix(num_classes)
        cm.accumulate(pred, truth, region=trimap_band(truth, r, void=void), void=void)
        if cm.counts.sum() == 0:
            rows.append((r, float("nan"), float("nan")))
        else:
            m = metrics(cm)
            rows.append((r, m.mean_iou, m.pixel_acc))
    return rows


def _snap32(v):
    return int(round(v / 32)) * 32


def multiscale_predict(forward_fn, image, scales=(1.0, 0.8, 0.6)):
    """Max-fused class probability map over several inference scales.

    forward_fn maps a (1, 3, h, w) batch to full-resolution class scores at
    that size. Each scale's probabilities are resized back to the native
    resolution and fused by an elementwise maximum.
    """
    c, h, w = image.shape[-3:]
    fused = None
    for s in scales:
        sh, sw = _snap32(h * s), _snap32(w * s)
        if sh < 32 or sw < 32:
            raise ValueError(f"scale {s} shrinks {h}x{w} below the 32-pixel minimum")
        scaled = bilinear_resize(image[None], sh, sw)
        scores = forward_fn(scaled)
        probs = softmax_channels(scores)
        back = bilinear_resize(probs, h, w)[0]
        fused = back if fused is None else np.maximum(fused, back)
    return fused
