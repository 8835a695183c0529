"""Naive reference implementations used as independent oracles.

Everything here is written with plain loops straight from the defining
formulas and is deliberately independent of the vectorized code paths it
verifies. Slow on purpose; keep inputs small.
"""

import numpy as np


def conv2d_naive(x, weights, bias, stride, pad):
    """Direct 6-loop cross-correlation."""
    n, c, h, w = x.shape
    oc, ic, kh, kw = weights.shape
    assert ic == c
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for bb in range(kw):
                                r = i * stride + a - pad
                                s = j * stride + bb - pad
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[b, ci, r, s] * weights[o, ci, a, bb]
                    out[b, o, i, j] = acc + bias[o]
    return out


def reconstruct_naive(coeffs, functions, s):
    """Literal evaluation of the basis synthesis sum.

    coeffs: (N, C, K, h, w); functions: (2s, 2s, K, C).
    Out-of-range coefficient reads are zero; output is (N, C, s*h, s*w).
    """
    n, c, k, h, w = coeffs.shape
    out = np.zeros((n, c, s * h, s * w), dtype=np.float64)
    for b in range(n):
        for cc in range(c):
            for i in range(s * h):
                for j in range(s * w):
                    qi, mi = divmod(i, s)
                    qj, mj = divmod(j, s)
                    acc = 0.0
                    for kk in range(k):
                        for u in (0, 1):
                            for v in (0, 1):
                                p, q = qi - u, qj - v
                                if 0 <= p < h and 0 <= q < w:
                                    acc += functions[mi + s * u, mj + s * v, kk, cc] \
                                        * coeffs[b, cc, kk, p, q]
                    out[b, cc, i, j] = acc
    return out


def disk_offsets(radius):
    """All integer offsets (dy, dx) with dy^2 + dx^2 <= radius^2."""
    r = int(radius)
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if dy * dy + dx * dx <= r * r]


def disk_dilate_naive(mask, radius):
    """Minkowski dilation by the discrete euclidean disk."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                for dy, dx in disk_offsets(radius):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[yy, xx] = True
    return out


def disk_erode_naive(mask, radius):
    """Minkowski erosion; outside the image counts as background."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            keep = True
            for dy, dx in disk_offsets(radius):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not mask[yy, xx]:
                    keep = False
                    break
            out[y, x] = keep
    return out


def chebyshev_dilate_naive(mask, radius):
    """Binary dilation by the Chebyshev ball (square) of the given radius."""
    h, w = mask.shape
    out = np.zeros_like(mask, dtype=bool)
    for y in range(h):
        for x in range(w):
            if mask[y, x]:
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w:
                            out[yy, xx] = True
    return out


def metrics_naive(pred, truth, num_classes, region=None, void=255):
    """Set-arithmetic IoU and accuracies over an optional region mask."""
    if region is None:
        region = np.ones_like(truth, dtype=bool)
    sel = region & (truth != void)
    p, t = pred[sel], truth[sel]
    total = len(t)
    correct = int((p == t).sum())
    ious, accs = [], []
    for c in range(num_classes):
        inter = int(((p == c) & (t == c)).sum())
        union = int(((p == c) | (t == c)).sum())
        if union > 0:
            ious.append(inter / union)
        tc = int((t == c).sum())
        if tc > 0:
            accs.append(int(((p == c) & (t == c)).sum()) / tc)
    pixel_acc = correct / total if total else float("nan")
    mean_acc = float(np.mean(accs)) if accs else float("nan")
    mean_iou = float(np.mean(ious)) if ious else float("nan")
    return pixel_acc, mean_acc, mean_iou


def finite_difference(fn, x, step=1e-5, probes=None):
    """Central finite differences of scalar fn at x.

    probes: optional flat indices to probe; defaults to every entry.
    Returns an array shaped like x with untouched entries zero.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    idx = range(flat.size) if probes is None else probes
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g
