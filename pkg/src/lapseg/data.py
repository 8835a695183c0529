"""Image/mask IO, the synthetic shapes dataset, augmentation, and patch mining.

Images are float32 (3, H, W) in [0, 1]; label maps are uint8 (H, W) with 255
reserved for void. Binary PPM (P6) holds images, binary PGM (P5) holds label
maps, and a manifest is a text file of "id image_path mask_path" lines with
paths relative to the manifest.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np

from .rng import Stream, derive_key, mix64
from .tensor import FormatError
from . import ops

log = logging.getLogger(__name__)

VOID = 255


@dataclass
class Sample:
    image: np.ndarray   # (3, H, W) float32 in [0, 1]
    truth: np.ndarray   # (H, W) uint8, 255 = void
    id: str

    def __post_init__(self):
        if self.image.shape[1:] != self.truth.shape:
            raise ValueError(f"image {self.image.shape} vs truth {self.truth.shape}")
        h, w = self.truth.shape
        if h % 32 or w % 32:
            raise ValueError(f"sample extents {h}x{w} must be divisible by 32")


@dataclass(frozen=True)
class AugmentSpec:
    min_size: int = 96
    max_size: int = 224
    crop: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.min_size > self.max_size:
            raise ValueError("min_size must be <= max_size")
        if self.crop % 32:
            raise ValueError("crop must be divisible by 32")


@dataclass
class PatchSet:
    class_id: int
    patches: np.ndarray  # (n, patch, patch) float32 in [0, 1]


# ---------------------------------------------------------------------------
# netpbm formats

def _read_pnm_header(buf, magic):
    if buf[:2] != magic:
        raise FormatError(f"expected {magic.decode()} file")
    fields, pos = [], 2
    while len(fields) < 3:
        if pos >= len(buf):
            raise FormatError("truncated header")
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(buf) and not buf[pos:pos + 1].isspace():
                pos += 1
            fields.append(buf[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise FormatError(f"non-numeric header field: {e}") from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    return w, h, pos


def write_image_ppm(path, image):
    """Write a float image in [0,1] as binary PPM (P6, maxval 255)."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError("PPM images need 3 channels")
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_image_ppm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _read_pnm_header(buf, b"P6")
    need = w * h * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PPM payload ({len(payload)} of {need} bytes)")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pix.transpose(2, 0, 1).astype(np.float32) / 255.0)


def write_mask_pgm(path, labels):
    """Write a label map as binary PGM (P5); pixel value = class index, 255 = void."""
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(labels.astype(np.uint8).tobytes())


def read_mask_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, pos = _read_pnm_header(buf, b"P5")
    need = w * h
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise FormatError(f"truncated PGM payload ({len(payload)} of {need} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_manifest(path, entries):
    """entries: list of (id, image_path, mask_path) relative to the manifest."""
    with open(path, "w") as fh:
        for sid, img, msk in entries:
            fh.write(f"{sid} {img} {msk}\n")


def load_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    samples = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            sid, img, msk = line.split()
            samples.append(Sample(
                image=read_image_ppm(os.path.join(base, img)),
                truth=read_mask_pgm(os.path.join(base, msk)),
                id=sid))
    return samples


# ---------------------------------------------------------------------------
# synthetic shapes

_PALETTE = np.array([
    [0.18, 0.18, 0.22],  # background
    [0.85, 0.25, 0.20],  # disks
    [0.20, 0.70, 0.25],  # rectangles
    [0.25, 0.35, 0.85],  # triangles
    [0.85, 0.75, 0.20],  # diamonds
    [0.70, 0.25, 0.75],
    [0.25, 0.75, 0.75],
    [0.95, 0.55, 0.25],
], dtype=np.float32)

NUM_SHAPE_KINDS = 4


def disk_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def rect_mask(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def triangle_mask(h, w, cy, cx, r):
    """Filled isoceles triangle, apex up, half-width/height r."""
    yy, xx = np.mgrid[0:h, 0:w]
    v = yy - (cy - r)           # distance below the apex
    return (v >= 0) & (v <= 2 * r) & (np.abs(xx - cx) <= v / 2)


def diamond_mask(h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.abs(yy - cy) + np.abs(xx - cx) <= r


def _shape_mask(kind, h, w, cy, cx, r):
    if kind == 0:
        return disk_mask(h, w, cy, cx, r)
    if kind == 1:
        return rect_mask(h, w, cy, cx, r, int(r * 1.3))
    if kind == 2:
        return triangle_mask(h, w, cy, cx, r)
    return diamond_mask(h, w, cy, cx, r)


def generate_shapes(n, size, num_classes, seed, p_empty=0.0, color_jitter=0.1,
                    clutter=0):
    """Deterministic synthetic dataset of colored filled shapes.

    Each image holds 1-4 non-overlapping shapes; the shape kind determines
    the class (class 0 is background) and classes keep distinct fill colors
    (small per-image jitter, additive noise). `clutter` optionally paints
    label-free full-span stripes in class colors over the scene as a stress
    variant: stripe interiors mislead narrow-context predictions while wide
    context can reject them by extent. Label masks stay exactly analytic;
    placement retries are bounded, so crowded draws degrade to fewer shapes
    rather than failing.
    """
    if size % 32:
        raise ValueError("size must be divisible by 32")
    if num_classes < 2:
        raise ValueError("need at least background + 1 class")
    kinds = min(NUM_SHAPE_KINDS, num_classes - 1)
    samples = []
    for i in range(n):
        st = Stream(seed, "sample", i)
        truth = np.zeros((size, size), dtype=np.uint8)
        occupied = np.zeros((size, size), dtype=bool)
        image = np.empty((3, size, size), dtype=np.float32)
        jit = ((st.uniform((num_classes, 3)) * 2.0 - 1.0) * color_jitter).astype(np.float32)
        colors = np.stack([
            np.clip(_PALETTE[c % len(_PALETTE)] + jit[c], 0.0, 1.0)
            for c in range(num_classes)])
        image[:] = colors[0][:, None, None]
        n_shapes = 0 if (p_empty > 0 and st.uniform() < p_empty) else st.randint(1, 5)
        for _ in range(n_shapes):
            for _attempt in range(20):
                kind = st.randint(0, kinds)
                r = st.randint(size // 16, size // 5)
                cy = st.randint(r, size - r)
                cx = st.randint(r, size - r)
                m = _shape_mask(kind, size, size, cy, cx, r)
                if not (m & occupied).any():
                    occupied |= m
                    truth[m] = kind + 1
                    image[:, m] = colors[kind + 1][:, None]
                    break
        for _ in range(clutter):
            # full-span stripes: no endpoints anywhere, so no local window can
            # tell a stripe from an object interior - only global extent can
            horizontal = st.randint(0, 2) == 0
            thick = st.randint(5, 11)
            pos = st.randint(0, size - thick + 1)
            color = colors[st.randint(0, num_classes)]
            if horizontal:
                image[:, pos:pos + thick, :] = color[:, None, None]
            else:
                image[:, :, pos:pos + thick] = color[:, None, None]
        noise = st.normal((3, size, size), sigma=0.05).astype(np.float32)
        image = np.clip(image + noise, 0.0, 1.0)
        samples.append(Sample(image=image, truth=truth, id=f"synth{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# augmentation

def resize_labels_nearest(labels, out_h, out_w):
    h, w = labels.shape
    ri = np.clip(np.floor((np.arange(out_h) + 0.5) * (h / out_h)), 0, h - 1).astype(np.int64)
    ci = np.clip(np.floor((np.arange(out_w) + 0.5) * (w / out_w)), 0, w - 1).astype(np.int64)
    return labels[ri][:, ci]


def _snap32(v):
    return max(32, int(round(v / 32)) * 32)


def augment(sample, spec: AugmentSpec, draw, size_override=None):
    """Scale so the larger side hits a random multiple of 32, then random-crop.

    size_override pins the target size (the trainer shares one size across a
    batch so items stack); crop offsets still come from this draw's stream.
    """
    st = Stream(mix64(spec.seed ^ derive_key(draw, "augment")))
    n_sizes = (spec.max_size - spec.min_size) // 32 + 1
    target = spec.min_size + 32 * st.randint(0, n_sizes)
    if size_override is not None:
        target = size_override
    h, w = sample.truth.shape
    scale = target / max(h, w)
    nh, nw = _snap32(h * scale), _snap32(w * scale)
    if (nh, nw) == (h, w):
        image, truth = sample.image, sample.truth
    else:
        image = np.ascontiguousarray(
            ops.bilinear_resize(sample.image[None], nh, nw)[0].astype(np.float32))
        truth = resize_labels_nearest(sample.truth, nh, nw)
    ch, cw = min(spec.crop, nh), min(spec.crop, nw)
    if nh > ch or nw > cw:
        oy = st.randint(0, nh - ch + 1)
        ox = st.randint(0, nw - cw + 1)
        image = np.ascontiguousarray(image[:, oy:oy + ch, ox:ox + cw])
        truth = np.ascontiguousarray(truth[oy:oy + ch, ox:ox + cw])
    return Sample(image=image, truth=truth, id=sample.id)


# ---------------------------------------------------------------------------
# patch mining for the basis dictionary

def extract_class_patches(samples, class_id, count=10000, patch=32,
                          min_coverage=0.02, seed=0):
    """Sample binary class-indicator patches with at least min_coverage class pixels."""
    kept = []
    st = Stream(seed, "patches", class_id)
    eligible = [s for s in samples if s.truth.shape[0] >= patch and s.truth.shape[1] >= patch]
    if eligible:
        max_draws = 50 * count
        for _ in range(max_draws):
            if len(kept) >= count:
                break
            s = eligible[st.randint(0, len(eligible))]
            h, w = s.truth.shape
            y = st.randint(0, h - patch + 1)
            x = st.randint(0, w - patch + 1)
            window = s.truth[y:y + patch, x:x + patch] == class_id
            if window.mean() >= min_coverage:
                kept.append(window.astype(np.float32))
    if not kept:
        log.warning("no patches found for class %d", class_id)
        return PatchSet(class_id=class_id, patches=np.zeros((0, patch, patch), np.float32))
    return PatchSet(class_id=class_id, patches=np.stack(kept))
