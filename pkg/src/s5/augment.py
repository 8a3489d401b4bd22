"""Weak (geometric) and strong (photometric + CutMix) augmentation.

All geometric randomness lives in the weak pass and all pixel-value
randomness in the strong pass, so a pseudo-label grid computed on the
weak view stays spatially aligned with the strong view. Every sampled
parameter is captured in an AugRecord, and replaying a record reproduces
the view bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

SCALE_RANGE = (0.5, 2.0)
JITTER_RANGE = (0.5, 1.5)
JITTER_PROB = 0.8
GRAYSCALE_PROB = 0.2
BLUR_PROB = 0.5
BLUR_SIGMA_RANGE = (0.1, 2.0)
CUTMIX_PROB = 0.5
CUTMIX_AREA_RANGE = (0.1, 0.5)
CUTMIX_ASPECT_RANGE = (0.5, 2.0)

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugRecord:
    """Every sampled parameter of one augmentation pass (JSON-serializable)."""

    scale: float = 1.0
    crop: tuple[int, int] = (0, 0)  # source crop origin, or paste origin when scaled < H
    rotation: int = 0  # degrees clockwise: 0, 90, 180, 270
    hflip: bool = False
    vflip: bool = False
    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    grayscale: bool = False
    blur_sigma: float | None = None
    cutmix_box: tuple[int, int, int, int] | None = None  # y0, x0, h, w
    cutmix_partner: int | None = None

    def to_json(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# resampling primitives


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = img.shape[:2]
    ys = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    xs = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    y0c = np.clip(y0, 0, in_h - 1)
    y1c = np.clip(y0 + 1, 0, in_h - 1)
    x0c = np.clip(x0, 0, in_w - 1)
    x1c = np.clip(x0 + 1, 0, in_w - 1)
    tl = img[np.ix_(y0c, x0c)]
    tr = img[np.ix_(y0c, x1c)]
    bl = img[np.ix_(y1c, x0c)]
    br = img[np.ix_(y1c, x1c)]
    return ((1 - wy) * (1 - wx) * tl + (1 - wy) * wx * tr
            + wy * (1 - wx) * bl + wy * wx * br)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = mask.shape[:2]
    ys = np.clip(np.floor((np.arange(out_h) + 0.5) * in_h / out_h), 0, in_h - 1).astype(np.int64)
    xs = np.clip(np.floor((np.arange(out_w) + 0.5) * in_w / out_w), 0, in_w - 1).astype(np.int64)
    return mask[np.ix_(ys, xs)]


def _rot90_cw(a: np.ndarray, quarter_turns: int) -> np.ndarray:
    return np.rot90(a, k=-quarter_turns)


# ---------------------------------------------------------------------------
# weak (geometric) pass


def sample_weak(size: int, rng: np.random.Generator) -> AugRecord:
    scale = float(rng.uniform(*SCALE_RANGE))
    scaled = max(1, int(round(size * scale)))
    span = abs(scaled - size)
    oy = int(rng.integers(0, span + 1))
    ox = int(rng.integers(0, span + 1))
    rotation = int(rng.integers(0, 4)) * 90
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    return AugRecord(scale=scale, crop=(oy, ox), rotation=rotation, hflip=hflip, vflip=vflip)


def apply_weak(image: np.ndarray, mask: np.ndarray | None, record: AugRecord,
               ignore_label: int = 255):
    """Apply a geometric record; image resizes bilinearly, the mask nearest."""
    size = image.shape[0]
    scaled = max(1, int(round(size * record.scale)))
    oy, ox = record.crop

    img = resize_bilinear(image, scaled, scaled)
    msk = resize_nearest(mask, scaled, scaled) if mask is not None else None
    if scaled >= size:
        img = img[oy:oy + size, ox:ox + size]
        msk = msk[oy:oy + size, ox:ox + size] if msk is not None else None
    else:
        canvas = np.zeros((size, size, 3))
        canvas[oy:oy + scaled, ox:ox + scaled] = img
        img = canvas
        if msk is not None:
            mcanvas = np.full((size, size), ignore_label, dtype=msk.dtype)
            mcanvas[oy:oy + scaled, ox:ox + scaled] = msk
            msk = mcanvas

    turns = record.rotation // 90
    if turns:
        img = _rot90_cw(img, turns)
        msk = _rot90_cw(msk, turns) if msk is not None else None
    if record.hflip:
        img = img[:, ::-1]
        msk = msk[:, ::-1] if msk is not None else None
    if record.vflip:
        img = img[::-1]
        msk = msk[::-1] if msk is not None else None
    img = np.ascontiguousarray(img)
    msk = np.ascontiguousarray(msk) if msk is not None else None
    return img, msk


def weak_augment(image: np.ndarray, mask: np.ndarray | None, rng: np.random.Generator,
                 ignore_label: int = 255):
    record = sample_weak(image.shape[0], rng)
    img, msk = apply_weak(image, mask, record, ignore_label)
    return img, msk, record


# ---------------------------------------------------------------------------
# strong (photometric) pass


def _grayscale(img: np.ndarray) -> np.ndarray:
    lum = img @ _LUMA
    return np.repeat(lum[:, :, None], 3, axis=2)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(3 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, ((radius, radius), (0, 0), (0, 0)), mode="reflect")
    rows = sum(kernel[i] * padded[i:i + img.shape[0]] for i in range(kernel.size))
    padded = np.pad(rows, ((0, 0), (radius, radius), (0, 0)), mode="reflect")
    return sum(kernel[i] * padded[:, i:i + img.shape[1]] for i in range(kernel.size))


def sample_strong(rng: np.random.Generator) -> AugRecord:
    rec = AugRecord()
    if rng.random() < JITTER_PROB:
        rec.brightness = float(rng.uniform(*JITTER_RANGE))
    if rng.random() < JITTER_PROB:
        rec.contrast = float(rng.uniform(*JITTER_RANGE))
    if rng.random() < JITTER_PROB:
        rec.saturation = float(rng.uniform(*JITTER_RANGE))
    rec.grayscale = bool(rng.random() < GRAYSCALE_PROB)
    if rng.random() < BLUR_PROB:
        rec.blur_sigma = float(rng.uniform(*BLUR_SIGMA_RANGE))
    return rec


def apply_strong(image: np.ndarray, record: AugRecord) -> np.ndarray:
    """Photometric only: the pixel grid never moves, values stay in [0, 1]."""
    img = image
    if record.brightness is not None:
        img = np.clip(img * record.brightness, 0.0, 1.0)
    if record.contrast is not None:
        anchor = float((img @ _LUMA).mean())
        img = np.clip(record.contrast * img + (1 - record.contrast) * anchor, 0.0, 1.0)
    if record.saturation is not None:
        gray = _grayscale(img)
        img = np.clip(record.saturation * img + (1 - record.saturation) * gray, 0.0, 1.0)
    if record.grayscale:
        img = _grayscale(img)
    if record.blur_sigma is not None:
        img = np.clip(gaussian_blur(img, record.blur_sigma), 0.0, 1.0)
    return np.ascontiguousarray(img)


def strong_augment(view: np.ndarray, rng: np.random.Generator):
    record = sample_strong(rng)
    return apply_strong(view, record), record


# ---------------------------------------------------------------------------
# CutMix at batch level


def sample_cutmix_box(size: int, rng: np.random.Generator):
    area = float(rng.uniform(*CUTMIX_AREA_RANGE))
    aspect = float(rng.uniform(*CUTMIX_ASPECT_RANGE))
    h = int(round(math.sqrt(area * size * size / aspect)))
    w = int(round(math.sqrt(area * size * size * aspect)))
    h = min(max(h, 1), size)
    w = min(max(w, 1), size)
    y0 = int(rng.integers(0, size - h + 1))
    x0 = int(rng.integers(0, size - w + 1))
    return y0, x0, h, w


def cutmix_batch(images, pseudo_labels, confidences, rng: np.random.Generator):
    """Paste a partner rectangle into each item (prob 0.5), co-mixing the
    pseudo-label and confidence maps with the identical box.

    Returns (images, labels, confidences, records); a batch of one is a no-op.
    """
    n = len(images)
    records = [AugRecord() for _ in range(n)]
    if n < 2:
        return list(images), list(pseudo_labels), list(confidences), records
    size = images[0].shape[0]
    partners = rng.permutation(n)
    out_img = [img.copy() for img in images]
    out_lab = [lab.copy() for lab in pseudo_labels]
    out_conf = [conf.copy() for conf in confidences]
    for i in range(n):
        if rng.random() >= CUTMIX_PROB:
            continue
        box = sample_cutmix_box(size, rng)
        y0, x0, h, w = box
        p = int(partners[i])
        records[i].cutmix_box = box
        records[i].cutmix_partner = p
        out_img[i][y0:y0 + h, x0:x0 + w] = images[p][y0:y0 + h, x0:x0 + w]
        out_lab[i][y0:y0 + h, x0:x0 + w] = pseudo_labels[p][y0:y0 + h, x0:x0 + w]
        out_conf[i][y0:y0 + h, x0:x0 + w] = confidences[p][y0:y0 + h, x0:x0 + w]
    return out_img, out_lab, out_conf, records
