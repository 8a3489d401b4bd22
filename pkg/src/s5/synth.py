"""Deterministic synthetic segmentation scenes.

Each foreground class is a shape family (disk, rectangle, triangle,
stripe) rendered over a styled textured background. Masks come from exact
pixel-center membership with topmost-shape-wins, never anti-aliased;
anti-aliasing (2x2 supersampled coverage) touches only the image. Pixels
no shape covers carry the ignore label. Out-of-distribution patches are
pure noise: unlabeled, distinguishable only by their statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError
from .io import ManifestRecord, SynthSection, save_tensor, write_manifest
from .parallel import det_map
from .rng import stream

# base colors per class, spread far apart; scenes jitter around them
CLASS_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.70, 0.30],
    [0.25, 0.35, 0.85],
    [0.90, 0.80, 0.25],
    [0.75, 0.30, 0.80],
    [0.30, 0.75, 0.75],
])

STYLE_COLORS = np.array([
    [0.45, 0.40, 0.35],
    [0.25, 0.45, 0.55],
    [0.55, 0.50, 0.25],
    [0.35, 0.25, 0.50],
])

SHAPE_KINDS = ("disk", "rectangle", "triangle", "stripe")


@dataclass
class SceneSpec:
    image_size: int = 64
    classes: int = 4
    objects_min: int = 5
    objects_max: int = 9
    noise: float = 0.06
    style: int = 0
    ood: bool = False
    ignore_label: int = 255

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("scene needs at least 2 classes")
        if not (0 <= self.objects_min <= self.objects_max):
            raise ConfigError("bad object count range")


@dataclass
class Shape:
    kind: str
    cls: int
    params: dict
    color: np.ndarray


@dataclass
class SceneDesc:
    spec: SceneSpec
    shapes: list[Shape] = field(default_factory=list)  # back-to-front z order
    bg_color: np.ndarray | None = None
    bg_phase: float = 0.0
    bg_freq: float = 1.0
    bg_angle: float = 0.0


def _shape_membership(shape: Shape, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Exact point-in-shape test on coordinate grids (pixel centers)."""
    p = shape.params
    if shape.kind == "disk":
        return (ys - p["cy"]) ** 2 + (xs - p["cx"]) ** 2 <= p["r"] ** 2
    if shape.kind == "rectangle":
        return (np.abs(ys - p["cy"]) <= p["hh"]) & (np.abs(xs - p["cx"]) <= p["hw"])
    if shape.kind == "triangle":
        (ay, ax), (by, bx), (cy, cx) = p["verts"]
        d1 = (xs - bx) * (ay - by) - (ys - by) * (ax - bx)
        d2 = (xs - cx) * (by - cy) - (ys - cy) * (bx - cx)
        d3 = (xs - ax) * (cy - ay) - (ys - ay) * (cx - ax)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    if shape.kind == "stripe":
        coord = ys if p["orient"] == "h" else xs
        return np.abs(coord - p["center"]) <= p["half"]
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def _sample_shape(cls: int, size: int, rng: np.random.Generator) -> Shape:
    kind = SHAPE_KINDS[cls % len(SHAPE_KINDS)]
    s = float(size)
    if kind == "disk":
        params = {
            "cy": float(rng.uniform(0.1, 0.9) * s),
            "cx": float(rng.uniform(0.1, 0.9) * s),
            "r": float(rng.uniform(0.12, 0.30) * s),
        }
    elif kind == "rectangle":
        params = {
            "cy": float(rng.uniform(0.1, 0.9) * s),
            "cx": float(rng.uniform(0.1, 0.9) * s),
            "hh": float(rng.uniform(0.10, 0.30) * s),
            "hw": float(rng.uniform(0.10, 0.30) * s),
        }
    elif kind == "triangle":
        while True:
            cy = rng.uniform(0.15, 0.85) * s
            cx = rng.uniform(0.15, 0.85) * s
            verts = []
            for _ in range(3):
                ang = rng.uniform(0, 2 * math.pi)
                rad = rng.uniform(0.14, 0.34) * s
                verts.append((cy + rad * math.sin(ang), cx + rad * math.cos(ang)))
            (ay, ax), (by, bx), (cy2, cx2) = verts
            area = abs((bx - ax) * (cy2 - ay) - (cx2 - ax) * (by - ay)) / 2
            if area >= 0.008 * s * s:  # reject slivers
                params = {"verts": [(float(y), float(x)) for y, x in verts]}
                break
    else:  # stripe
        params = {
            "orient": "h" if rng.random() < 0.5 else "v",
            "center": float(rng.uniform(0.1, 0.9) * s),
            "half": float(rng.uniform(0.05, 0.11) * s),
        }
    base = CLASS_COLORS[cls % len(CLASS_COLORS)]
    color = np.clip(base * rng.uniform(0.7, 1.3) + rng.uniform(-0.12, 0.12, 3), 0.0, 1.0)
    return Shape(kind=kind, cls=cls, params=params, color=color)


def sample_scene(spec: SceneSpec, rng: np.random.Generator) -> SceneDesc:
    desc = SceneDesc(spec=spec)
    if spec.ood:
        return desc
    style = STYLE_COLORS[spec.style % len(STYLE_COLORS)]
    desc.bg_color = np.clip(style + rng.uniform(-0.05, 0.05, 3), 0.0, 1.0)
    desc.bg_phase = float(rng.uniform(0, 2 * math.pi))
    desc.bg_freq = float(rng.uniform(1.0, 3.0))
    desc.bg_angle = float(rng.uniform(0, math.pi))
    count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    for _ in range(count):
        cls = int(rng.integers(0, spec.classes))
        desc.shapes.append(_sample_shape(cls, spec.image_size, rng))
    return desc


def render_scene(desc: SceneDesc, rng: np.random.Generator):
    """Rasterize a description; `rng` supplies only the pixel noise."""
    spec = desc.spec
    s = spec.image_size
    if spec.ood:
        image = rng.random((s, s, 3))
        mask = np.full((s, s), spec.ignore_label, dtype=np.uint16)
        return image, mask

    yy, xx = np.meshgrid(np.arange(s) + 0.5, np.arange(s) + 0.5, indexing="ij")
    # low-frequency directional wave keeps per-style statistics distinct
    wave = 0.08 * np.sin(
        desc.bg_freq * 2 * math.pi
        * (yy * math.sin(desc.bg_angle) + xx * math.cos(desc.bg_angle)) / s
        + desc.bg_phase)
    image = np.clip(desc.bg_color[None, None, :] + wave[:, :, None], 0.0, 1.0)

    # 2x2 supersampled coverage for the image only
    sub = np.array([0.25, 0.75])
    ys_list = [yy - 0.5 + dy for dy in sub]
    xs_list = [xx - 0.5 + dx for dx in sub]
    mask = np.full((s, s), spec.ignore_label, dtype=np.uint16)
    for shape in desc.shapes:
        cover = np.zeros((s, s))
        for ys in ys_list:
            for xs in xs_list:
                cover += _shape_membership(shape, ys, xs)
        cover /= len(sub) ** 2
        image = image * (1 - cover[:, :, None]) + shape.color[None, None, :] * cover[:, :, None]
        mask[_shape_membership(shape, yy, xx)] = shape.cls

    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, (s, s, 3))
    return np.clip(image, 0.0, 1.0), mask


def gen_scene(spec: SceneSpec, rng: np.random.Generator):
    """Sample and render one scene from a single stream."""
    return render_scene(sample_scene(spec, rng), rng)


# ---------------------------------------------------------------------------
# corpus


def _spec_for(synth: SynthSection, style: int, ood: bool = False) -> SceneSpec:
    return SceneSpec(
        image_size=synth.image_size, classes=synth.classes,
        objects_min=synth.objects_min, objects_max=synth.objects_max,
        noise=synth.noise, style=style, ood=ood, ignore_label=synth.ignore_label)


def gen_corpus(synth: SynthSection, seed: int, outdir, workers: int = 1) -> dict:
    """Write images, masks, and the labeled / unlabeled / ood manifests."""
    outdir = Path(outdir)
    if not outdir.is_dir():
        raise IngestionError(f"output directory does not exist: {outdir}")
    (outdir / "images").mkdir(exist_ok=True)
    (outdir / "masks").mkdir(exist_ok=True)

    jobs = []
    for i in range(synth.labeled):
        jobs.append((f"lab-{i:05d}", i % synth.styles, False, True, "train"))
    for i in range(synth.val):
        jobs.append((f"val-{i:05d}", i % synth.styles, False, True, "val"))
    for i in range(synth.unlabeled_clean):
        jobs.append((f"unl-{i:05d}", i % synth.styles, False, False, "unlabeled"))
    for i in range(synth.unlabeled_ood):
        jobs.append((f"ood-{i:05d}", 0, True, False, "unlabeled"))

    def build(job):
        patch_id, style, ood, keep_mask, split = job
        image, mask = gen_scene(_spec_for(synth, style, ood), stream(seed, "scene", patch_id))
        save_tensor(outdir / "images" / f"{patch_id}.bin", image.astype(np.float32))
        if keep_mask:
            save_tensor(outdir / "masks" / f"{patch_id}.bin", mask)
        dataset = "ood" if ood else f"style{style}"
        mask_path = f"masks/{patch_id}.bin" if keep_mask else None
        return ManifestRecord(patch_id, f"images/{patch_id}.bin", mask_path, dataset, split)

    records = det_map(build, jobs, workers)
    labeled = [r for r in records if r.split in ("train", "val")]
    clean = [r for r in records if r.split == "unlabeled" and r.dataset != "ood"]
    ood_recs = [r for r in records if r.dataset == "ood"]
    write_manifest(outdir / "labeled.jsonl", labeled)
    write_manifest(outdir / "unlabeled.jsonl", clean)
    write_manifest(outdir / "ood.jsonl", ood_recs)
    return {
        "labeled": len(labeled),
        "unlabeled": len(clean),
        "ood": len(ood_recs),
        "manifests": ["labeled.jsonl", "unlabeled.jsonl", "ood.jsonl"],
    }
