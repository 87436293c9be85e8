"""Deterministic synthetic two-domain detection benchmark.

Source images are clean renders of colored geometric shapes on a dark
textured background; target images are drawn from the same scene
distribution and then passed through a configurable appearance shift
(fog, color jitter, blur, or texture overlay). Every record stores the
analytic bounding box of each rendered shape, so box quality is exact by
construction.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import ConfigurationError
from .types import (
    AnnotatedImage,
    Dataset,
    DatasetManifest,
    ShiftConfig,
    UnlabeledImage,
    quantize_image,
)

IMAGE_SIZE = 128

# name -> (inside(xs, ys, cx, cy, r), bbox(cx, cy, r)); xs/ys are pixel centers
SHAPE_NAMES = (
    "circle",
    "triangle",
    "square",
    "diamond",
    "cross",
    "ring",
    "ellipse",
    "bar",
)

PALETTE = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.10, 0.75, 0.20],
        [0.15, 0.30, 0.90],
        [0.90, 0.85, 0.10],
        [0.85, 0.20, 0.80],
        [0.10, 0.80, 0.80],
        [0.95, 0.55, 0.10],
        [0.50, 0.20, 0.70],
    ],
    dtype=np.float64,
)

MIN_RADIUS = 12.0
MAX_RADIUS = 24.0
MAX_OBJECTS = 4
PLACEMENT_ATTEMPTS = 40
MAX_PLACEMENT_IOU = 0.15

FOG_COLOR = np.array([0.82, 0.84, 0.88], dtype=np.float64)
FOG_CHANNEL_GAIN = np.array([1.2, 1.0, 0.8], dtype=np.float64)  # red scatters hardest


def _shape_mask(name: str, xs: np.ndarray, ys: np.ndarray, cx: float, cy: float, r: float) -> np.ndarray:
    dx, dy = xs - cx, ys - cy
    if name == "circle":
        return dx * dx + dy * dy <= r * r
    if name == "triangle":
        # apex up: (cx, cy - r), base corners (cx +/- r, cy + 0.7 r)
        top, base = cy - r, cy + 0.7 * r
        inside_y = (ys >= top) & (ys <= base)
        frac = (ys - top) / (base - top)
        return inside_y & (np.abs(dx) <= frac * r)
    if name == "square":
        h = 0.8 * r
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if name == "cross":
        arm = 0.35 * r
        horiz = (np.abs(dx) <= r) & (np.abs(dy) <= arm)
        vert = (np.abs(dx) <= arm) & (np.abs(dy) <= r)
        return horiz | vert
    if name == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if name == "ellipse":
        b = 0.62 * r
        return (dx / r) ** 2 + (dy / b) ** 2 <= 1.0
    if name == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.4 * r)
    raise ConfigurationError(f"unknown shape {name!r}")


def _shape_bbox(name: str, cx: float, cy: float, r: float) -> tuple[float, float, float, float]:
    if name == "triangle":
        return (cx - r, cy - r, cx + r, cy + 0.7 * r)
    if name == "square":
        h = 0.8 * r
        return (cx - h, cy - h, cx + h, cy + h)
    if name == "ellipse":
        b = 0.62 * r
        return (cx - r, cy - b, cx + r, cy + b)
    if name == "bar":
        return (cx - r, cy - 0.4 * r, cx + r, cy + 0.4 * r)
    return (cx - r, cy - r, cx + r, cy + r)


def _box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter) if inter > 0 else 0.0


def render_scene(rng: np.random.Generator, K: int, image_size: int = IMAGE_SIZE):
    """Render one clean scene; returns (float image, boxes, class_ids)."""
    size = image_size
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    base = rng.uniform(0.12, 0.30)
    grad = rng.uniform(-0.04, 0.04)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = (base + grad * (ys[:, :, None] / size - 0.5))
    img += rng.normal(0.0, 0.012, size=img.shape)

    n_objects = int(rng.integers(1, MAX_OBJECTS + 1))
    boxes, class_ids = [], []
    for _ in range(n_objects):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            k = int(rng.integers(0, K))
            name = SHAPE_NAMES[k]
            r = rng.uniform(MIN_RADIUS, MAX_RADIUS)
            cx = rng.uniform(r + 1.0, size - r - 1.0)
            cy = rng.uniform(r + 1.0, size - r - 1.0)
            bbox = _shape_bbox(name, cx, cy, r)
            if all(_box_iou(bbox, prev) <= MAX_PLACEMENT_IOU for prev in boxes):
                color = PALETTE[k] * rng.uniform(0.85, 1.1)
                color = np.clip(color + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
                mask = _shape_mask(name, xs, ys, cx, cy, r)
                img[mask] = color
                boxes.append(bbox)
                class_ids.append(k)
                break

    img = np.clip(img, 0.0, 1.0)
    return img, np.asarray(boxes, dtype=np.float64), np.asarray(class_ids, dtype=np.int64)


def _bilinear_field(rng: np.random.Generator, size: int, coarse: int = 5) -> np.ndarray:
    """Smooth 2D field in [0, 1] from a coarse random grid."""
    grid = rng.uniform(0.0, 1.0, size=(coarse, coarse))
    pos = np.linspace(0.0, coarse - 1.0, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, coarse - 2)
    frac = pos - i0
    rows = grid[i0, :] * (1 - frac)[:, None] + grid[i0 + 1, :] * frac[:, None]
    field = rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :]
    return field


def apply_shift(image: np.ndarray, shift: ShiftConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the configured appearance shift; exact identity at severity 0.

    The rng must be consumed identically for a given shift kind so that the
    transform is deterministic per (shift config, image index).
    """
    s = float(shift.severity)
    if s == 0.0:
        return image.copy()
    img = np.asarray(image, dtype=np.float64)
    size = img.shape[0]
    if shift.shift_kind == "fog":
        # atmospheric model: scattering blur, color shift toward luminance,
        # spatially varying blend toward the fog color (stronger for longer
        # wavelengths, so the shift is asymmetric across colors), and scatter
        # noise; every component scales with severity
        density = _bilinear_field(rng, size)
        blend = (s * (0.65 + 0.35 * density))[:, :, None] * FOG_CHANNEL_GAIN
        blend = np.clip(blend, 0.0, 0.97)
        soft = np.stack(
            [ndimage.gaussian_filter(img[:, :, c], sigma=1.6 * s, mode="nearest") for c in range(3)],
            axis=2,
        )
        luma = (0.299 * soft[:, :, 0] + 0.587 * soft[:, :, 1] + 0.114 * soft[:, :, 2])[:, :, None]
        desat = soft + blend * (luma - soft)
        fogged = desat * (1.0 - blend) + FOG_COLOR * blend
        fogged += rng.normal(0.0, 0.08 * s, size=img.shape)
        return np.clip(fogged, 0.0, 1.0)
    if shift.shift_kind == "color_jitter":
        gains = 1.0 + s * rng.uniform(-0.45, 0.45, size=3)
        bias = s * rng.uniform(-0.12, 0.12, size=3)
        return np.clip(img * gains + bias, 0.0, 1.0)
    if shift.shift_kind == "blur":
        sigma = 2.2 * s
        out = np.stack(
            [ndimage.gaussian_filter(img[:, :, c], sigma=sigma, mode="nearest") for c in range(3)],
            axis=2,
        )
        return np.clip(out, 0.0, 1.0)
    if shift.shift_kind == "texture":
        theta = rng.uniform(0.0, np.pi)
        wavelength = rng.uniform(6.0, 14.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
        wave = np.sin(2.0 * np.pi * (xs * np.cos(theta) + ys * np.sin(theta)) / wavelength + phase)
        return np.clip(img + 0.22 * s * wave[:, :, None], 0.0, 1.0)
    raise ConfigurationError(f"unknown shift_kind {shift.shift_kind!r}")


def _scene_rng(seed: int, domain: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, domain, index))))


def _shift_rng(shift_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((shift_seed, 9001, index))))


def generate_benchmark(
    num_source: int,
    num_target: int,
    K: int,
    shift: ShiftConfig,
    seed: int,
    image_size: int = IMAGE_SIZE,
    split: str = "train",
    annotate_target: bool | None = None,
) -> tuple[Dataset, Dataset]:
    """Generate a (source, target) dataset pair.

    Target scenes are independent draws from the same distribution as the
    source, with the shift transform applied afterwards. Target annotations
    are kept only when ``annotate_target`` is true (default: test split),
    where they serve as evaluation ground truth; the train-split target
    stays unannotated.
    """
    if num_source < 1:
        raise ConfigurationError(f"num_source must be >= 1, got {num_source}")
    if num_target < 1:
        raise ConfigurationError(f"num_target must be >= 1, got {num_target}")
    if not (1 <= K <= len(SHAPE_NAMES)):
        raise ConfigurationError(f"K must lie in [1, {len(SHAPE_NAMES)}], got {K}")
    if annotate_target is None:
        annotate_target = split == "test"

    class_names = SHAPE_NAMES[:K]

    source_records = []
    for i in range(num_source):
        rng = _scene_rng(seed, 0, i)
        img, boxes, ids = render_scene(rng, K, image_size)
        source_records.append(
            AnnotatedImage(
                image=quantize_image(img),
                boxes=boxes,
                class_ids=ids,
                image_id=f"{split}_src_{i:05d}",
            )
        )

    target_records = []
    for i in range(num_target):
        rng = _scene_rng(seed, 1, i)
        img, boxes, ids = render_scene(rng, K, image_size)
        img = apply_shift(img, shift, _shift_rng(shift.seed, i))
        image_id = f"{split}_tgt_{i:05d}"
        if annotate_target:
            target_records.append(
                AnnotatedImage(image=quantize_image(img), boxes=boxes, class_ids=ids, image_id=image_id)
            )
        else:
            target_records.append(UnlabeledImage(image=quantize_image(img), image_id=image_id))

    source = Dataset(
        manifest=DatasetManifest(K=K, class_names=class_names, n_s=num_source, n_t=0, split=split),
        records=source_records,
    )
    target = Dataset(
        manifest=DatasetManifest(K=K, class_names=class_names, n_s=0, n_t=num_target, split=split),
        records=target_records,
    )
    source.validate()
    if annotate_target:
        target.validate()
    return source, target
