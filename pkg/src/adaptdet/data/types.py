"""Dataset record types for the two-domain detection benchmark.

A dataset is a manifest plus a list of records. Source-domain records carry
boxes and class ids; target-domain records are image-only. All images are
float32 H x W x 3 arrays with values in [0, 1] that quantize exactly to
8-bit PNG (every stored intensity is n/255 for integer n).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Union

import numpy as np

from ..errors import ConfigurationError, ValidationError

SHIFT_KINDS = ("fog", "color_jitter", "blur", "texture")


@dataclass(frozen=True)
class ShiftConfig:
    """Domain-shift transform applied to target-domain renders."""

    shift_kind: str = "fog"
    severity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.shift_kind not in SHIFT_KINDS:
            raise ConfigurationError(
                f"shift_kind must be one of {SHIFT_KINDS}, got {self.shift_kind!r}"
            )
        if not (0.0 <= self.severity <= 1.0):
            raise ConfigurationError(
                f"severity must lie in [0, 1], got {self.severity}"
            )


@dataclass(frozen=True)
class DatasetManifest:
    K: int
    class_names: tuple[str, ...]
    n_s: int
    n_t: int
    split: str = "train"

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if len(self.class_names) != self.K:
            raise ConfigurationError(
                f"expected {self.K} class names, got {len(self.class_names)}"
            )
        if len(set(self.class_names)) != self.K:
            raise ConfigurationError("class_names contains duplicates")
        if self.split not in ("train", "test"):
            raise ConfigurationError(f"split must be train|test, got {self.split!r}")


@dataclass
class AnnotatedImage:
    """Source-style record: image plus object boxes and class labels."""

    image: np.ndarray
    boxes: np.ndarray  # (n, 4) float64, (x1, y1, x2, y2) pixel coordinates
    class_ids: np.ndarray  # (n,) int64 in [0, K)
    image_id: str

    def validate(self, K: int) -> None:
        _check_image(self.image, self.image_id)
        boxes = np.asarray(self.boxes, dtype=np.float64)
        ids = np.asarray(self.class_ids, dtype=np.int64)
        if boxes.ndim != 2 or boxes.shape[1] != 4:
            raise ValidationError(f"{self.image_id}: boxes must be (n, 4)")
        if len(boxes) != len(ids):
            raise ValidationError(
                f"{self.image_id}: {len(boxes)} boxes but {len(ids)} class ids"
            )
        h, w = self.image.shape[:2]
        for i, (x1, y1, x2, y2) in enumerate(boxes):
            if not (x1 < x2 and y1 < y2):
                raise ValidationError(
                    f"{self.image_id}: box {i} is degenerate ({x1}, {y1}, {x2}, {y2})"
                )
            if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
                raise ValidationError(
                    f"{self.image_id}: box {i} out of image bounds {w}x{h}"
                )
        bad = (ids < 0) | (ids >= K)
        if bad.any():
            raise ValidationError(
                f"{self.image_id}: class id out of range [0, {K}): {ids[bad].tolist()}"
            )


@dataclass
class UnlabeledImage:
    """Target-style record: image only."""

    image: np.ndarray
    image_id: str

    def validate(self, K: int) -> None:
        _check_image(self.image, self.image_id)


Record = Union[AnnotatedImage, UnlabeledImage]


def _check_image(image: np.ndarray, image_id: str) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"{image_id}: image must be H x W x 3")
    if not np.isfinite(image).all():
        raise ValidationError(f"{image_id}: image has non-finite pixels")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError(f"{image_id}: pixel values outside [0, 1]")


@dataclass
class Dataset:
    """Immutable-after-construction collection of records plus manifest."""

    manifest: DatasetManifest
    records: list[Record] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> Record:
        return self.records[idx]

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    @property
    def annotated(self) -> bool:
        return all(isinstance(r, AnnotatedImage) for r in self.records)

    def validate(self) -> None:
        for record in self.records:
            record.validate(self.manifest.K)

    def content_hash(self) -> str:
        """SHA-256 over every field of every record, for determinism checks."""
        import hashlib

        h = hashlib.sha256()
        h.update(repr(self.manifest).encode())
        for r in self.records:
            h.update(r.image_id.encode())
            h.update(np.ascontiguousarray(r.image).tobytes())
            if isinstance(r, AnnotatedImage):
                h.update(np.ascontiguousarray(r.boxes, dtype=np.float64).tobytes())
                h.update(np.ascontiguousarray(r.class_ids, dtype=np.int64).tobytes())
        return h.hexdigest()


def quantize_image(image: np.ndarray) -> np.ndarray:
    """Snap float intensities to the 8-bit grid so PNG round-trips exactly."""
    u8 = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    return (u8.astype(np.uint8).astype(np.float32)) / np.float32(255.0)
