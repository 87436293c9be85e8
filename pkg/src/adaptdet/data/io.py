"""On-disk dataset format.

One directory per domain and split:

    root/
      manifest.json                 {K, class_names, n_s, n_t, split}
      images/<image_id>.png         lossless 8-bit RGB
      annotations/<image_id>.json   {image_id, boxes, class_ids}; absent for
                                    unannotated (target-domain training) records

Exactly one of n_s / n_t is nonzero: a directory holds a single domain.
Records load in lexicographic image_id order, which matches generation order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ValidationError
from .types import AnnotatedImage, Dataset, DatasetManifest, UnlabeledImage, quantize_image


def save_dataset(dataset: Dataset, root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)

    m = dataset.manifest
    manifest_payload = {
        "K": m.K,
        "class_names": list(m.class_names),
        "n_s": m.n_s,
        "n_t": m.n_t,
        "split": m.split,
    }
    (root / "manifest.json").write_text(json.dumps(manifest_payload, indent=2))

    for record in dataset.records:
        u8 = np.clip(np.rint(record.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(u8, mode="RGB").save(root / "images" / f"{record.image_id}.png")
        if isinstance(record, AnnotatedImage):
            payload = {
                "image_id": record.image_id,
                "boxes": np.asarray(record.boxes, dtype=np.float64).tolist(),
                "class_ids": np.asarray(record.class_ids, dtype=np.int64).tolist(),
            }
            (root / "annotations" / f"{record.image_id}.json").write_text(
                json.dumps(payload, indent=2)
            )
    return root


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ValidationError(f"missing manifest: {manifest_path}")
    raw = json.loads(manifest_path.read_text())
    try:
        manifest = DatasetManifest(
            K=int(raw["K"]),
            class_names=tuple(raw["class_names"]),
            n_s=int(raw["n_s"]),
            n_t=int(raw["n_t"]),
            split=str(raw["split"]),
        )
    except KeyError as exc:
        raise ValidationError(f"manifest missing key {exc}") from exc

    image_dir = root / "images"
    if not image_dir.is_dir():
        raise ValidationError(f"missing images directory under {root}")
    records = []
    for png in sorted(image_dir.glob("*.png")):
        image_id = png.stem
        with Image.open(png) as im:
            u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
        image = quantize_image(u8.astype(np.float32) / np.float32(255.0))
        ann = root / "annotations" / f"{image_id}.json"
        if ann.is_file():
            payload = json.loads(ann.read_text())
            record = AnnotatedImage(
                image=image,
                boxes=np.asarray(payload["boxes"], dtype=np.float64).reshape(-1, 4),
                class_ids=np.asarray(payload["class_ids"], dtype=np.int64),
                image_id=image_id,
            )
        else:
            record = UnlabeledImage(image=image, image_id=image_id)
        records.append(record)

    expected = manifest.n_s + manifest.n_t
    if len(records) != expected:
        raise ValidationError(
            f"{root}: manifest declares {expected} records, found {len(records)}"
        )
    if manifest.n_s > 0 and manifest.n_t > 0:
        raise ValidationError(f"{root}: a dataset directory must hold a single domain")

    dataset = Dataset(manifest=manifest, records=records)
    dataset.validate()
    return dataset
