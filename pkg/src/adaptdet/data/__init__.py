from .batching import PairedBatch, paired_batches, steps_per_epoch
from .io import load_dataset, save_dataset
from .synthetic import IMAGE_SIZE, PALETTE, SHAPE_NAMES, apply_shift, generate_benchmark, render_scene
from .types import (
    AnnotatedImage,
    Dataset,
    DatasetManifest,
    Record,
    ShiftConfig,
    UnlabeledImage,
    quantize_image,
)

__all__ = [
    "AnnotatedImage",
    "Dataset",
    "DatasetManifest",
    "IMAGE_SIZE",
    "PALETTE",
    "PairedBatch",
    "Record",
    "SHAPE_NAMES",
    "ShiftConfig",
    "UnlabeledImage",
    "apply_shift",
    "generate_benchmark",
    "load_dataset",
    "paired_batches",
    "quantize_image",
    "render_scene",
    "save_dataset",
    "steps_per_epoch",
]
