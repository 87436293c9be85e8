"""Image-level multi-label presence prediction over shared features.

One binary presence probability per class, produced by a shared 3x3 conv
followed by global average pooling and a per-class linear unit. Trained
with summed-per-image, batch-averaged binary cross-entropy on annotated
images only.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import FeatureMap, he_init_
from .errors import ConfigurationError, NumericError, ValidationError

PROB_EPS = 1e-6


def multihot_from_boxes(class_ids: Sequence[int], K: int) -> np.ndarray:
    """Collapse per-object class ids into a binary presence vector.

    Duplicates collapse; order is irrelevant; y[k] = 1 iff k occurs.
    """
    ids = np.asarray(class_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= K):
        bad = ids[(ids < 0) | (ids >= K)]
        raise ValidationError(f"class id out of range [0, {K}): {bad.tolist()}")
    y = np.zeros(K, dtype=np.float32)
    if ids.size:
        y[ids] = 1.0
    return y


class MultiLabelHead(nn.Module):
    """K per-class presence classifiers over the shared feature map."""

    def __init__(self, in_channels: int, num_classes: int, conv_channels: int = 64, seed: int = 0):
        super().__init__()
        if num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.conv = nn.Conv2d(in_channels, conv_channels, kernel_size=3, padding=1)
        self.relu = nn.ReLU(inplace=True)
        self.classifier = nn.Linear(conv_channels, num_classes)
        he_init_(self, torch.Generator().manual_seed(seed))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, C_f, H_f, W_f) -> (B, K) presence probabilities in (0, 1)."""
        if features.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"head expects {self.in_channels} channels, got {features.shape[1]}"
            )
        h = self.relu(self.conv(features))
        pooled = h.mean(dim=(2, 3))
        probs = torch.sigmoid(self.classifier(pooled))
        return probs.clamp(PROB_EPS, 1.0 - PROB_EPS)

    def predict_presence(self, fmap: FeatureMap) -> torch.Tensor:
        """Single-image op: FeatureMap -> length-K probability vector."""
        return self.forward(fmap.tensor.unsqueeze(0))[0]


def multilabel_loss(p_batch: torch.Tensor, y_batch: torch.Tensor) -> torch.Tensor:
    """Batch-mean of the negated per-image label log-likelihood.

    Per image the binary cross-entropy is summed over the K classes; the
    1/n factor normalizes over the batch only.
    """
    if p_batch.shape != y_batch.shape:
        raise ConfigurationError(
            f"shape mismatch: p {tuple(p_batch.shape)} vs y {tuple(y_batch.shape)}"
        )
    if not torch.isfinite(p_batch).all() or not torch.isfinite(y_batch).all():
        raise NumericError("multilabel_loss received non-finite inputs")
    per_image = -(y_batch * torch.log(p_batch) + (1.0 - y_batch) * torch.log(1.0 - p_batch)).sum(dim=1)
    return per_image.mean()
