"""Shared convolutional feature extractor.

A small stack of stride-2 conv blocks (default four, so overall stride 16)
maps an RGB image to the global feature map consumed by the proposal
network, the multi-label head, and the domain discriminator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, InputError


def he_init_(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded He (fan-in) initialization for conv/linear weights; zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            weight = m.weight
            fan_in = weight.shape[1] * (weight[0][0].numel() if weight.dim() == 4 else 1)
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()


@dataclass
class FeatureMap:
    """Single-image activation volume (C_f, H_f, W_f) plus its input stride."""

    tensor: torch.Tensor
    stride: int

    def __post_init__(self):
        if self.tensor.dim() != 3:
            raise ConfigurationError("FeatureMap tensor must be (C, H, W)")


class FeatureExtractor(nn.Module):
    """Stride-2 conv blocks with ReLU; output channels fixed by config.

    Inputs are standardized per image and channel by default (identical
    preprocessing for both domains), so global brightness/gain shifts do
    not dominate the learned features.
    """

    def __init__(
        self,
        channels: tuple[int, ...] = (16, 32, 64, 64),
        in_channels: int = 3,
        normalize_inputs: bool = True,
        seed: int = 0,
    ):
        super().__init__()
        if not channels:
            raise ConfigurationError("channels must be non-empty")
        layers: list[nn.Module] = []
        prev = in_channels
        for ch in channels:
            layers.append(nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1))
            layers.append(nn.ReLU(inplace=True))
            prev = ch
        self.blocks = nn.Sequential(*layers)
        self.out_channels = channels[-1]
        self.stride = 2 ** len(channels)
        self.normalize_inputs = normalize_inputs
        generator = torch.Generator().manual_seed(seed)
        he_init_(self, generator)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """Batched forward: (B, 3, H, W) -> (B, C_f, ceil(H/stride), ceil(W/stride))."""
        if not torch.isfinite(images).all():
            raise InputError("input images contain non-finite pixels")
        if self.normalize_inputs:
            mean = images.mean(dim=(2, 3), keepdim=True)
            std = images.std(dim=(2, 3), keepdim=True)
            images = (images - mean) / (std + 1e-5)
        return self.blocks(images)

    def extract_features(self, image: np.ndarray | torch.Tensor) -> FeatureMap:
        """Single-image op: H x W x 3 array in [0, 1] -> FeatureMap."""
        tensor = image_to_tensor(image, dtype=next(self.parameters()).dtype)
        if tensor.shape[-2] < 32 or tensor.shape[-1] < 32:
            raise InputError(f"image must be at least 32x32, got {tuple(tensor.shape[-2:])}")
        out = self.forward(tensor.unsqueeze(0))
        return FeatureMap(tensor=out[0], stride=self.stride)


def image_to_tensor(image: np.ndarray | torch.Tensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x 3 array in [0, 1] -> (3, H, W) tensor."""
    if isinstance(image, torch.Tensor):
        t = image
        if t.dim() == 3 and t.shape[0] == 3:
            return t.to(dtype)
    else:
        t = torch.from_numpy(np.ascontiguousarray(image))
    if t.dim() != 3 or t.shape[2] != 3:
        raise InputError(f"expected H x W x 3 image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).contiguous().to(dtype)


def batch_to_tensor(images: list[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack same-size H x W x 3 images into a (B, 3, H, W) tensor."""
    return torch.stack([image_to_tensor(im, dtype) for im in images], dim=0)
