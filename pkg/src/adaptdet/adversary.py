"""Prediction-conditioned domain discriminator with gradient reversal.

The discriminator sees the flattened outer product of a reduced global
feature vector g and a category probability vector, so alignment pressure
respects predicted category structure. Training it through the reversal
layer realizes the feature/discriminator minimax in one backward pass:
the discriminator separates domains, while the (sign-flipped, weighted)
gradient pushes the feature extractor toward confusion.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import he_init_
from .errors import ConfigurationError, ContractViolation

DOMAIN_EPS = 1e-6

CONDITIONING_MODES = ("p", "p_plus_q", "unconditional")


@dataclass(frozen=True)
class AdversaryConfig:
    focal_gamma: float = 5.0
    adv_weight: float = 0.5
    conditioning: str = "p"
    detach_condition: bool = True

    def __post_init__(self):
        if self.focal_gamma < 0:
            raise ConfigurationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.adv_weight < 0:
            raise ConfigurationError(f"adv_weight must be >= 0, got {self.adv_weight}")
        if self.conditioning not in CONDITIONING_MODES:
            raise ConfigurationError(
                f"conditioning must be one of {CONDITIONING_MODES}, got {self.conditioning!r}"
            )


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.scale * grad_output, None


def gradient_reversal(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity forward; backward multiplies the upstream gradient by -scale."""
    if scale < 0:
        raise ConfigurationError(f"reversal scale must be >= 0, got {scale}")
    return _GradientReversal.apply(x, float(scale))


class FeatureReducer(nn.Module):
    """3x3 conv plus global average pooling: feature map -> vector g."""

    def __init__(self, in_channels: int, out_channels: int = 64, seed: int = 0):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.out_channels = out_channels
        he_init_(self, torch.Generator().manual_seed(seed))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """(B, C_f, H_f, W_f) -> (B, d)."""
        return F.relu(self.conv(features)).mean(dim=(2, 3))


def condition(g: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
    """Flattened outer product g (x) cond, row-major with g outermost.

    Entry (j, k) of the result is g[j] * cond[k]. With cond=None
    (unconditional mode) g itself is returned. Accepts single vectors or
    batched (B, d) / (B, K) inputs.
    """
    if cond is None:
        return g
    single = g.dim() == 1
    gb = g.unsqueeze(0) if single else g
    cb = cond.unsqueeze(0) if cond.dim() == 1 else cond
    if gb.shape[0] != cb.shape[0]:
        raise ConfigurationError(
            f"batch mismatch: g has {gb.shape[0]} rows, cond has {cb.shape[0]}"
        )
    out = (gb[:, :, None] * cb[:, None, :]).reshape(gb.shape[0], -1)
    return out[0] if single else out


class DomainDiscriminator(nn.Module):
    """Fully connected domain classifier over the conditioned feature.

    Two-logit softmax reduced to the probability of the source domain
    (label 1 = source, 0 = target), clamped away from {0, 1}.
    """

    def __init__(self, in_features: int, hidden: tuple[int, ...] = (), seed: int = 0):
        super().__init__()
        self.in_features = in_features
        layers: list[nn.Module] = []
        prev = in_features
        for width in hidden:
            layers.append(nn.Linear(prev, width))
            layers.append(nn.ReLU(inplace=True))
            prev = width
        layers.append(nn.Linear(prev, 2))
        self.net = nn.Sequential(*layers)
        he_init_(self, torch.Generator().manual_seed(seed))

    def forward(self, conditioned: torch.Tensor) -> torch.Tensor:
        """(B, in_features) or (in_features,) -> source probability in (0, 1)."""
        single = conditioned.dim() == 1
        x = conditioned.unsqueeze(0) if single else conditioned
        if x.shape[1] != self.in_features:
            raise ConfigurationError(
                f"discriminator expects {self.in_features} inputs, got {x.shape[1]}"
            )
        probs = F.softmax(self.net(x), dim=1)[:, 1]
        probs = probs.clamp(DOMAIN_EPS, 1.0 - DOMAIN_EPS)
        return probs[0] if single else probs


def focal_adversarial_loss(
    d_src: torch.Tensor, d_tgt: torch.Tensor, gamma: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Focal domain cross-entropy terms for the source and target batches.

    source term: -(1/n_s) sum (1 - d)^gamma * log d
    target term: -(1/n_t) sum d^gamma * log(1 - d)

    Both are minimized by a correct discriminator; gamma > 0 down-weights
    confidently classified samples. gamma = 0 recovers plain cross-entropy.
    """
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    if d_src.numel() == 0 or d_tgt.numel() == 0:
        raise ContractViolation("focal_adversarial_loss requires non-empty batches")
    loss_src = -((1.0 - d_src) ** gamma * torch.log(d_src)).mean()
    loss_tgt = -(d_tgt ** gamma * torch.log(1.0 - d_tgt)).mean()
    return loss_src, loss_tgt


def discriminator_accuracy(d_src: torch.Tensor, d_tgt: torch.Tensor) -> float:
    """Fraction of samples assigned to their true domain at threshold 0.5."""
    correct = (d_src >= 0.5).sum() + (d_tgt < 0.5).sum()
    return float(correct) / float(d_src.numel() + d_tgt.numel())
