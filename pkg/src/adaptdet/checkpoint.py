"""Versioned parameter container shared by every trainable module."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import torch

from .errors import ConfigurationError
from .model import AdaptiveDetector, ModelConfig

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: AdaptiveDetector, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "conditioning": model.conditioning,
        "seed": model.seed,
        "state_dict": model.state_dict(),
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[AdaptiveDetector, dict]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(
            f"unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})"
        )
    raw = dict(payload["model_config"])
    for key in ("backbone_channels", "anchor_scales", "anchor_ratios", "disc_hidden"):
        raw[key] = tuple(raw[key])
    config = ModelConfig(**raw)
    model = AdaptiveDetector(config, conditioning=payload["conditioning"], seed=payload["seed"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
