"""Symmetric-KL consistency between recognition and detection predictions.

Both per-image category vectors (the multi-label output p and the
detector-derived q) are renormalized with a softmax over their raw
probability values, then penalized by symmetric KL. Images without a q
(no proposals) are masked out and only contributing images enter each
domain's mean.
"""

from __future__ import annotations

import logging

import torch

from .errors import ConfigurationError

log = logging.getLogger(__name__)


def renormalize(v: torch.Tensor) -> torch.Tensor:
    """Softmax over raw probability values (not logits); rows sum to one."""
    if not torch.isfinite(v).all():
        raise ConfigurationError("renormalize requires finite entries")
    return torch.softmax(v, dim=-1)


def symmetric_kl(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """KL(a, b) + KL(b, a) for strictly positive distributions; >= 0."""
    return ((a - b) * (torch.log(a) - torch.log(b))).sum(dim=-1)


def domain_consistency(
    p_batch: torch.Tensor,
    q_rows: list[torch.Tensor | None],
) -> tuple[torch.Tensor, int]:
    """One domain's term: (1 / 2m) * sum of symmetric KLs over the m images
    that actually have a detector vector. Returns (loss, skipped count)."""
    terms = []
    skipped = 0
    for i, q in enumerate(q_rows):
        if q is None:
            skipped += 1
            continue
        terms.append(symmetric_kl(renormalize(p_batch[i]), renormalize(q)))
    if not terms:
        return p_batch.sum() * 0.0, skipped
    return torch.stack(terms).sum() / (2.0 * len(terms)), skipped


def consistency_loss(
    p_source: torch.Tensor,
    q_source: list[torch.Tensor | None],
    p_target: torch.Tensor,
    q_target: list[torch.Tensor | None],
) -> torch.Tensor:
    """Source plus target consistency terms; all-masked batches contribute 0."""
    loss_s, skip_s = domain_consistency(p_source, q_source)
    loss_t, skip_t = domain_consistency(p_target, q_target)
    total_skipped = skip_s + skip_t
    if total_skipped == len(q_source) + len(q_target):
        log.warning("consistency loss skipped: no image in the batch has proposals")
    elif total_skipped:
        log.debug("consistency loss skipped %d proposal-less images", total_skipped)
    return loss_s + loss_t
