"""Paired source/target batch stream for joint training.

Each step yields one source batch and one target batch of equal size. An
epoch makes exactly one seeded-permutation pass over the longer domain
(final partial batch kept); the shorter domain cycles through fresh seeded
permutations as needed, so its indices repeat within the epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from .types import Dataset, Record


@dataclass
class PairedBatch:
    source: list[Record]
    target: list[Record]
    source_indices: np.ndarray
    target_indices: np.ndarray


class _PermutationStream:
    """Infinite stream of indices: concatenated seeded permutations of range(n)."""

    def __init__(self, n: int, seed: int, epoch: int):
        self.n = n
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, epoch))))
        self.buffer: list[int] = []

    def take(self, count: int) -> np.ndarray:
        while len(self.buffer) < count:
            self.buffer.extend(self.rng.permutation(self.n).tolist())
        out, self.buffer = self.buffer[:count], self.buffer[count:]
        return np.asarray(out, dtype=np.int64)


def batch_sizes(n_longer: int, batch_size: int) -> list[int]:
    sizes = [batch_size] * (n_longer // batch_size)
    if n_longer % batch_size:
        sizes.append(n_longer % batch_size)
    return sizes


def paired_batches(
    source: Dataset,
    target: Dataset,
    batch_size: int,
    seed: int,
    epoch: int = 0,
):
    """Yield PairedBatch steps for one epoch. Deterministic in (seed, epoch)."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    if len(source) == 0 or len(target) == 0:
        raise ConfigurationError("both datasets must be non-empty")

    longer = max(len(source), len(target))
    src_stream = _PermutationStream(len(source), seed, epoch)
    tgt_stream = _PermutationStream(len(target), seed + 0x5F3759DF, epoch)
    for size in batch_sizes(longer, batch_size):
        src_idx = src_stream.take(size)
        tgt_idx = tgt_stream.take(size)
        yield PairedBatch(
            source=[source[i] for i in src_idx],
            target=[target[i] for i in tgt_idx],
            source_indices=src_idx,
            target_indices=tgt_idx,
        )


def steps_per_epoch(n_source: int, n_target: int, batch_size: int) -> int:
    return len(batch_sizes(max(n_source, n_target), batch_size))
