"""Zero-padded batching of variable-length sequences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass
class SequenceSample:
    """One gesture video held in memory: uint8 frames (T, H, W, 3), optional masks (T, H, W)."""

    sequence_id: str
    frames: np.ndarray
    label: int
    scenario: str = "stationary"
    masks: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class SequenceBatch:
    data: np.ndarray  # (T_max, B, ...)
    lengths: np.ndarray
    labels: np.ndarray
    sequence_ids: list[str]

    def item(self, i: int) -> np.ndarray:
        return self.data[: self.lengths[i], i]


def pad_sequences(arrays: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack (T_i, ...) arrays into (T_max, B, ...) with zeros after each length."""
    lengths = np.array([len(a) for a in arrays], dtype=np.int64)
    if (lengths < 1).any():
        raise ValueError("sequences must have at least one step")
    out = np.zeros((int(lengths.max()), len(arrays)) + arrays[0].shape[1:], dtype=arrays[0].dtype)
    for i, a in enumerate(arrays):
        out[: len(a), i] = a
    return out, lengths


def pad_and_batch(
    sequences: Sequence[SequenceSample],
    batch_size: int,
    order: Sequence[int] | None = None,
) -> Iterator[SequenceBatch]:
    """Yield padded batches in ``order`` (default: input order); the last batch may be smaller."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = list(range(len(sequences))) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        chunk = [sequences[i] for i in idx[start : start + batch_size]]
        data, lengths = pad_sequences([s.frames for s in chunk])
        yield SequenceBatch(
            data=data,
            lengths=lengths,
            labels=np.array([s.label for s in chunk], dtype=np.int64),
            sequence_ids=[s.sequence_id for s in chunk],
        )
