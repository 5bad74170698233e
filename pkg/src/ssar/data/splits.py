"""Seeded train/val/test assignment at sequence or frame granularity."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Sequence

import numpy as np

from .manifest import SPLITS, ManifestRow


@dataclass(frozen=True)
class FrameRecord:
    sequence_id: str
    frame_index: int
    label: int
    split: str


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """Sizes of the three parts: cumulative boundaries ceil(cum_ratio * n).

    Ratios are converted to exact fractions first so that e.g. 0.6 of 10 is
    exactly 6.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three non-negative numbers")
    fr = [Fraction(r).limit_denominator(10**6) for r in ratios]
    if sum(fr) != 1:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    b1 = math.ceil(fr[0] * n)
    b2 = math.ceil((fr[0] + fr[1]) * n)
    return b1, b2 - b1, n - b2


def _assign(n: int, ratios, seed: int) -> list[str]:
    n_train, n_val, _ = split_counts(n, ratios)
    order = np.random.default_rng(seed).permutation(n)
    out = [""] * n
    for rank, idx in enumerate(order):
        out[idx] = SPLITS[0] if rank < n_train else SPLITS[1] if rank < n_train + n_val else SPLITS[2]
    return out


def split_dataset(
    manifest: Sequence[ManifestRow],
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
    granularity: str = "sequence",
) -> list[ManifestRow] | list[FrameRecord]:
    """Shuffle with ``seed`` and cut into train/val/test by ``ratios``.

    ``granularity="sequence"`` returns the manifest rows with their split
    column filled. ``granularity="frame"`` shuffles individual frames
    regardless of which video they came from and returns one
    :class:`FrameRecord` per frame, so frames of one video may land in
    different splits.
    """
    if not manifest:
        raise ValueError("cannot split an empty manifest")
    if granularity == "sequence":
        splits = _assign(len(manifest), ratios, seed)
        return [replace(row, split=s) for row, s in zip(manifest, splits)]
    if granularity == "frame":
        frames = [(row.sequence_id, i, row.label) for row in manifest for i in range(row.num_frames)]
        splits = _assign(len(frames), ratios, seed)
        return [FrameRecord(sid, i, label, s) for (sid, i, label), s in zip(frames, splits)]
    raise ValueError(f"granularity must be 'sequence' or 'frame', got {granularity!r}")
