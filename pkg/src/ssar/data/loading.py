"""Manifest-driven loading of sequences and stage-1 frame sets.

Decoding can use a thread pool; results always come back in manifest order,
so what the trainer sees does not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
from PIL import Image

from .batching import SequenceSample
from .images import read_depth, read_mask, read_rgb, write_mask
from .manifest import ManifestRow, frame_files, rebase_rows, relative_to, resolve, write_manifest
from .masks import depth_to_mask
from .splits import FrameRecord

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, optionally on a thread pool, preserving order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as img:
        return img.size[1], img.size[0]


def load_sequence(
    row: ManifestRow,
    base: str | Path,
    size: tuple[int, int],
    with_masks: bool = False,
) -> SequenceSample:
    """Read one manifest row into memory, resizing frames (and masks) to ``size``."""
    fdir = resolve(base, row.frames_dir)
    if fdir is None:
        raise ValueError(f"{row.sequence_id}: frames_dir is empty")
    files = frame_files(fdir)
    if len(files) != row.num_frames:
        raise ValueError(f"{row.sequence_id}: manifest says {row.num_frames} frames, found {len(files)} in {fdir}")
    frames = np.stack([read_rgb(p, size) for p in files])
    masks = None
    if with_masks:
        mdir = resolve(base, row.mask_dir)
        if mdir is None:
            raise ValueError(f"{row.sequence_id}: masks requested but mask_dir is empty (run prep-masks)")
        mfiles = frame_files(mdir)
        if len(mfiles) != len(files):
            raise ValueError(f"{row.sequence_id}: {len(mfiles)} masks for {len(files)} frames")
        for fp, mp in zip(files, mfiles):
            if _image_size(fp) != _image_size(mp):
                raise ValueError(f"{mp}: mask size {_image_size(mp)} differs from frame size {_image_size(fp)}")
        masks = np.stack([read_mask(p, size) for p in mfiles])
    return SequenceSample(row.sequence_id, frames, row.label, row.scenario, masks)


def load_sequences(
    rows: Sequence[ManifestRow],
    base: str | Path,
    size: tuple[int, int],
    with_masks: bool = False,
    workers: int = 1,
) -> list[SequenceSample]:
    return ordered_map(lambda r: load_sequence(r, base, size, with_masks), rows, workers)


def frame_set(
    samples: Sequence[SequenceSample],
    records: Sequence[FrameRecord] | None = None,
    split: str | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gather stage-1 training frames: (images N,H,W,3; masks N,H,W; labels N).

    With ``records`` only frames assigned to ``split`` are taken. Frames whose
    mask is empty are dropped, since segmentation needs a visible hand.
    """
    by_id = {s.sequence_id: s for s in samples}
    if records is None:
        picks = [(s.sequence_id, i) for s in samples for i in range(len(s))]
    else:
        picks = [(r.sequence_id, r.frame_index) for r in records if split is None or r.split == split]
    images, masks, labels = [], [], []
    for sid, i in picks:
        s = by_id[sid]
        if s.masks is None:
            raise ValueError(f"{sid}: frame set needs masks")
        if not s.masks[i].any():
            continue
        images.append(s.frames[i])
        masks.append(s.masks[i])
        labels.append(s.label)
    if not images:
        raise ValueError("no frames with a nonempty mask")
    return np.stack(images), np.stack(masks), np.array(labels, dtype=np.int64)


def prep_masks(
    rows: Sequence[ManifestRow],
    base: str | Path,
    out_dir: str | Path,
    near_mm: float = 100,
    far_mm: float = 700,
    min_area_px: int = 64,
    workers: int = 1,
    manifest_out: str | Path | None = None,
) -> list[ManifestRow]:
    """Threshold every depth map into ``out_dir/<sequence_id>/`` and point ``mask_dir`` there."""
    out_dir = Path(out_dir)
    manifest_dir = Path(manifest_out).parent if manifest_out else Path(base)

    def one(row: ManifestRow) -> ManifestRow:
        ddir = resolve(base, row.depth_dir)
        if ddir is None:
            raise ValueError(f"{row.sequence_id}: depth_dir is empty, cannot derive masks")
        target = out_dir / row.sequence_id
        target.mkdir(parents=True, exist_ok=True)
        for p in frame_files(ddir):
            write_mask(target / p.name, depth_to_mask(read_depth(p), near_mm, far_mm, min_area_px))
        (moved,) = rebase_rows([row], base, manifest_dir)
        return replace(moved, mask_dir=relative_to(target, manifest_dir))

    new_rows = ordered_map(one, rows, workers)
    if manifest_out is not None:
        write_manifest(manifest_out, new_rows)
    return new_rows
