"""PNG reading and writing for RGB frames, 16-bit depth maps and binary masks."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_rgb(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load an 8-bit RGB frame as (H, W, 3) uint8, bilinearly resized to ``size=(h, w)`` if given."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(img, dtype=np.uint8).copy()


def read_mask(path: str | Path, size: tuple[int, int] | None = None) -> np.ndarray:
    """Load a {0, 255} mask as (H, W) uint8 in {0, 1}; nearest-neighbour resize."""
    with Image.open(path) as img:
        img = img.convert("L")
        if size is not None and img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.NEAREST)
        return (np.asarray(img) > 127).astype(np.uint8)


def read_depth(path: str | Path) -> np.ndarray:
    """Load a 16-bit single-channel depth map in millimetres."""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{path}: depth map must be single-channel, got shape {arr.shape}")
    return arr.astype(np.uint16)


def write_rgb(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, optimize=False)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path, optimize=False)


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    arr = np.asarray(depth, dtype=np.uint16)
    Image.fromarray(arr).save(path, optimize=False)


def write_gray_heatmap(path: str | Path, values: np.ndarray) -> None:
    """Values in [0, 1] -> 8-bit grayscale PNG."""
    img = np.clip(np.round(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, optimize=False)
