"""Ground-truth hand masks from depth thresholding."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def depth_to_mask(depth: np.ndarray, near_mm: float = 100, far_mm: float = 700, min_area_px: int = 64) -> np.ndarray:
    """Binary mask of pixels with ``near_mm <= depth <= far_mm``.

    Depth 0 marks an invalid reading and is never foreground. Connected
    components (4-connectivity) smaller than ``min_area_px`` are dropped as
    sensor noise.
    """
    if not near_mm < far_mm:
        raise ValueError(f"near_mm ({near_mm}) must be below far_mm ({far_mm})")
    depth = np.asarray(depth)
    mask = (depth > 0) & (depth >= near_mm) & (depth <= far_mm)
    if min_area_px > 1 and mask.any():
        labels, n = ndimage.label(mask)
        sizes = np.bincount(labels.ravel(), minlength=n + 1)
        keep = sizes >= min_area_px
        keep[0] = False
        mask = keep[labels]
    return mask.astype(np.uint8)
