"""Seeded weight initializers."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..autograd import Tensor
from ..errors import ShapeError


def _fans(shape: Sequence[int]) -> tuple[int, int]:
    if len(shape) == 0:
        raise ShapeError("initializers need a tensor of rank >= 1")
    if len(shape) == 1:
        return shape[0], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    if len(shape) == 0:
        raise ShapeError("initializers need a tensor of rank >= 1")
    return Tensor(np.zeros(tuple(shape), dtype=dtype), requires_grad=True)


def init_orthogonal(shape: Sequence[int], rng: np.random.Generator, gain: float = 1.0, dtype=np.float32) -> Tensor:
    """Orthonormal rows when rows <= cols, orthonormal columns otherwise."""
    if len(shape) < 2:
        raise ShapeError(f"orthogonal init needs rank >= 2, got {tuple(shape)}")
    rows = shape[0]
    cols = int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return Tensor((gain * q).reshape(tuple(shape)).astype(dtype), requires_grad=True)


def init_xavier_normal(shape: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    fan_in, fan_out = _fans(shape)
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return Tensor((rng.standard_normal(tuple(shape)) * std).astype(dtype), requires_grad=True)


def init_kaiming(shape: Sequence[int], rng: np.random.Generator, fan_in: int | None = None, dtype=np.float32) -> Tensor:
    """He-normal init, std = sqrt(2 / fan_in)."""
    if fan_in is None:
        fan_in, _ = _fans(shape)
    std = np.sqrt(2.0 / fan_in)
    return Tensor((rng.standard_normal(tuple(shape)) * std).astype(dtype), requires_grad=True)
