"""Batched, gradient-free forward passes over frames and sequences."""

from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from .autograd import Tensor, no_grad
from .data.batching import SequenceSample
from .model import SsarModel, classify_sequence, embed_frames, normalize_images


@contextmanager
def eval_mode(model: SsarModel) -> Iterator[SsarModel]:
    was = model.training
    model.eval()
    try:
        with no_grad():
            yield model
    finally:
        model.training = was


def encode_frames(model: SsarModel, frames: np.ndarray, chunk: int = 64) -> np.ndarray:
    """uint8 frames (N, H, W, 3) -> embeddings (N, E) float32, eval mode."""
    out = []
    with eval_mode(model):
        for start in range(0, len(frames), chunk):
            x = Tensor(normalize_images(frames[start : start + chunk], model.config))
            out.append(embed_frames(model, x).data)
    return np.concatenate(out).astype(np.float32, copy=False)


def frame_accuracy(model: SsarModel, frames: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    """Fraction of frames whose leading-K embedding argmax equals the label."""
    emb = encode_frames(model, frames, chunk)
    k = model.config.num_classes
    return float(np.mean(emb[:, :k].argmax(axis=1) == labels))


def classify_embeddings(model: SsarModel, sequences: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Per-sequence embeddings (T_i, E) -> logits (N, K)."""
    out = []
    with eval_mode(model):
        for start in range(0, len(sequences), batch_size):
            chunk = sequences[start : start + batch_size]
            lengths = [len(s) for s in chunk]
            padded = np.zeros((max(lengths), len(chunk), chunk[0].shape[1]), np.float32)
            for i, s in enumerate(chunk):
                padded[: len(s), i] = s
            out.append(classify_sequence(model, Tensor(padded), lengths).data)
    return np.concatenate(out)


def predict_logits(model: SsarModel, samples: Sequence[SequenceSample], batch_size: int = 32, chunk: int = 64) -> np.ndarray:
    """Sequence logits (N, K) for in-memory samples; never runs the decoder."""
    return classify_embeddings(model, [encode_frames(model, s.frames, chunk) for s in samples], batch_size)


def sequence_accuracy(model: SsarModel, samples: Sequence[SequenceSample], batch_size: int = 32) -> float:
    logits = predict_logits(model, samples, batch_size)
    return float(np.mean(logits.argmax(axis=1) == np.array([s.label for s in samples])))


__all__ = ["classify_embeddings", "encode_frames", "eval_mode", "frame_accuracy", "predict_logits", "sequence_accuracy"]
