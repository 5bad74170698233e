"""Dataset I/O, depth-derived masks, splits, batching and the synthetic generator."""

from .batching import SequenceBatch, SequenceSample, pad_and_batch, pad_sequences
from .loading import frame_set, load_sequence, load_sequences, ordered_map, prep_masks
from .manifest import FIELDS, SCENARIOS, SPLITS, ManifestRow, read_manifest, write_manifest
from .masks import depth_to_mask
from .splits import FrameRecord, split_counts, split_dataset
from .synth import TRAJECTORIES, render_sequence, synth_generate

__all__ = [
    "FIELDS",
    "SCENARIOS",
    "SPLITS",
    "TRAJECTORIES",
    "FrameRecord",
    "ManifestRow",
    "SequenceBatch",
    "SequenceSample",
    "depth_to_mask",
    "frame_set",
    "load_sequence",
    "load_sequences",
    "ordered_map",
    "pad_and_batch",
    "pad_sequences",
    "prep_masks",
    "read_manifest",
    "render_sequence",
    "split_counts",
    "split_dataset",
    "synth_generate",
    "write_manifest",
]
