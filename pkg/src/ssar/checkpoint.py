"""Binary named-tensor checkpoints and the per-sequence embedding archive.

Checkpoint layout (little-endian)::

    b"SSARCKPT" | u32 version | u32 count
    count x ( u16 name_len | name utf-8 | u8 dtype (0=f32, 1=f64) | u8 rank | rank x u64 dim | data )
    u32 crc32 of every preceding byte

Besides model parameters and buffers a checkpoint carries ``meta.config``
(the config fingerprint), ``meta.stage``, ``meta.train.<key>`` scalars for
resuming, and ``adam.step`` / ``adam.m.<path>`` / ``adam.v.<path>``.

Embedding archive layout::

    b"SSAREMB1" | u32 count
    count x ( u16 id_len | id utf-8 | u32 label | u32 T | T x dim f32 )
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import CheckpointError
from .model import PARAM_GROUPS, ModelConfig, SsarModel
from .nn.optim import AdamState

MAGIC = b"SSARCKPT"
VERSION = 1
EMB_MAGIC = b"SSAREMB1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _with_crc(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _check_crc(blob: bytes, what: str) -> bytes:
    if len(blob) < 4:
        raise CheckpointError(f"{what}: file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{what}: CRC mismatch (file corrupted or truncated)")
    return body


class _Reader:
    def __init__(self, body: bytes, what: str):
        self.body, self.pos, self.what = body, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise CheckpointError(f"{self.what}: unexpected end of data")
        out = self.body[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.pos != len(self.body):
            raise CheckpointError(f"{self.what}: {len(self.body) - self.pos} trailing bytes")


# -- named tensors ---------------------------------------------------------------


def encode_tensors(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    return _with_crc(b"".join(parts))


def decode_tensors(blob: bytes, what: str = "checkpoint") -> dict[str, np.ndarray]:
    body = _check_crc(blob, what)
    r = _Reader(body, what)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{what}: bad magic (not a checkpoint)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{what}: unsupported version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{what}: {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q")
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size), dtype=dt).reshape(shape)
        if name in out:
            raise CheckpointError(f"{what}: duplicate tensor {name!r}")
        out[name] = arr.astype(dt.newbyteorder("="))
    r.done()
    return out


def write_tensor_file(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensor_file(path: str | Path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    return decode_tensors(blob, str(path))


# -- model checkpoints --------------------------------------------------------------


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    fingerprint: np.ndarray
    stage: int = 0
    train_state: dict[str, float] = field(default_factory=dict)
    adam: AdamState | None = None

    def groups(self) -> list[str]:
        return [g for g in PARAM_GROUPS if any(k.startswith(g + ".") for k in self.tensors)]


def checkpoint_tensors(
    model: SsarModel,
    adam: AdamState | None = None,
    stage: int = 0,
    train_state: Mapping[str, float] | None = None,
    groups: Sequence[str] = PARAM_GROUPS,
) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {
        "meta.config": model.config.fingerprint(),
        "meta.stage": np.array([stage], dtype=np.float64),
    }
    for key, value in sorted((train_state or {}).items()):
        out[f"meta.train.{key}"] = np.array([value], dtype=np.float64)
    for name, arr in model.state_arrays().items():
        if name.split(".", 1)[0] in groups:
            out[name] = arr
    if adam is not None:
        out["adam.step"] = np.array([adam.t], dtype=np.float64)
        for name in sorted(adam.m):
            out[f"adam.m.{name}"] = adam.m[name]
            out[f"adam.v.{name}"] = adam.v[name]
    return out


def save_checkpoint(
    path: str | Path,
    model: SsarModel,
    adam: AdamState | None = None,
    stage: int = 0,
    train_state: Mapping[str, float] | None = None,
    groups: Sequence[str] = PARAM_GROUPS,
) -> None:
    """Write parameters and buffers of ``groups`` plus optional optimizer and resume state."""
    write_tensor_file(path, checkpoint_tensors(model, adam, stage, train_state, groups))


def load_checkpoint(path: str | Path, config: ModelConfig | None = None) -> Checkpoint:
    """Read and validate a checkpoint; with ``config`` the fingerprint must match it."""
    tensors = read_tensor_file(path)
    if "meta.config" not in tensors:
        raise CheckpointError(f"{path}: missing meta.config")
    fp = tensors.pop("meta.config")
    if config is not None:
        check_fingerprint(fp, config, str(path))
    stage = int(tensors.pop("meta.stage", np.zeros(1))[0])
    train_state = {k[len("meta.train.") :]: float(tensors.pop(k)[0]) for k in sorted(tensors) if k.startswith("meta.train.")}
    adam = None
    if "adam.step" in tensors:
        adam = AdamState(t=int(tensors.pop("adam.step")[0]))
        for k in sorted(tensors):
            if k.startswith("adam.m."):
                adam.m[k[7:]] = tensors.pop(k).copy()
            elif k.startswith("adam.v."):
                adam.v[k[7:]] = tensors.pop(k).copy()
    for k in tensors:
        if k.split(".", 1)[0] not in PARAM_GROUPS:
            raise CheckpointError(f"{path}: unknown tensor path {k!r}")
    return Checkpoint(tensors, fp, stage, train_state, adam)


def check_fingerprint(fp: np.ndarray, config: ModelConfig, what: str = "checkpoint") -> None:
    want = config.fingerprint()
    if fp.shape != want.shape or not np.array_equal(fp, want):
        raise CheckpointError(f"{what}: model config fingerprint does not match (checkpoint {fp.tolist()} vs config {want.tolist()})")


def apply_checkpoint(model: SsarModel, ckpt: Checkpoint, groups: Iterable[str] | None = None) -> None:
    """Copy the checkpoint's tensors for ``groups`` (default: all it holds) into ``model``.

    Every tensor in the checkpoint must name a model parameter or buffer, and
    each requested group must be complete.
    """
    check_fingerprint(ckpt.fingerprint, model.config)
    state = model.state_arrays()
    for k in ckpt.tensors:
        if k not in state:
            raise CheckpointError(f"unknown tensor path {k!r} for this model")
    groups = list(ckpt.groups() if groups is None else groups)
    for name, arr in state.items():
        if name.split(".", 1)[0] not in groups:
            continue
        if name not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks {name!r}")
        src = ckpt.tensors[name]
        if src.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {src.shape} does not match model {arr.shape}")
        if name in model.params:
            model.params[name].assign_(src)
        else:
            model.buffers[name][...] = src


def import_pretrained(model: SsarModel, path: str | Path, prefix: str = "encoder.") -> list[str]:
    """Copy tensors under ``prefix`` from an external named-tensor file; returns imported paths."""
    tensors = read_tensor_file(path)
    state = model.state_arrays()
    done = []
    for name, arr in tensors.items():
        if not name.startswith(prefix):
            continue
        if name not in state:
            raise CheckpointError(f"{path}: unknown tensor path {name!r}")
        if arr.shape != state[name].shape:
            raise CheckpointError(f"{path}: {name}: shape {arr.shape} does not match model {state[name].shape}")
        if name in model.params:
            model.params[name].assign_(arr)
        else:
            model.buffers[name][...] = arr
        done.append(name)
    return done


# -- embedding archive -----------------------------------------------------------------


@dataclass
class EmbeddingRecord:
    sequence_id: str
    label: int
    embeddings: np.ndarray  # (T, dim) float32


def encode_embeddings(records: Sequence[EmbeddingRecord]) -> bytes:
    parts = [EMB_MAGIC, struct.pack("<I", len(records))]
    for rec in records:
        raw = rec.sequence_id.encode("utf-8")
        emb = np.ascontiguousarray(rec.embeddings, dtype="<f4")
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise CheckpointError(f"{rec.sequence_id}: embeddings must be (T>=1, dim)")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", rec.label, emb.shape[0]))
        parts.append(emb.tobytes())
    return _with_crc(b"".join(parts))


def decode_embeddings(blob: bytes, dim: int, what: str = "embedding archive") -> list[EmbeddingRecord]:
    body = _check_crc(blob, what)
    r = _Reader(body, what)
    if r.take(8) != EMB_MAGIC:
        raise CheckpointError(f"{what}: bad magic (not an embedding archive)")
    (count,) = r.unpack("<I")
    out = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        sid = r.take(n).decode("utf-8")
        label, length = r.unpack("<II")
        emb = np.frombuffer(r.take(4 * length * dim), dtype="<f4").reshape(length, dim).astype(np.float32)
        out.append(EmbeddingRecord(sid, int(label), emb))
    try:
        r.done()
    except CheckpointError as exc:
        raise CheckpointError(f"{what}: size does not fit embedding dim {dim}") from exc
    return out


def write_embeddings(path: str | Path, records: Sequence[EmbeddingRecord]) -> None:
    Path(path).write_bytes(encode_embeddings(records))


def read_embeddings(path: str | Path, dim: int) -> list[EmbeddingRecord]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from exc
    return decode_embeddings(blob, dim, str(path))
