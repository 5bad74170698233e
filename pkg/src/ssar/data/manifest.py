"""Sequence manifest CSV: one row per gesture video."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, replace
from pathlib import Path

FIELDS = ("sequence_id", "subject", "scenario", "label", "split", "frames_dir", "depth_dir", "mask_dir", "num_frames")
SCENARIOS = ("stationary", "walking")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRow:
    sequence_id: str
    subject: str
    scenario: str
    label: int
    split: str
    frames_dir: str
    depth_dir: str
    mask_dir: str
    num_frames: int

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"{self.sequence_id}: scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.split not in SPLITS + ("",):
            raise ValueError(f"{self.sequence_id}: split must be one of {SPLITS} or empty, got {self.split!r}")
        if self.num_frames < 1:
            raise ValueError(f"{self.sequence_id}: a sequence needs at least one frame")
        if self.label < 0:
            raise ValueError(f"{self.sequence_id}: negative label")


def read_manifest(path: str | Path) -> list[ManifestRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"{path}: manifest header must be {','.join(FIELDS)}")
        rows = []
        for rec in reader:
            rec["label"] = int(rec["label"])
            rec["num_frames"] = int(rec["num_frames"])
            rows.append(ManifestRow(**rec))
    ids = [r.sequence_id for r in rows]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: duplicate sequence_id")
    return rows


def write_manifest(path: str | Path, rows: list[ManifestRow]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))


def resolve(base: str | Path, rel: str) -> Path | None:
    """Resolve a manifest directory entry relative to the manifest's folder; '' means absent."""
    if not rel:
        return None
    p = Path(rel)
    return p if p.is_absolute() else Path(base) / p


def relative_to(path: str | Path, base: str | Path) -> str:
    """``path`` relative to ``base`` when it lies below it, absolute otherwise."""
    path, base = Path(path).resolve(), Path(base).resolve()
    try:
        return str(path.relative_to(base))
    except ValueError:
        return str(path)


def rebase_rows(rows: list[ManifestRow], old_base: str | Path, new_base: str | Path) -> list[ManifestRow]:
    """Rewrite directory entries so they resolve the same from a manifest stored in ``new_base``."""

    def move(rel: str) -> str:
        p = resolve(old_base, rel)
        return "" if p is None else relative_to(p, new_base)

    if Path(old_base).resolve() == Path(new_base).resolve():
        return list(rows)
    return [replace(r, frames_dir=move(r.frames_dir), depth_dir=move(r.depth_dir), mask_dir=move(r.mask_dir)) for r in rows]


def frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")

