"""Accuracy and confusion matrices, Grad-CAM attribution, the segmentation ablation, and report files."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from . import autograd as ag
from .autograd import Tensor
from .data.batching import SequenceSample
from .inference import eval_mode, predict_logits
from .model import ModelConfig, SsarModel, build_model, classify_sequence, embed, encoder_forward, frame_logits, normalize_images

# Reference points of the full-scale method; not reproducible on synthetic desk-scale data.
REFERENCE_ACCURACY = {"overall": 0.969, "walking": 0.962, "stationary": 0.972}
REFERENCE_ABLATION = {"simple_embedding": 0.747, "segmentation_based": 0.754, "full_finetune": 0.947}
ABLATION_MODES = ("simple_embedding", "segmentation_based", "full_finetune")


@dataclass
class ConfusionMatrix:
    """Counts with rows = true class, columns = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, true: Sequence[int], pred: Sequence[int], num_classes: int) -> "ConfusionMatrix":
        true, pred = np.asarray(true, dtype=np.int64), np.asarray(pred, dtype=np.int64)
        for name, arr in (("true", true), ("predicted", pred)):
            bad = arr[(arr < 0) | (arr >= num_classes)]
            if bad.size:
                raise ValueError(f"{name} label {int(bad[0])} outside [0, {num_classes})")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (true, pred), 1)
        return cls(counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def class_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def recall(self) -> np.ndarray:
        n = self.class_counts()
        return np.divide(np.diag(self.counts), n, out=np.zeros(len(n)), where=n > 0)

    def to_csv(self) -> str:
        k = len(self.counts)
        lines = ["true\\pred," + ",".join(str(j) for j in range(k))]
        lines += [f"{i}," + ",".join(str(int(c)) for c in row) for i, row in enumerate(self.counts)]
        return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    accuracy: float
    matrix: ConfusionMatrix
    scenario_accuracy: dict[str, float]
    predictions: np.ndarray
    sequence_ids: list[str]


def evaluate(
    model: SsarModel,
    samples: Sequence[SequenceSample],
    scenario: str | None = None,
    batch_size: int = 32,
) -> EvalResult:
    """Single deterministic pass; ``scenario`` keeps only stationary or walking sequences."""
    if scenario is not None:
        samples = [s for s in samples if s.scenario == scenario]
    if not samples:
        raise ValueError("evaluation set is empty" + (f" for scenario {scenario!r}" if scenario else ""))
    k = model.config.num_classes
    labels = np.array([s.label for s in samples])
    bad = labels[(labels < 0) | (labels >= k)]
    if bad.size:
        raise ValueError(f"label {int(bad[0])} outside [0, {k})")
    pred = predict_logits(model, samples, batch_size).argmax(axis=1)
    matrix = ConfusionMatrix.from_predictions(labels, pred, k)
    assert (matrix.class_counts() == np.bincount(labels, minlength=k)).all()
    by_scenario = {}
    for sc in sorted({s.scenario for s in samples}):
        sel = np.array([s.scenario == sc for s in samples])
        by_scenario[sc] = float(np.mean(pred[sel] == labels[sel]))
    return EvalResult(matrix.accuracy, matrix, by_scenario, pred, [s.sequence_id for s in samples])


# -- Grad-CAM ---------------------------------------------------------------------------


@dataclass
class CamMap:
    coarse: np.ndarray  # (h', w') at the target layer
    full: np.ndarray  # (H, W) bilinear upsample
    target_class: int
    frame_index: int


def cam_from_activations(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU(sum_k mean(grad_k) * A_k), min-max scaled to [0, 1]; a constant map becomes all zeros."""
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, acts, axes=1), 0.0)
    lo, hi = cam.min(), cam.max()
    if not hi > lo:
        return np.zeros_like(cam, dtype=np.float64)
    return ((cam - lo) / (hi - lo)).astype(np.float64)


def upsample_bilinear(cam: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centre bilinear resize to ``size=(H, W)``."""
    img = Image.fromarray(np.asarray(cam, dtype=np.float32), mode="F")
    return np.clip(np.asarray(img.resize((size[1], size[0]), Image.BILINEAR), dtype=np.float64), 0.0, 1.0)


def grad_cam(
    model: SsarModel,
    frames: np.ndarray,
    frame_index: int,
    target_class: int | None = None,
    level: str = "sequence",
) -> CamMap:
    """Grad-CAM on the hidden map (last encoder conv block) of one frame.

    ``level="sequence"`` differentiates the sequence logit with all other
    frames held fixed; ``level="frame"`` uses the frame's own embedding
    logits. ``target_class`` defaults to the predicted class.
    """
    frames = np.asarray(frames)
    t = len(frames)
    if not 0 <= frame_index < t:
        raise IndexError(f"frame_index {frame_index} outside [0, {t})")
    if level not in ("sequence", "frame"):
        raise ValueError("level must be 'sequence' or 'frame'")
    x = normalize_images(frames, model.config) if frames.dtype == np.uint8 else frames.astype(np.float32)
    with eval_mode(model):
        hidden = encoder_forward(model, Tensor(x)).data
        emb = embed(model, Tensor(hidden)).data
    was = model.training
    model.eval()
    try:
        leaf = Tensor(hidden[frame_index : frame_index + 1].copy(), requires_grad=True)
        own = embed(model, leaf)
        if level == "frame":
            logits = frame_logits(model, own)
        else:
            parts = []
            if frame_index > 0:
                parts.append(Tensor(emb[:frame_index]))
            parts.append(own)
            if frame_index < t - 1:
                parts.append(Tensor(emb[frame_index + 1 :]))
            seq = ag.concat(parts, axis=0) if len(parts) > 1 else own
            logits = classify_sequence(model, ag.reshape(seq, (t, 1, seq.shape[1])), [t])
        k = model.config.num_classes
        target = int(np.argmax(logits.data[0, :k])) if target_class is None else int(target_class)
        if not 0 <= target < k:
            raise ValueError(f"target_class {target} outside [0, {k})")
        logits[0, target].sum().backward()
    finally:
        model.training = was
    coarse = cam_from_activations(hidden[frame_index].astype(np.float64), leaf.grad[0].astype(np.float64))
    return CamMap(coarse, upsample_bilinear(coarse, frames.shape[1:3] if frames.dtype == np.uint8 else frames.shape[2:]), target, frame_index)


def dilated_bbox(mask: np.ndarray, margin: int = 4) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) half-open box around the mask's foreground, grown by ``margin`` and clipped."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("mask has no foreground")
    h, w = mask.shape
    return max(0, ys.min() - margin), min(h, ys.max() + 1 + margin), max(0, xs.min() - margin), min(w, xs.max() + 1 + margin)


def cam_mass_in_box(cam: np.ndarray, mask: np.ndarray, margin: int = 4) -> float:
    total = cam.sum()
    if total <= 0:
        return 0.0
    y0, y1, x0, x1 = dilated_bbox(mask, margin)
    return float(cam[y0:y1, x0:x1].sum() / total)


# -- ablation --------------------------------------------------------------------------------


@dataclass
class AblationReport:
    accuracies: dict[str, float]
    details: dict[str, dict] = field(default_factory=dict)

    def to_markdown(self) -> str:
        lines = ["| method | validation accuracy | reference (full scale) |", "|---|---|---|"]
        for mode in ABLATION_MODES:
            if mode in self.accuracies:
                lines.append(f"| {mode} | {self.accuracies[mode]:.4f} | {REFERENCE_ABLATION[mode]:.3f} |")
        return "\n".join(lines) + "\n"


def _ids(samples: Sequence[SequenceSample]) -> list[str]:
    return [s.sequence_id for s in samples]


def ablation_run(
    datasets: Mapping[str, tuple[Sequence[SequenceSample], Sequence[SequenceSample]]],
    model_config: ModelConfig,
    stage_configs: Mapping[int, "object"],
    label_only_config: "object",
    seed: int = 0,
    out_dir: str | Path | None = None,
) -> AblationReport:
    """Train each requested mode on its (train, val) pair and report validation accuracies.

    * ``simple_embedding``: encoder + embedding + LSTM end to end on the label loss, no decoder;
    * ``segmentation_based``: stages 1 and 2;
    * ``full_finetune``: stages 1, 2 and 3 (continuing from the stage-2 weights).

    All modes must use the same sequences.
    """
    from .training import run_pipeline, train_label_only

    unknown = set(datasets) - set(ABLATION_MODES)
    if unknown:
        raise ValueError(f"unknown ablation modes {sorted(unknown)}")
    if not datasets:
        raise ValueError("no ablation modes requested")
    ref = None
    for mode, (train, val) in datasets.items():
        key = (_ids(train), _ids(val))
        if ref is not None and key != ref:
            raise ValueError(f"ablation mode {mode!r} uses a different dataset from the others")
        ref = key
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    acc: dict[str, float] = {}
    details: dict[str, dict] = {}
    if "simple_embedding" in datasets:
        train, val = datasets["simple_embedding"]
        model = build_model(model_config, seed)
        res = train_label_only(model, train, val, label_only_config, metrics_path=out / "simple_embedding.jsonl" if out else None)
        acc["simple_embedding"] = evaluate(model, val).accuracy
        details["simple_embedding"] = {"steps": res.steps, "epochs": res.epochs}
    staged = [m for m in ("segmentation_based", "full_finetune") if m in datasets]
    if staged:
        train, val = datasets[staged[0]]
        upto = 3 if "full_finetune" in datasets else 2
        result = run_pipeline(model_config, train, val, stage_configs, seed=seed, out_dir=out, upto=upto)
        if "segmentation_based" in datasets:
            acc["segmentation_based"] = result.stage_accuracy[2]
        if "full_finetune" in datasets:
            acc["full_finetune"] = result.stage_accuracy[3]
        details["staged"] = {"stage_accuracy": result.stage_accuracy}
    ordered = {m: acc[m] for m in ABLATION_MODES if m in acc}
    report = AblationReport(ordered, details)
    if out is not None:
        (out / "ablation.md").write_text(report.to_markdown())
    return report


# -- report files -------------------------------------------------------------------------------


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def cam_overlay(frame: np.ndarray, cam: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red heat layer proportional to ``cam`` over an RGB frame."""
    heat = np.zeros_like(frame, dtype=np.float64)
    heat[..., 0] = 255.0 * cam
    mix = (1 - alpha * cam[..., None]) * frame.astype(np.float64) + alpha * cam[..., None] * heat
    return np.clip(np.round(mix), 0, 255).astype(np.uint8)


def render_reports(
    result: EvalResult | ConfusionMatrix,
    out_dir: str | Path,
    cams: Sequence[tuple[str, np.ndarray, CamMap]] = (),
    title: str = "Evaluation",
) -> list[Path]:
    """Write ``confusion.csv``, one ``cam_<id>_<frame>.png`` overlay per CAM and ``summary.md``.

    ``cams`` holds ``(sequence_id, frame_rgb, cam)`` triples. Output depends
    only on the inputs, so re-rendering gives identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix = result.matrix if isinstance(result, EvalResult) else result
    written = []
    p = out / "confusion.csv"
    p.write_text(matrix.to_csv())
    written.append(p)
    for sid, frame, cam in cams:
        p = out / f"cam_{sid}_{cam.frame_index:04d}.png"
        p.write_bytes(png_bytes(cam_overlay(frame, cam.full)))
        written.append(p)
    lines = [f"# {title}", "", f"- sequences: {matrix.total}", f"- accuracy: {matrix.accuracy:.4f}"]
    if isinstance(result, EvalResult):
        for sc, a in result.scenario_accuracy.items():
            lines.append(f"- {sc} accuracy: {a:.4f}")
    lines += ["", "| class | count | recall |", "|---|---|---|"]
    for i, (n, r) in enumerate(zip(matrix.class_counts(), matrix.recall())):
        lines.append(f"| {i} | {int(n)} | {r:.4f} |")
    lines += [
        "",
        "Full-scale reference (not reproducible at desk scale): "
        f"overall {REFERENCE_ACCURACY['overall']}, walking {REFERENCE_ACCURACY['walking']}, stationary {REFERENCE_ACCURACY['stationary']}.",
    ]
    p = out / "summary.md"
    p.write_text("\n".join(lines) + "\n")
    written.append(p)
    return written
