"""Three-stage training: segmentation + frame labels, LSTM on stored embeddings, end-to-end.

All stages share one loop: seeded per-epoch shuffling, Adam, a JSONL
metrics log, validation after every epoch, patience-based early stopping
that keeps the best weights, and resumable state (including the position
inside an interrupted epoch).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint, EmbeddingRecord, apply_checkpoint, load_checkpoint, save_checkpoint, write_embeddings
from .data.batching import SequenceSample, pad_sequences
from .errors import ConfigError, TrainingError
from .inference import classify_embeddings, encode_frames, frame_accuracy, sequence_accuracy
from .model import (
    PARAM_GROUPS,
    SsarModel,
    classify_sequence,
    decoder_forward,
    embed,
    encoder_forward,
    frame_logits,
    normalize_images,
)
from .nn import functional as F
from .nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {
    1: dict(lr=1e-6, batch_size=100),
    2: dict(lr=1e-2, batch_size=100),
    3: dict(lr=1e-3, batch_size=1),
}


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr: float
    batch_size: int
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    seg_weight: float = 1.0
    label_weight: float = 1.0
    lr_after_drop: float = 1e-3
    divergence_window: int = 200
    divergence_count: int = 3
    phase1_max_epochs: int | None = None
    freeze_bn: bool = True
    max_steps: int | None = None

    @classmethod
    def for_stage(cls, stage: int, **overrides) -> "StageConfig":
        if stage not in STAGE_DEFAULTS:
            raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
        cfg = cls(stage=stage, **{**STAGE_DEFAULTS[stage], **overrides})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not self.lr > 0 or not self.lr_after_drop > 0:
            raise ConfigError("learning rates must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.divergence_window < 1 or self.divergence_count < 1:
            raise ConfigError("divergence_window and divergence_count must be >= 1")


@dataclass
class TrainResult:
    best_accuracy: float
    steps: int
    epochs: int
    stopped_early: bool
    interrupted: bool
    lr: float
    history: list[dict] = field(default_factory=list)


class MetricsLog:
    """Append-only JSONL: {step, stage, loss, seg_loss, label_loss, val_accuracy?, lr}; no timestamps."""

    def __init__(self, path: str | Path | None, resume_step: int = 0):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path is not None:
            if resume_step and self.path.exists():
                kept = [ln for ln in self.path.read_text().splitlines() if ln and json.loads(ln)["step"] <= resume_step]
                self.path.write_text("".join(ln + "\n" for ln in kept))
            else:
                self.path.write_text("")

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _record(step, stage, loss, seg, label, lr, val=None) -> dict:
    rec = {"step": step, "stage": stage, "loss": loss, "seg_loss": seg, "label_loss": label}
    if val is not None:
        rec["val_accuracy"] = val
    rec["lr"] = lr
    return rec


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation cut into batches; a trailing single item joins the previous batch (batch-norm needs >= 2)."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1 and batch_size > 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


StepFn = Callable[[np.ndarray], tuple[Tensor, Tensor | None, Tensor | None]]


def _finite(x) -> bool:
    return x is None or math.isfinite(float(x))


def run_training(
    model: SsarModel,
    cfg: StageConfig,
    n_items: int,
    step_fn: StepFn,
    evaluate: Callable[[], float],
    groups: Sequence[str],
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    resume: Checkpoint | None = None,
    save_groups: Sequence[str] = PARAM_GROUPS,
    initial_best: float | None = None,
) -> TrainResult:
    """Generic loop shared by every stage.

    ``step_fn`` builds the loss for a batch of item indices and returns
    ``(loss, seg_loss, label_loss)``. After each epoch ``evaluate`` gives the
    validation accuracy; improving it saves ``checkpoint_path``, otherwise
    the patience counter grows. The best weights are restored on exit.
    ``initial_best`` scores the incoming weights so they count as a candidate.
    ``<checkpoint_path>.last`` holds the full resume state.
    """
    if n_items == 0:
        raise TrainingError(f"stage {cfg.stage}: empty training set")
    cfg.validate()
    params = {k: p for k, p in model.params.items() if k.split(".", 1)[0] in groups}
    state = dict(epoch=0, pos=0, step=0, lr=cfg.lr, best_acc=-1.0, bad_evals=0, phase=1, win_sum=0.0, win_n=0, prev_avg=math.nan, rises=0)
    adam = AdamState()
    if resume is not None:
        apply_checkpoint(model, resume)
        state.update({k: type(state[k])(v) if k in state else v for k, v in resume.train_state.items()})
        adam = resume.adam or AdamState()
    metrics = MetricsLog(metrics_path, resume_step=int(state["step"]))
    ckpt = Path(checkpoint_path) if checkpoint_path else None
    last = ckpt.with_name(ckpt.name + ".last") if ckpt else None
    best_state: dict[str, np.ndarray] | None = None
    if resume is not None and ckpt is not None and ckpt.exists() and state["best_acc"] >= 0:
        best_state = {k: v.copy() for k, v in load_checkpoint(ckpt, model.config).tensors.items()}
    stopped = interrupted = False

    def snapshot() -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in model.state_arrays().items()}

    if initial_best is not None and resume is None:
        state["best_acc"] = float(initial_best)
        best_state = snapshot()
        if ckpt is not None:
            save_checkpoint(ckpt, model, None, cfg.stage, {"best_acc": state["best_acc"], "step": 0}, groups=save_groups)

    def save_last():
        if last is not None:
            save_checkpoint(last, model, adam, cfg.stage, state, groups=save_groups)

    def drop_lr(reason: str):
        state["phase"], state["lr"], state["bad_evals"] = 2, cfg.lr_after_drop, 0
        log.info("stage %d: lr %g -> %g (%s) at step %d", cfg.stage, cfg.lr, cfg.lr_after_drop, reason, state["step"])

    two_phase = cfg.stage == 2
    while state["epoch"] < cfg.max_epochs and not stopped:
        batches = _epoch_batches(n_items, cfg.batch_size, cfg.seed, int(state["epoch"]))
        pending = None
        for b in range(int(state["pos"]), len(batches)):
            if cfg.max_steps is not None and state["step"] >= cfg.max_steps:
                interrupted = True
                break
            model.zero_grad()
            loss, seg, label = step_fn(batches[b])
            values = [float(loss.item()), None if seg is None else float(seg.item()), None if label is None else float(label.item())]
            if not all(_finite(v) for v in values):
                raise TrainingError(
                    f"stage {cfg.stage} step {int(state['step']) + 1}: non-finite loss "
                    f"(loss={values[0]}, seg_loss={values[1]}, label_loss={values[2]}, lr={state['lr']})"
                )
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, adam, state["lr"])
            state["step"] += 1
            state["pos"] = b + 1
            rec = _record(int(state["step"]), cfg.stage, *values, state["lr"])
            if b + 1 < len(batches):
                metrics.write(rec)
            else:
                pending = rec
            if two_phase and state["phase"] == 1:
                state["win_sum"] += values[0]
                state["win_n"] += 1
                if state["win_n"] >= cfg.divergence_window:
                    avg = state["win_sum"] / state["win_n"]
                    state["rises"] = state["rises"] + 1 if avg > state["prev_avg"] else 0
                    state["prev_avg"], state["win_sum"], state["win_n"] = avg, 0.0, 0
                    if state["rises"] >= cfg.divergence_count:
                        drop_lr("training loss diverging")
        if interrupted:
            save_last()
            break
        acc = float(evaluate())
        if pending is not None:
            pending["val_accuracy"] = acc
            pending["lr"] = pending.pop("lr")
            metrics.write(pending)
        state["epoch"] += 1
        state["pos"] = 0
        if acc > state["best_acc"]:
            state["best_acc"], state["bad_evals"] = acc, 0
            best_state = snapshot()
            if ckpt is not None:
                save_checkpoint(ckpt, model, None, cfg.stage, {"best_acc": acc, "step": state["step"]}, groups=save_groups)
        else:
            state["bad_evals"] += 1
        log.info("stage %d epoch %d: val accuracy %.4f (best %.4f)", cfg.stage, state["epoch"], acc, state["best_acc"])
        if two_phase and state["phase"] == 1:
            if cfg.phase1_max_epochs is not None and state["epoch"] >= cfg.phase1_max_epochs:
                drop_lr("phase-1 epoch limit")
            elif state["bad_evals"] >= cfg.patience:
                drop_lr("validation plateau")
        elif state["bad_evals"] >= cfg.patience:
            stopped = True
        save_last()

    if best_state is not None and not interrupted:
        for k, v in best_state.items():
            if k in model.params:
                model.params[k].assign_(v)
            elif k in model.buffers:
                model.buffers[k][...] = v
    return TrainResult(
        best_accuracy=float(state["best_acc"]),
        steps=int(state["step"]),
        epochs=int(state["epoch"]),
        stopped_early=stopped,
        interrupted=interrupted,
        lr=float(state["lr"]),
        history=metrics.records,
    )


# -- stage 1 ---------------------------------------------------------------------------


@dataclass
class FrameDataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    masks: np.ndarray  # (N, H, W) {0, 1}
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.labels)


def stage1_losses(model: SsarModel, images: np.ndarray, masks: np.ndarray, labels: np.ndarray, cfg: StageConfig | None = None):
    """(total, seg, label) for one frame batch; total = w_seg * seg + w_label * label."""
    ws, wl = (1.0, 1.0) if cfg is None else (cfg.seg_weight, cfg.label_weight)
    hidden = encoder_forward(model, Tensor(normalize_images(images, model.config)))
    seg = F.pixelwise_cross_entropy(decoder_forward(model, hidden), masks)
    label = F.softmax_cross_entropy(frame_logits(model, embed(model, hidden)), labels)
    total = seg + label if (ws, wl) == (1.0, 1.0) else ag.scale(seg, ws) + ag.scale(label, wl)
    return total, seg, label


def train_stage1(
    model: SsarModel,
    train: FrameDataset,
    val: FrameDataset | None,
    cfg: StageConfig,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Encoder, decoder and embedding trained jointly on segmentation + per-frame label loss."""
    if len(train) == 0:
        raise TrainingError("stage 1: empty frame dataset")
    val = val if val is not None and len(val) else train
    model.train()

    def step(idx):
        model.train()
        return stage1_losses(model, train.images[idx], train.masks[idx], train.labels[idx], cfg)

    return run_training(
        model,
        cfg,
        len(train),
        step,
        lambda: frame_accuracy(model, val.images, val.labels),
        ("encoder", "decoder", "embed"),
        checkpoint_path,
        metrics_path,
        resume,
        save_groups=("encoder", "decoder", "embed"),
    )


# -- embeddings and stage 2 ---------------------------------------------------------------


def export_embeddings(model: SsarModel, samples: Sequence[SequenceSample], out_file: str | Path | None = None) -> list[EmbeddingRecord]:
    """Per-sequence (T, E) float32 embeddings in eval mode, optionally written as an archive."""
    records = []
    for s in samples:
        if s.frames is None or len(s.frames) == 0:
            raise TrainingError(f"{s.sequence_id}: no frames to embed")
        records.append(EmbeddingRecord(s.sequence_id, int(s.label), encode_frames(model, s.frames)))
    if out_file is not None:
        write_embeddings(out_file, records)
    return records


def _check_embedding_dim(model: SsarModel, records: Sequence[EmbeddingRecord]) -> None:
    e = model.config.embedding_dim
    for r in records:
        if r.embeddings.ndim != 2 or r.embeddings.shape[1] != e:
            raise TrainingError(f"{r.sequence_id}: embedding width {r.embeddings.shape[1:]} does not match model embedding_dim {e}")
        if not 0 <= r.label < model.config.num_classes:
            raise TrainingError(f"{r.sequence_id}: label {r.label} outside [0, {model.config.num_classes})")


def embedding_accuracy(model: SsarModel, records: Sequence[EmbeddingRecord]) -> float:
    logits = classify_embeddings(model, [r.embeddings for r in records])
    return float(np.mean(logits.argmax(axis=1) == np.array([r.label for r in records])))


def train_stage2(
    model: SsarModel,
    train: Sequence[EmbeddingRecord],
    val: Sequence[EmbeddingRecord] | None,
    cfg: StageConfig,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """LSTM + final layer on stored embeddings; lr drops once training loss diverges or validation plateaus."""
    if not train:
        raise TrainingError("stage 2: empty embedding archive")
    _check_embedding_dim(model, train)
    val = list(val) if val else list(train)
    _check_embedding_dim(model, val)

    def step(idx):
        data, lengths = pad_sequences([train[i].embeddings for i in idx])
        logits = classify_sequence(model, Tensor(data), lengths)
        loss = F.softmax_cross_entropy(logits, [train[i].label for i in idx])
        return loss, None, loss

    return run_training(
        model, cfg, len(train), step, lambda: embedding_accuracy(model, val), ("lstm",), checkpoint_path, metrics_path, resume, save_groups=("lstm",)
    )


# -- stage 3 -----------------------------------------------------------------------------------


def stage3_losses(model: SsarModel, sample: SequenceSample):
    """(total, seg, label) for one sequence: sequence label CE + mean per-frame segmentation CE."""
    if sample.masks is None:
        raise TrainingError(f"{sample.sequence_id}: stage 3 needs masks")
    hidden = encoder_forward(model, Tensor(normalize_images(sample.frames, model.config)))
    seg = F.pixelwise_cross_entropy(decoder_forward(model, hidden), sample.masks)
    emb = embed(model, hidden)
    logits = classify_sequence(model, ag.reshape(emb, (len(sample), 1, emb.shape[1])), [len(sample)])
    label = F.softmax_cross_entropy(logits, [sample.label])
    return seg + label, seg, label


def train_stage3(
    model: SsarModel,
    train: Sequence[SequenceSample],
    val: Sequence[SequenceSample] | None,
    cfg: StageConfig,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Whole network end to end, one sequence per step.

    With ``freeze_bn`` (default) batch-norm layers use their stage-1
    running statistics, since a single short sequence gives noisy batch
    statistics. Validation accuracy before any update seeds the best score,
    so fine-tuning never returns weights worse than its starting point.
    """
    if not train:
        raise TrainingError("stage 3: empty sequence dataset")
    if cfg.batch_size != 1:
        raise ConfigError("stage 3 trains on one sequence per batch")
    val = list(val) if val else list(train)

    def set_mode():
        model.eval() if cfg.freeze_bn else model.train()

    def step(idx):
        set_mode()
        return stage3_losses(model, train[int(idx[0])])

    def evaluate():
        acc = sequence_accuracy(model, val)
        set_mode()
        return acc

    base = evaluate() if resume is None else None
    set_mode()
    return run_training(
        model, cfg, len(train), step, evaluate, PARAM_GROUPS, checkpoint_path, metrics_path, resume, initial_best=base
    )


# -- label-only end-to-end baseline (no decoder) ------------------------------------------------------


def sequence_batch_loss(model: SsarModel, samples: Sequence[SequenceSample]):
    """Label CE for a batch of whole sequences; frames are encoded together and scattered into (T, B, E)."""
    lengths = [len(s) for s in samples]
    frames = np.concatenate([s.frames for s in samples])
    emb = embed(model, encoder_forward(model, Tensor(normalize_images(frames, model.config))))
    t_max, b = max(lengths), len(samples)
    index = np.full(t_max * b, -1, dtype=np.int64)
    offset = 0
    for i, n in enumerate(lengths):
        index[np.arange(n) * b + i] = offset + np.arange(n)
        offset += n
    padded = ag.reshape(ag.gather_rows(emb, index), (t_max, b, emb.shape[1]))
    logits = classify_sequence(model, padded, lengths)
    return F.softmax_cross_entropy(logits, [s.label for s in samples])


def train_label_only(
    model: SsarModel,
    train: Sequence[SequenceSample],
    val: Sequence[SequenceSample] | None,
    cfg: StageConfig,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
) -> TrainResult:
    """Encoder + embedding + LSTM trained from scratch with the sequence label loss only."""
    if not train:
        raise TrainingError("empty sequence dataset")
    val = list(val) if val else list(train)

    def step(idx):
        model.train()
        loss = sequence_batch_loss(model, [train[i] for i in idx])
        return loss, None, loss

    groups = ("encoder", "embed", "lstm")
    return run_training(
        model, cfg, len(train), step, lambda: sequence_accuracy(model, val), groups, checkpoint_path, metrics_path, save_groups=groups
    )


# -- whole procedure ------------------------------------------------------------------------------


@dataclass
class PipelineResult:
    model: SsarModel
    stage_accuracy: dict[int, float]
    results: dict[int, TrainResult]


def frames_of(samples: Sequence[SequenceSample]) -> FrameDataset:
    from .data.loading import frame_set

    return FrameDataset(*frame_set(samples))


def run_pipeline(
    model_config,
    train: Sequence[SequenceSample],
    val: Sequence[SequenceSample],
    stage_configs: dict[int, StageConfig],
    seed: int = 0,
    out_dir: str | Path | None = None,
    upto: int = 3,
) -> PipelineResult:
    """Stage 1 on frames with visible hands, embedding export, stage 2, then (optionally) stage 3.

    ``stage_accuracy[1]`` is validation frame accuracy; entries 2 and 3 are
    validation sequence accuracy after the respective stage.
    """
    from .model import build_model

    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def path(name):
        return out / name if out is not None else None

    model = build_model(model_config, seed)
    acc, results = {}, {}
    results[1] = train_stage1(model, frames_of(train), frames_of(val), stage_configs[1], path("stage1.ckpt"), path("stage1.jsonl"))
    acc[1] = results[1].best_accuracy
    emb_train = export_embeddings(model, train, path("train.emb"))
    emb_val = export_embeddings(model, val, path("val.emb"))
    results[2] = train_stage2(model, emb_train, emb_val, stage_configs[2], path("stage2.ckpt"), path("stage2.jsonl"))
    acc[2] = sequence_accuracy(model, val)
    if upto >= 3:
        results[3] = train_stage3(model, train, val, stage_configs[3], path("stage3.ckpt"), path("stage3.jsonl"))
        acc[3] = sequence_accuracy(model, val)
    return PipelineResult(model, acc, results)
