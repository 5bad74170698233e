"""``ssar`` command line: data preparation, three-stage training, evaluation and attribution.

Usage errors exit with status 2 and runtime failures with status 1; both
print exactly one ``error: ...`` line to stderr. ``SSAR_LOG`` selects the
log level (error, info, debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import apply_checkpoint, import_pretrained, load_checkpoint, read_embeddings
from .config import RunConfig, load_run_config
from .data import load_sequences, prep_masks, read_manifest, split_dataset, synth_generate, write_manifest
from .data.images import read_rgb
from .data.manifest import frame_files, rebase_rows
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .model import SsarModel, build_model, recognize

log = logging.getLogger("ssar")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # single-line usage errors
        raise UsageError(f"{self.prog}: {message}")


def _fmt(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, max_help_position=32)


# -- shared helpers -------------------------------------------------------------------


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return parts


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value run configuration file")
    p.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[], metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--preset", choices=("paper", "tiny"), help="model size preset (overrides config)")
    p.add_argument("--seed", type=int, help="seed for all randomness (overrides config)")
    p.add_argument("--workers", type=int, help="image decoding threads; never changes results (overrides config)")


def _run_config(args, extra: dict[str, str] | None = None) -> RunConfig:
    values = dict(args.overrides)
    for flag in ("preset", "seed", "workers"):
        if getattr(args, flag, None) is not None:
            values[flag] = str(getattr(args, flag))
    values.update(extra or {})
    cfg = load_run_config(args.config, values)
    log.info("resolved config:\n%s", cfg.to_text().rstrip())
    return cfg


def _model(cfg: RunConfig, checkpoints: Sequence[str] = ()) -> SsarModel:
    model = build_model(cfg.model_config(), cfg.seed)
    for path in checkpoints:
        apply_checkpoint(model, load_checkpoint(path, model.config))
    return model


def _split_rows(manifest: str, split: str | None):
    rows = read_manifest(manifest)
    if split is None:
        return rows
    sel = [r for r in rows if r.split == split]
    if not sel:
        raise ValueError(f"{manifest}: no sequences in split {split!r}")
    return sel


def _samples(cfg: RunConfig, manifest: str, split: str | None, masks: bool = False):
    rows = _split_rows(manifest, split)
    mc = cfg.model_config()
    return load_sequences(rows, Path(manifest).parent, (mc.input_h, mc.input_w), with_masks=masks, workers=cfg.workers)


def _print(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- commands ------------------------------------------------------------------------------


def cmd_synth(args) -> None:
    rows = synth_generate(
        args.out,
        num_classes=args.classes,
        seqs_per_class=args.seqs_per_class,
        len_range=(args.min_len, args.max_len),
        preset=args.preset,
        seed=args.seed,
        distractors=args.distractors,
        walking_fraction=args.walking_fraction,
        num_scenes=args.scenes,
    )
    _print({"sequences": len(rows), "frames": sum(r.num_frames for r in rows), "manifest": str(Path(args.out) / "manifest.csv")})


def cmd_prep_masks(args) -> None:
    rows = read_manifest(args.manifest)
    out_manifest = args.manifest_out or str(Path(args.out) / "manifest.csv")
    new = prep_masks(rows, Path(args.manifest).parent, args.out, args.near_mm, args.far_mm, args.min_area, args.workers, out_manifest)
    _print({"sequences": len(new), "manifest": out_manifest})


def cmd_split(args) -> None:
    rows = read_manifest(args.manifest)
    out = split_dataset(rows, args.ratios, args.seed, args.granularity)
    if args.granularity == "sequence":
        write_manifest(args.out, rebase_rows(out, Path(args.manifest).parent, Path(args.out).parent))
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sequence_id", "frame_index", "label", "split"])
            for r in out:
                w.writerow([r.sequence_id, r.frame_index, r.label, r.split])
    counts = {s: sum(r.split == s for r in out) for s in ("train", "val", "test")}
    _print({"granularity": args.granularity, **counts})


def _frame_records(path: str):
    from .data.splits import FrameRecord

    with open(path, newline="") as fh:
        return [FrameRecord(r["sequence_id"], int(r["frame_index"]), int(r["label"]), r["split"]) for r in csv.DictReader(fh)]


def cmd_train(args, parser) -> None:
    from .data.loading import frame_set
    from .training import FrameDataset, train_stage1, train_stage2, train_stage3

    stage = args.stage
    if stage == 2 and not args.embeddings:
        parser.error("train --stage 2 requires --embeddings")
    if stage in (1, 3) and not args.manifest:
        parser.error(f"train --stage {stage} requires --manifest")
    if stage == 3 and len(args.checkpoint_in) < 1:
        parser.error("train --stage 3 requires --checkpoint-in (stage-1 and stage-2 checkpoints)")
    extra = {}
    if args.lr is not None:
        extra[f"lr_stage{stage}"] = str(args.lr)
    if args.epochs is not None:
        extra[f"epochs_stage{stage}"] = str(args.epochs)
    if args.batch_size is not None:
        if stage == 3:
            parser.error("stage 3 always uses one sequence per batch")
        extra[f"batch_stage{stage}"] = str(args.batch_size)
    if args.max_steps is not None:
        extra["max_steps"] = str(args.max_steps)
    cfg = _run_config(args, extra)
    scfg = cfg.stage_config(stage)
    model = _model(cfg, args.checkpoint_in)
    if args.pretrained:
        log.info("imported %d pretrained tensors", len(import_pretrained(model, args.pretrained)))
    resume = load_checkpoint(args.resume, model.config) if args.resume else None
    if stage == 1:
        seqs = _samples(cfg, args.manifest, None, masks=True)
        if args.frame_split:
            recs = _frame_records(args.frame_split)
            train, val = FrameDataset(*frame_set(seqs, recs, "train")), FrameDataset(*frame_set(seqs, recs, "val"))
        else:
            train = FrameDataset(*frame_set([s for s, r in zip(seqs, read_manifest(args.manifest)) if r.split == "train"]))
            val_seqs = [s for s, r in zip(seqs, read_manifest(args.manifest)) if r.split == "val"]
            val = FrameDataset(*frame_set(val_seqs)) if val_seqs else None
        res = train_stage1(model, train, val, scfg, args.checkpoint_out, args.metrics, resume)
    elif stage == 2:
        dim = model.config.embedding_dim
        train = read_embeddings(args.embeddings, dim)
        val = read_embeddings(args.val_embeddings, dim) if args.val_embeddings else None
        res = train_stage2(model, train, val, scfg, args.checkpoint_out, args.metrics, resume)
    else:
        train = _samples(cfg, args.manifest, "train", masks=True)
        rows = read_manifest(args.manifest)
        val = _samples(cfg, args.manifest, "val", masks=True) if any(r.split == "val" for r in rows) else None
        res = train_stage3(model, train, val, scfg, args.checkpoint_out, args.metrics, resume)
    _print({"stage": stage, "best_val_accuracy": res.best_accuracy, "steps": res.steps, "epochs": res.epochs, "stopped_early": res.stopped_early, "interrupted": res.interrupted})


def cmd_embed_export(args) -> None:
    from .training import export_embeddings

    cfg = _run_config(args)
    model = _model(cfg, args.checkpoint_in)
    recs = export_embeddings(model, _samples(cfg, args.manifest, args.split), args.out)
    _print({"sequences": len(recs), "frames": int(sum(len(r.embeddings) for r in recs)), "out": args.out})


def cmd_eval(args) -> None:
    from .evaluation import evaluate, render_reports

    cfg = _run_config(args)
    model = _model(cfg, args.checkpoint_in)
    res = evaluate(model, _samples(cfg, args.manifest, args.split), scenario=args.scenario)
    if args.out:
        render_reports(res, args.out, title=f"Evaluation ({args.split})")
    _print({"accuracy": res.accuracy, "sequences": res.matrix.total, "scenario_accuracy": res.scenario_accuracy})


def cmd_gradcam(args) -> None:
    from .evaluation import png_bytes, cam_overlay, grad_cam

    cfg = _run_config(args)
    model = _model(cfg, args.checkpoint_in)
    rows = [r for r in read_manifest(args.manifest) if r.sequence_id == args.sequence_id]
    if not rows:
        raise ValueError(f"sequence {args.sequence_id!r} not in {args.manifest}")
    mc = model.config
    sample = load_sequences(rows, Path(args.manifest).parent, (mc.input_h, mc.input_w))[0]
    frames = range(len(sample)) if args.frame is None else [args.frame]
    cams = [grad_cam(model, sample.frames, i, args.target_class, args.level) for i in frames]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for cam in cams:
        stem = f"cam_{sample.sequence_id}_{cam.frame_index:04d}"
        np.save(out / f"{stem}.npy", cam.coarse)
        (out / f"{stem}.png").write_bytes(png_bytes(cam_overlay(sample.frames[cam.frame_index], cam.full)))
    _print({"sequence_id": sample.sequence_id, "frames": [c.frame_index for c in cams], "target_class": cams[0].target_class})


def cmd_infer(args) -> None:
    cfg = _run_config(args)
    model = _model(cfg, args.checkpoint_in)
    files = frame_files(Path(args.frames))
    if not files:
        raise ValueError(f"{args.frames}: no PNG frames")
    mc = model.config
    frames = np.stack([read_rgb(p, (mc.input_h, mc.input_w)) for p in files])
    label, probs = recognize(model, frames)
    _print({"label": label, "frames": len(files), "probabilities": [round(float(p), 6) for p in probs]})


def cmd_ablate(args) -> None:
    from .evaluation import ABLATION_MODES, ablation_run
    from .training import StageConfig

    cfg = _run_config(args)
    train = _samples(cfg, args.manifest, "train", masks=True)
    val = _samples(cfg, args.manifest, "val", masks=True)
    modes = args.modes.split(",") if args.modes else list(ABLATION_MODES)
    stage_cfgs = {s: cfg.stage_config(s) for s in (1, 2, 3)}
    label_only = StageConfig.for_stage(
        1, lr=args.label_only_lr, batch_size=args.label_only_batch, max_epochs=cfg.epochs_stage1, patience=cfg.patience, seed=cfg.seed
    )
    report = ablation_run({m: (train, val) for m in modes}, cfg.model_config(), stage_cfgs, label_only, cfg.seed, args.out)
    _print({"accuracies": report.accuracies})


# -- parser ------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssar", description="Simultaneous ego-hand segmentation and gesture recognition.", formatter_class=_fmt)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic gesture dataset", formatter_class=_fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=5, help="number of gesture classes")
    p.add_argument("--seqs-per-class", type=int, default=10, help="sequences per class")
    p.add_argument("--min-len", type=int, default=8, help="shortest sequence")
    p.add_argument("--max-len", type=int, default=20, help="longest sequence")
    p.add_argument("--preset", choices=("paper", "tiny"), default="tiny", help="frame size preset")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--distractors", action="store_true", help="add moving background objects")
    p.add_argument("--walking-fraction", type=float, default=0.5, help="share of sequences with background drift")
    p.add_argument("--scenes", type=int, default=6, help="number of shared background scenes")

    p = sub.add_parser("prep-masks", help="derive hand masks from depth maps", formatter_class=_fmt)
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--out", required=True, help="mask output directory")
    p.add_argument("--manifest-out", help="updated manifest (default: <out>/manifest.csv)")
    p.add_argument("--near-mm", type=float, default=100.0, help="nearest depth counted as hand")
    p.add_argument("--far-mm", type=float, default=700.0, help="farthest depth counted as hand")
    p.add_argument("--min-area", type=int, default=64, help="drop components smaller than this (pixels)")
    p.add_argument("--workers", type=int, default=1, help="decoding threads")

    p = sub.add_parser("split", help="assign train/val/test splits", formatter_class=_fmt)
    p.add_argument("--manifest", required=True, help="input manifest CSV")
    p.add_argument("--out", required=True, help="output CSV (manifest, or frame list for --granularity frame)")
    p.add_argument("--ratios", type=_ratios, default=(0.6, 0.2, 0.2), help="train,val,test fractions")
    p.add_argument("--granularity", choices=("sequence", "frame"), default="sequence", help="unit that is shuffled")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")

    p = sub.add_parser("train", help="run one training stage", formatter_class=_fmt)
    p.add_argument("--stage", type=int, choices=(1, 2, 3), required=True, help="training stage")
    _add_config_flags(p)
    p.add_argument("--manifest", help="manifest with split column (stages 1 and 3)")
    p.add_argument("--frame-split", help="frame-level split CSV from `split --granularity frame` (stage 1)")
    p.add_argument("--embeddings", help="training embedding archive (stage 2)")
    p.add_argument("--val-embeddings", help="validation embedding archive (stage 2)")
    p.add_argument("--checkpoint-in", action="append", default=[], help="checkpoint(s) to initialise from, applied in order")
    p.add_argument("--checkpoint-out", required=True, help="best checkpoint path; <path>.last holds resume state")
    p.add_argument("--resume", help="resume from a <checkpoint>.last file")
    p.add_argument("--pretrained", help="named-tensor file with encoder weights to import")
    p.add_argument("--metrics", help="JSONL metrics log")
    p.add_argument("--lr", type=float, help="learning rate for this stage")
    p.add_argument("--epochs", type=int, help="maximum epochs for this stage")
    p.add_argument("--batch-size", type=int, help="batch size for this stage")
    p.add_argument("--max-steps", type=int, help="stop after this many steps (resumable)")

    p = sub.add_parser("embed-export", help="store per-frame embeddings of a split", formatter_class=_fmt)
    _add_config_flags(p)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--split", choices=("train", "val", "test"), default="train", help="split to export")
    p.add_argument("--checkpoint-in", action="append", required=True, help="checkpoint(s) to load")
    p.add_argument("--out", required=True, help="embedding archive path")

    p = sub.add_parser("eval", help="accuracy, confusion matrix and scenario breakdown", formatter_class=_fmt)
    _add_config_flags(p)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="split to evaluate")
    p.add_argument("--scenario", choices=("stationary", "walking"), help="restrict to one scenario")
    p.add_argument("--checkpoint-in", action="append", required=True, help="checkpoint(s) to load")
    p.add_argument("--out", help="report directory")

    p = sub.add_parser("gradcam", help="class activation maps for a sequence", formatter_class=_fmt)
    _add_config_flags(p)
    p.add_argument("--manifest", required=True, help="manifest CSV")
    p.add_argument("--sequence-id", required=True, help="sequence to explain")
    p.add_argument("--frame", type=int, help="single frame index (default: all frames)")
    p.add_argument("--target-class", type=int, help="class to explain (default: predicted)")
    p.add_argument("--level", choices=("sequence", "frame"), default="sequence", help="logit to differentiate")
    p.add_argument("--checkpoint-in", action="append", required=True, help="checkpoint(s) to load")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("infer", help="classify a directory of frames", formatter_class=_fmt)
    _add_config_flags(p)
    p.add_argument("--frames", required=True, help="directory of PNG frames in order")
    p.add_argument("--checkpoint-in", action="append", required=True, help="checkpoint(s) to load")

    p = sub.add_parser("ablate", help="simple vs segmentation-based vs full fine-tune", formatter_class=_fmt)
    _add_config_flags(p)
    p.add_argument("--manifest", required=True, help="manifest CSV with train and val splits")
    p.add_argument("--modes", help="comma-separated subset of simple_embedding,segmentation_based,full_finetune")
    p.add_argument("--label-only-lr", type=float, default=1e-3, help="learning rate for the label-only baseline")
    p.add_argument("--label-only-batch", type=int, default=8, help="sequences per batch for the label-only baseline")
    p.add_argument("--out", required=True, help="output directory")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "prep-masks": cmd_prep_masks,
    "split": cmd_split,
    "embed-export": cmd_embed_export,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


def _setup_logging() -> None:
    level = os.environ.get("SSAR_LOG", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"SSAR_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.error("a command is required")
        if args.command == "train":
            cmd_train(args, parser)
        else:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: usage: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (ConfigError, CheckpointError, ShapeError, TrainingError, ValueError, IndexError, KeyError, OSError, FloatingPointError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
