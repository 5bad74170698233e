"""Walk through the whole workflow on synthetic data, one CLI call per step.

    python notebooks/tiny_pipeline.py --workdir /tmp/ssar-demo

Takes roughly five minutes on one core. Each step prints the command it runs
and the JSON summary it gets back, so the script doubles as a worked example
of the command line. Settings come from configs/tiny.cfg.
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "tiny.cfg"


def ssar(*args) -> dict:
    argv = [sys.executable, "-m", "ssar", *map(str, args)]
    print("$ ssar", " ".join(map(str, args)))
    out = subprocess.run(argv, check=True, capture_output=True, text=True).stdout
    result = json.loads(out) if out.strip() else {}
    print(json.dumps(result, indent=2, sort_keys=True)[:600], "\n")
    return result


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", type=Path, default=Path("ssar-demo"))
    ap.add_argument("--per-class", type=int, default=26)
    args = ap.parse_args()
    w = args.workdir
    cfg = ["--config", CONFIG]

    # 1. Synthetic gesture videos with RGB, depth and ground-truth masks.
    ssar("synth", "--out", w / "data", "--classes", 5, "--seqs-per-class", args.per_class, "--seed", 11)

    # 2. Masks are re-derived from depth the way real recordings would be.
    ssar("prep-masks", "--manifest", w / "data/manifest.csv", "--out", w / "masks")

    # 3. Random sequence-level split.
    ssar("split", "--manifest", w / "masks/manifest.csv", "--out", w / "split.csv", "--ratios", "0.7,0.3,0.0")
    man = w / "split.csv"

    # 4. Stage 1: encoder, decoder and embedding on single frames.
    ssar("train", "--stage", 1, *cfg, "--manifest", man, "--checkpoint-out", w / "s1.ckpt", "--metrics", w / "s1.jsonl")

    # 5. Freeze per-frame embeddings so the LSTM trains without touching images.
    for split in ("train", "val"):
        ssar("embed-export", *cfg, "--manifest", man, "--split", split, "--checkpoint-in", w / "s1.ckpt", "--out", w / f"{split}.emb")

    # 6. Stage 2: the LSTM on stored embeddings.
    ssar("train", "--stage", 2, *cfg, "--embeddings", w / "train.emb", "--val-embeddings", w / "val.emb", "--checkpoint-in", w / "s1.ckpt", "--checkpoint-out", w / "s2.ckpt")

    # 7. Stage 3: everything end to end, one sequence per step.
    ssar("train", "--stage", 3, *cfg, "--manifest", man, "--checkpoint-in", w / "s2.ckpt", "--checkpoint-out", w / "s3.ckpt")

    # 8. Reports: accuracy, confusion matrix, walking/stationary breakdown.
    ssar("eval", *cfg, "--manifest", man, "--split", "val", "--checkpoint-in", w / "s3.ckpt", "--out", w / "report")

    # 9. Where does the classifier look? Grad-CAM for the first validation sequence.
    first_val = next(line.split(",")[0] for line in man.read_text().splitlines()[1:] if ",val," in line)
    ssar("gradcam", *cfg, "--manifest", man, "--checkpoint-in", w / "s3.ckpt", "--sequence-id", first_val, "--out", w / "cam")

    # 10. Inference needs only frames; the decoder is never run.
    ssar("infer", *cfg, "--checkpoint-in", w / "s3.ckpt", "--frames", w / "data/frames" / first_val)
    print(f"reports in {w / 'report'}, CAM overlays in {w / 'cam'}")


if __name__ == "__main__":
    main()
