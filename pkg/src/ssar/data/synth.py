"""Synthetic ego-gesture videos for desk-scale experiments.

Each class is a fixed trajectory of a bright elliptical "hand" blob over a
random smooth background. The ground-truth mask is the blob support and a
depth map places the hand near the camera, so masks can also be recovered by
depth thresholding. ``walking`` sequences drift the background to imitate
head motion; the distractor variant adds moving background objects that are
uncorrelated with the class.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .images import write_depth, write_mask, write_rgb
from .manifest import ManifestRow, write_manifest

TRAJECTORIES = (
    "sweep_right",
    "sweep_down",
    "circle",
    "diagonal",
    "zigzag",
    "sweep_left",
    "sweep_up",
    "circle_ccw",
)

PRESET_SIZES = {"tiny": (64, 112), "paper": (126, 224)}

HAND_DEPTH_MM = (300, 450)
BACKGROUND_DEPTH_MM = 1500
DISTRACTOR_DEPTH_MM = 1000
BLOB_AXES = (0.2, 0.11)  # hand semi-axes as fractions of frame height and width
SCALE_JITTER = 0.1  # per-sequence relative blob size variation
SKIN_JITTER = 20.0  # per-sequence, per-channel skin colour variation
MOTION_STRETCH = 1.35  # moving hands smear along their direction of motion


def trajectory(cls: int, t: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Blob centre (u, v) in [0, 1]^2 at normalized times ``t`` for class ``cls``."""
    name = TRAJECTORIES[cls]
    lo, hi = rng.uniform(0.0, 0.15), rng.uniform(0.85, 1.0)
    ramp = lo + (hi - lo) * t
    level = rng.uniform(0.3, 0.7)
    jitter = rng.normal(0, 0.01, t.shape)
    if name == "sweep_right":
        return ramp, level + jitter
    if name == "sweep_left":
        return 1 - ramp, level + jitter
    if name == "sweep_down":
        return level + jitter, ramp
    if name == "sweep_up":
        return level + jitter, 1 - ramp
    if name in ("circle", "circle_ccw"):
        cu, cv = rng.uniform(0.4, 0.6, 2)
        r = rng.uniform(0.3, 0.4)
        phase = rng.uniform(0, 2 * np.pi)
        sign = 1 if name == "circle" else -1
        ang = phase + sign * 2 * np.pi * t
        return cu + r * np.cos(ang), cv + r * np.sin(ang)
    if name == "diagonal":
        lo2, hi2 = rng.uniform(0.0, 0.15), rng.uniform(0.85, 1.0)
        return ramp, lo2 + (hi2 - lo2) * t
    if name == "zigzag":
        amp = rng.uniform(0.3, 0.45)
        tri = 2 * np.abs(((2 * t) % 1.0) - 0.5)  # two up-down periods, in [0, 1]
        return ramp, 0.5 + amp * (tri - 0.5) * 2
    raise ValueError(name)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int, lo: float, hi: float) -> np.ndarray:
    coarse = rng.uniform(0, 1, (max(2, h // cells), max(2, w // cells), 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((w, h), Image.BICUBIC)
    return lo + (hi - lo) * np.asarray(img, dtype=np.float64) / 255.0


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float, theta: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Support and normalized squared radius of an ellipse whose ``rx`` axis points along angle ``theta``."""
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    along = dx * np.cos(theta) + dy * np.sin(theta)
    across = -dx * np.sin(theta) + dy * np.cos(theta)
    d2 = (along / rx) ** 2 + (across / ry) ** 2
    return d2 <= 1.0, d2


def make_scene(size: tuple[int, int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Background colour and depth canvases, a margin larger than the frame for drift."""
    h, w = size
    margin = w // 4
    canvas = _smooth_noise(rng, h + 2 * margin, w + 2 * margin, 8, 20, 150)
    depth_canvas = BACKGROUND_DEPTH_MM + 300 * (_smooth_noise(rng, h + 2 * margin, w + 2 * margin, 16, -1, 1)[..., 0])
    return canvas, depth_canvas


def render_sequence(
    cls: int,
    length: int,
    size: tuple[int, int],
    rng: np.random.Generator,
    walking: bool = False,
    distractors: bool = False,
    scene: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Render one video: returns rgb (T,H,W,3) uint8, masks (T,H,W) uint8, depth (T,H,W) uint16.

    ``scene`` comes from :func:`make_scene`; by default a fresh one is drawn from ``rng``.
    """
    h, w = size
    margin = w // 4
    canvas, depth_canvas = make_scene(size, rng) if scene is None else scene

    scale = rng.uniform(1 - SCALE_JITTER, 1 + SCALE_JITTER)
    ry, rx = BLOB_AXES[0] * h * scale, BLOB_AXES[1] * w * scale
    skin = np.array([225, 180, 150]) + rng.uniform(-SKIN_JITTER, SKIN_JITTER, 3)
    t = np.linspace(0.0, 1.0, length)
    u, v = trajectory(cls, t, rng)
    cx = (rx + 1) + np.clip(u, 0, 1) * (w - 2 * rx - 3)
    cy = (ry + 1) + np.clip(v, 0, 1) * (h - 2 * ry - 3)
    # the blob stretches along its velocity, shrinking across it (area preserved)
    if length > 1:
        vy, vx = np.gradient(cy), np.gradient(cx)
    else:
        vy = vx = np.zeros(1)
    heading = np.arctan2(vy, vx)
    stretch = np.where(np.hypot(vx, vy) > 0.5, MOTION_STRETCH, 1.0)
    radius = 0.5 * (rx + ry)

    if walking:
        start = rng.uniform(0, 2 * margin, 2)
        drift = rng.uniform(-margin, margin, 2)
        offsets = start[None, :] + drift[None, :] * t[:, None] + rng.normal(0, 1.5, (length, 2))
        offsets = np.clip(offsets, 0, 2 * margin)
    else:
        offsets = np.full((length, 2), margin, dtype=np.float64)
    offsets = np.round(offsets).astype(int)

    n_distract = 2 if distractors else 0
    d_pos = rng.uniform([0, 0], [h, w], (n_distract, 2))
    d_vel = rng.uniform(-0.08, 0.08, (n_distract, 2)) * np.array([h, w])
    d_col = rng.uniform(120, 255, (n_distract, 3))
    d_rad = rng.uniform(0.6, 0.9, n_distract) * ry

    rgb = np.zeros((length, h, w, 3), np.uint8)
    masks = np.zeros((length, h, w), np.uint8)
    depth = np.zeros((length, h, w), np.uint16)
    for f in range(length):
        oy, ox = offsets[f]
        frame = canvas[oy : oy + h, ox : ox + w].copy()
        dmap = depth_canvas[oy : oy + h, ox : ox + w].copy()
        for k in range(n_distract):
            pos = d_pos[k] + d_vel[k] * f
            # reflect off the borders
            pos = np.abs(((pos + np.array([h, w])) % (2 * np.array([h, w]))) - np.array([h, w]))
            inside, _ = _ellipse(h, w, pos[0], pos[1], d_rad[k], d_rad[k] * w / h * 0.6)
            frame[inside] = d_col[k]
            dmap[inside] = DISTRACTOR_DEPTH_MM
        inside, d2 = _ellipse(h, w, cy[f], cx[f], radius / stretch[f], radius * stretch[f], heading[f])
        shade = (1.0 - 0.25 * d2[inside])[:, None]
        frame[inside] = skin * shade + rng.normal(0, 4, (int(inside.sum()), 3))
        hand_depth = rng.uniform(*HAND_DEPTH_MM)
        dmap[inside] = hand_depth + 30 * d2[inside]
        # invalid readings and small near-range specks in the background only
        bg = ~inside
        dmap[bg & (rng.random((h, w)) < 0.005)] = 0
        for _ in range(2):
            sy, sx = rng.integers(0, h - 2), rng.integers(0, w - 2)
            if bg[max(sy - 1, 0) : sy + 3, max(sx - 1, 0) : sx + 3].all():  # never touching the hand
                dmap[sy : sy + 2, sx : sx + 2] = 400
        rgb[f] = np.clip(np.round(frame + rng.normal(0, 3, frame.shape)), 0, 255).astype(np.uint8)
        masks[f] = inside
        depth[f] = np.clip(np.round(dmap), 0, 65535).astype(np.uint16)
    return rgb, masks, depth


def synth_generate(
    out_dir: str | Path,
    num_classes: int = 5,
    seqs_per_class: int = 10,
    len_range: tuple[int, int] = (8, 20),
    preset: str = "tiny",
    seed: int = 0,
    distractors: bool = False,
    walking_fraction: float = 0.5,
    num_scenes: int = 6,
) -> list[ManifestRow]:
    """Write frames, depth maps, masks and ``manifest.csv`` under ``out_dir``.

    Backgrounds come from a pool of ``num_scenes`` scenes shared by all
    classes (recorded in the ``subject`` column), so the background says
    nothing about the gesture. Every sequence is rendered from its own RNG
    stream keyed by ``(seed, class, index)``, so regeneration is
    bit-identical.
    """
    if not 1 <= num_classes <= len(TRAJECTORIES):
        raise ValueError(f"num_classes must be in [1, {len(TRAJECTORIES)}]")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise ValueError(f"invalid length range {len_range}")
    if seqs_per_class < 1:
        raise ValueError("seqs_per_class must be >= 1")
    if num_scenes < 1:
        raise ValueError("num_scenes must be >= 1")
    try:
        size = PRESET_SIZES[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}") from None
    out = Path(out_dir)
    scenes = [make_scene(size, np.random.default_rng([seed, 1_000_003, k])) for k in range(num_scenes)]
    rows = []
    for cls in range(num_classes):
        for j in range(seqs_per_class):
            rng = np.random.default_rng([seed, cls, j])
            sid = f"c{cls:02d}_s{j:03d}"
            length = int(rng.integers(lo, hi + 1))
            walking = bool(rng.random() < walking_fraction)
            scene = int(rng.integers(num_scenes))
            rgb, masks, depth = render_sequence(cls, length, size, rng, walking, distractors, scenes[scene])
            dirs = {kind: out / kind / sid for kind in ("frames", "depth", "masks")}
            for d in dirs.values():
                d.mkdir(parents=True, exist_ok=True)
            for f in range(length):
                name = f"frame_{f:04d}.png"
                write_rgb(dirs["frames"] / name, rgb[f])
                write_depth(dirs["depth"] / name, depth[f])
                write_mask(dirs["masks"] / name, masks[f])
            rows.append(
                ManifestRow(
                    sequence_id=sid,
                    subject=f"scene{scene}",
                    scenario="walking" if walking else "stationary",
                    label=cls,
                    split="",
                    frames_dir=f"frames/{sid}",
                    depth_dir=f"depth/{sid}",
                    mask_dir=f"masks/{sid}",
                    num_frames=length,
                )
            )
    write_manifest(out / "manifest.csv", rows)
    return rows
