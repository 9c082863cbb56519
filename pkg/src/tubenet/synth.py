"""Synthetic moving-actor video generation.

Each video shows a single bright, textured rectangle (the actor) moving
over a dim noisy background. The motion pattern determines the class:

    1. horizontal sweep       2. vertical sweep
    3. diagonal sweep         4. horizontal oscillation

Frames are written as single-tensor ``.t4`` files, per-frame ground-truth
masks as ``.sm`` files, and per-frame boxes plus class labels in
``annotations.csv``. Generation is fully deterministic per seed: each
video derives its RNG from (seed, index), so regeneration is
byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np

from .segmentation import SegMask, save_mask
from .tensor import save_tensor
from .toi import Box

NUM_CLASSES = 4


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a generated dataset."""

    num_videos: int = 80
    num_frames: int = 24
    height: int = 80
    width: int = 112
    min_actor: int = 18
    max_actor: int = 30
    train_fraction: float = 0.8
    seed: int = 0


def _actor_texture(rng, h, w):
    base = 0.75 + 0.2 * rng.random((3, 1, 1))
    stripes = 0.15 * np.sin(
        np.arange(w)[None, None, :] * (2 * np.pi / max(4, w // 3))
        + rng.random() * np.pi)
    tex = np.clip(base + stripes + 0.05 * rng.standard_normal((3, h, w)),
                  0.35, 1.0)
    return tex.astype(np.float32)


def _trajectory(cls, num_frames, height, width, ah, aw, rng):
    """Top-left corner of the actor at each frame."""
    max_y, max_x = height - ah, width - aw
    y0 = rng.integers(0, max_y + 1)
    x0 = rng.integers(0, max_x + 1)
    xs, ys = [], []
    if cls == 1:       # horizontal sweep
        step = max_x / (num_frames - 1)
        for t in range(num_frames):
            xs.append(round(t * step))
            ys.append(y0)
    elif cls == 2:     # vertical sweep
        step = max_y / (num_frames - 1)
        for t in range(num_frames):
            xs.append(x0)
            ys.append(round(t * step))
    elif cls == 3:     # diagonal sweep
        for t in range(num_frames):
            xs.append(round(t * max_x / (num_frames - 1)))
            ys.append(round(t * max_y / (num_frames - 1)))
    else:              # horizontal oscillation, period <= 8 frames
        amp = min(max_x // 2, 14)
        cx = max_x // 2
        for t in range(num_frames):
            xs.append(round(cx + amp * np.sin(2 * np.pi * t / 8.0)))
            ys.append(y0)
    xs = [int(np.clip(x, 0, max_x)) for x in xs]
    ys = [int(np.clip(y, 0, max_y)) for y in ys]
    return xs, ys


def render_video(spec, index):
    """Frames (F,3,H,W) float32, masks, boxes, and the class label."""
    rng = np.random.default_rng((spec.seed, index))
    cls = 1 + index % NUM_CLASSES
    ah = int(rng.integers(spec.min_actor, spec.max_actor + 1))
    aw = int(rng.integers(spec.min_actor, spec.max_actor + 1))
    tex = _actor_texture(rng, ah, aw)
    xs, ys = _trajectory(cls, spec.num_frames, spec.height, spec.width,
                         ah, aw, rng)
    bg = (0.1 + 0.08 * rng.random(
        (spec.num_frames, 3, spec.height, spec.width))).astype(np.float32)
    frames, masks, boxes = [], [], []
    for t in range(spec.num_frames):
        frame = bg[t].copy()
        x, y = xs[t], ys[t]
        frame[:, y:y + ah, x:x + aw] = tex
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        mask[y:y + ah, x:x + aw] = True
        frames.append(frame)
        masks.append(SegMask(mask))
        boxes.append(Box(x, y, x + aw - 1, y + ah - 1))
    return np.stack(frames), masks, boxes, cls


def gen_dataset(spec, root):
    """Write the dataset layout under ``root`` and return the manifest rows.

    Layout: videos/NNN/frame_KKKK.t4, masks/NNN/frame_KKKK.sm, and
    annotations.csv with one row per frame.
    """
    root = Path(root)
    rows = []
    n_train = int(round(spec.num_videos * spec.train_fraction))
    for idx in range(spec.num_videos):
        frames, masks, boxes, cls = render_video(spec, idx)
        vdir = root / "videos" / f"{idx:03d}"
        mdir = root / "masks" / f"{idx:03d}"
        vdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        split = "train" if idx < n_train else "test"
        for t in range(spec.num_frames):
            save_tensor(vdir / f"frame_{t:04d}.t4",
                        frames[t][:, None, :, :])
            save_mask(mdir / f"frame_{t:04d}.sm", masks[t].bits)
            b = boxes[t]
            rows.append({
                "video": idx, "frame": t, "split": split, "label": cls,
                "x1": int(b.x1), "y1": int(b.y1),
                "x2": int(b.x2), "y2": int(b.y2),
            })
    fields = ["video", "frame", "split", "label", "x1", "y1", "x2", "y2"]
    with open(root / "annotations.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def load_annotations(root):
    """Parse annotations.csv back into {video: (split, label, boxes)}."""
    root = Path(root)
    videos = {}
    with open(root / "annotations.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            vid = int(row["video"])
            entry = videos.setdefault(
                vid, {"split": row["split"], "label": int(row["label"]),
                      "boxes": {}})
            entry["boxes"][int(row["frame"])] = Box(
                float(row["x1"]), float(row["y1"]),
                float(row["x2"]), float(row["y2"]))
    for entry in videos.values():
        frames = sorted(entry["boxes"])
        entry["boxes"] = [entry["boxes"][f] for f in frames]
    return videos


def load_video_frames(root, video, num_frames=None):
    """Stack frame tensors into (3, F, H, W)."""
    from .tensor import load_tensor

    vdir = Path(root) / "videos" / f"{video:03d}"
    paths = sorted(vdir.glob("frame_*.t4"))
    if num_frames is not None:
        paths = paths[:num_frames]
    frames = [load_tensor(p)[:, 0] for p in paths]
    return np.stack(frames, axis=1)


def load_video_masks(root, video, num_frames=None):
    from .segmentation import SegMask, load_mask

    mdir = Path(root) / "masks" / f"{video:03d}"
    paths = sorted(mdir.glob("frame_*.sm"))
    if num_frames is not None:
        paths = paths[:num_frames]
    return [SegMask(load_mask(p)) for p in paths]
