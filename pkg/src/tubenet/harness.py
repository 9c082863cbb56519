"""End-to-end runs: configuration, training loops, inference, evaluation,
and benchmarking over the on-disk dataset layout.

Model checkpoints are a directory of ``.t4`` weight blobs plus a plain-text
``manifest.txt`` recording each parameter's name, true shape, and file.
"""

from __future__ import annotations

import dataclasses
import os
import time
from pathlib import Path

import numpy as np

from . import metrics as mx
from .linking import (LinkedSequence, TubeProposal, link_top_k,
                      nms_sequences, save_sequences)
from .models import STCNN, TCNN
from .proposals import decode_regression, kmeans_anchors
from .segmentation import mask_to_box
from .synth import (SyntheticSpec, gen_dataset, load_annotations,
                    load_video_frames, load_video_masks)
from .tensor import load_tensor, save_tensor, softmax
from .toi import Box, Tube

ENV_PREFIX = "TUBENET_"


@dataclasses.dataclass
class RunConfig:
    """Flat run configuration.

    Values resolve in increasing priority: defaults, config file
    (``key=value`` lines, ``#`` comments), environment variables prefixed
    ``TUBENET_`` (upper-cased key), then explicit CLI overrides.
    """

    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "out"
    num_videos: int = 80
    num_frames: int = 24
    height: int = 80
    width: int = 112
    epochs_tpn: int = 8
    epochs_rec: int = 2
    epochs_refine: int = 8
    avg_top_k: int = 8
    lr: float = 0.02
    lr_rec: float = 0.01
    epochs_seg: int = 10
    lr_seg: float = 0.1
    anchors_k: int = 12
    link_k: int = 10
    nms_iou: float = 0.3
    mask_threshold: float = 0.5
    upsampler: str = "subpixel"
    alpha: float = 0.5

    @classmethod
    def load(cls, path=None, overrides=None):
        values = {}
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        if path:
            for line in Path(path).read_text().splitlines():
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, val = line.partition("=")
                values[key.strip()] = val.strip()
        for name in fields:
            env = os.environ.get(ENV_PREFIX + name.upper())
            if env is not None:
                values[name] = env
        for key, val in (overrides or {}).items():
            values[key] = val
        cfg = cls()
        for key, val in values.items():
            if key not in fields:
                raise KeyError(f"unknown config key: {key}")
            cur = getattr(cfg, key)
            setattr(cfg, key, type(cur)(val) if not isinstance(val, type(cur))
                    else val)
        return cfg

    def save(self, path):
        lines = [f"{f.name}={getattr(self, f.name)}"
                 for f in dataclasses.fields(self)]
        Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------
# checkpoints

def save_model(model, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(sorted(model.flat_state().items())):
        arr = np.asarray(arr, dtype=np.float32)
        shape = arr.shape
        fname = f"param_{i:04d}.t4"
        save_tensor(out_dir / fname, arr.reshape(arr.size, 1, 1, 1))
        lines.append(f"{name} {','.join(map(str, shape))} {fname}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_model_state(out_dir):
    out_dir = Path(out_dir)
    flat = {}
    for line in (out_dir / "manifest.txt").read_text().splitlines():
        name, shape_s, fname = line.split()
        shape = tuple(int(s) for s in shape_s.split(","))
        flat[name] = load_tensor(out_dir / fname).reshape(shape)
    return flat


def _unflatten(flat):
    nested = {}
    for name, arr in flat.items():
        parts = name.split(".")
        node = nested
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = arr
    return nested


# ----------------------------------------------------------------------
# data access

def _clips_of(frames, stride=8):
    """Non-overlapping 8-frame clips; the tail is zero-padded."""
    _, F, H, W = frames.shape
    clips = []
    for start in range(0, F, stride):
        clip = frames[:, start:start + 8]
        if clip.shape[1] < 8:
            pad = np.zeros((3, 8 - clip.shape[1], H, W), dtype=frames.dtype)
            clip = np.concatenate([clip, pad], axis=1)
        clips.append(clip)
    return clips


def _split_videos(ann, split):
    return sorted(v for v, e in ann.items() if e["split"] == split)


# ----------------------------------------------------------------------
# training

def run_gen(cfg):
    spec = SyntheticSpec(num_videos=cfg.num_videos,
                         num_frames=cfg.num_frames,
                         height=cfg.height, width=cfg.width, seed=cfg.seed)
    gen_dataset(spec, cfg.data_dir)
    return spec


def _write_loss_csv(path, rows, header):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def train_tcnn(cfg, quiet=False):
    """Alternating four-phase training: proposal phases refresh the shared
    encoder for the recognition phases and vice versa."""
    ann = load_annotations(cfg.data_dir)
    train_vids = _split_videos(ann, "train")
    gt_sizes = [(b.width, b.height)
                for v in train_vids for b in ann[v]["boxes"]]
    k = min(cfg.anchors_k, len(set(gt_sizes)))
    anchors = kmeans_anchors(gt_sizes, k=k, seed=cfg.seed)
    num_classes = max(e["label"] for e in ann.values())
    model = TCNN(num_classes, anchors, (cfg.height, cfg.width), seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)
    losses = []
    step = 0
    phases = [("tpn", cfg.epochs_tpn), ("rec", cfg.epochs_rec),
              ("tpn", max(1, cfg.epochs_tpn // 2)),
              ("rec", max(1, cfg.epochs_rec // 2)),
              ("refine", cfg.epochs_refine),
              # refinement moves the shared encoder, so re-fit the
              # recognition head on the final features
              ("rec", max(1, cfg.epochs_rec // 2))]
    for phase, epochs in phases:
        for _ in range(epochs):
            order = rng.permutation(len(train_vids))
            for vi in order:
                vid = train_vids[vi]
                frames = load_video_frames(cfg.data_dir, vid)
                boxes = ann[vid]["boxes"]
                if phase in ("tpn", "refine"):
                    start = int(rng.integers(0, frames.shape[1] - 7))
                    clip = frames[:, start:start + 8]
                    gt = boxes[start:start + 8]
                    # the final phase regresses from more candidates per
                    # clip, matching the top-k averaging used at inference
                    nc = 8 if phase == "refine" else 4
                    bce, reg = model.tpn_step(clip, gt, rng, cfg.lr,
                                              reg_candidates=nc)
                    losses.append((step, phase, bce + reg))
                else:
                    clips = _clips_of(frames)
                    loss = model.recognition_step(
                        clips, boxes, ann[vid]["label"], rng, cfg.lr_rec)
                    losses.append((step, phase, loss))
                step += 1
        if not quiet:
            print(f"phase {phase} done, last loss {losses[-1][2]:.4f}")
    out = Path(cfg.out_dir)
    save_model(model, out / "tcnn_model")
    _write_loss_csv(out / "tcnn_loss.csv", losses,
                    ["step", "phase", "loss"])
    return model


def load_tcnn(cfg):
    ann = load_annotations(cfg.data_dir)
    train_vids = _split_videos(ann, "train")
    gt_sizes = [(b.width, b.height)
                for v in train_vids for b in ann[v]["boxes"]]
    k = min(cfg.anchors_k, len(set(gt_sizes)))
    anchors = kmeans_anchors(gt_sizes, k=k, seed=cfg.seed)
    num_classes = max(e["label"] for e in ann.values())
    model = TCNN(num_classes, anchors, (cfg.height, cfg.width), seed=cfg.seed)
    model.load_state(_unflatten(load_model_state(
        Path(cfg.out_dir) / "tcnn_model")))
    return model, ann


def train_stcnn(cfg, quiet=False):
    ann = load_annotations(cfg.data_dir)
    train_vids = _split_videos(ann, "train")
    num_classes = max(e["label"] for e in ann.values())
    model = STCNN(num_classes, (cfg.height, cfg.width), seed=cfg.seed,
                  upsampler=cfg.upsampler)
    rng = np.random.default_rng(cfg.seed + 2)
    losses = []
    step = 0
    for epoch in range(cfg.epochs_seg):
        order = rng.permutation(len(train_vids))
        for vi in order:
            vid = train_vids[vi]
            frames = load_video_frames(cfg.data_dir, vid)
            masks = load_video_masks(cfg.data_dir, vid)
            boxes = ann[vid]["boxes"]
            start = int(rng.integers(0, frames.shape[1] - 7))
            clip = frames[:, start:start + 8]
            seg, rec = model.train_step(
                clip, masks[start:start + 8], boxes[start:start + 8],
                ann[vid]["label"], cfg.lr_seg)
            losses.append((step, seg, rec))
            step += 1
        if not quiet:
            print(f"epoch {epoch} seg {losses[-1][1]:.4f} "
                  f"rec {losses[-1][2]:.4f}")
    out = Path(cfg.out_dir)
    save_model(model, out / "stcnn_model")
    _write_loss_csv(out / "stcnn_loss.csv", losses, ["step", "seg", "rec"])
    return model


def load_stcnn(cfg):
    ann = load_annotations(cfg.data_dir)
    num_classes = max(e["label"] for e in ann.values())
    model = STCNN(num_classes, (cfg.height, cfg.width), seed=cfg.seed,
                  upsampler=cfg.upsampler)
    model.load_state(_unflatten(load_model_state(
        Path(cfg.out_dir) / "stcnn_model")))
    return model, ann


# ----------------------------------------------------------------------
# inference

def detect_video(model, frames, cfg):
    """Proposals per clip, linked across clips, scored by the recognizer.

    Returns (sequences, per-sequence class labels, confidences, and the
    per-frame boxes of each kept sequence).
    """
    from .proposals import RegressionTarget

    clips = _clips_of(frames)
    per_clip = []
    conv2_cubes = []
    cands = None
    for ci, clip in enumerate(clips):
        acts, logits = model.encode_clip(clip)
        conv2_cubes.append(acts["conv2"])
        if cands is None:
            cands = model.clip_candidates()
        scores = 1.0 / (1.0 + np.exp(-logits.ravel()))
        order = np.argsort(-scores, kind="stable")
        # decode the strongest candidates independently, then blend their
        # per-frame boxes weighted by actionness: the average localizes
        # better than any single candidate
        top = order[:max(1, cfg.avg_top_k)]
        coords = np.zeros((8, 4))
        wsum = 0.0
        for i in top:
            vec, _ = model._tube_features(acts["conv2"], acts["conv5"],
                                          cands[i])
            deltas = model._regress(vec)
            for f in range(8):
                b = decode_regression(cands[i], RegressionTarget(*deltas[f]))
                b = _clip_box(b, cfg.height, cfg.width)
                coords[f] += scores[i] * np.array(b.astuple())
            wsum += scores[i]
        coords /= max(wsum, 1e-12)
        boxes = tuple(Box(*map(float, coords[f])) for f in range(8))
        per_clip.append([TubeProposal(ci, Tube(boxes),
                                      float(scores[top[0]]))])
    sequences = link_top_k(per_clip, cfg.link_k)
    sequences = nms_sequences(sequences, cfg.nms_iou)
    results = []
    for seq in sequences:
        boxes = [b for p in seq.proposals for b in p.tube.boxes]
        boxes = boxes[:frames.shape[1]]
        logits, _ = model.recognition_forward(conv2_cubes, boxes)
        probs = softmax(logits)
        label = int(np.argmax(probs[1:]) + 1)
        conf = float(probs[label])
        results.append((seq, label, conf, boxes))
    return results


def _clip_box(box, height, width):
    x1 = min(max(box.x1, 0.0), width - 1.0)
    y1 = min(max(box.y1, 0.0), height - 1.0)
    x2 = min(max(box.x2, x1), width - 1.0)
    y2 = min(max(box.y2, y1), height - 1.0)
    return Box(x1, y1, x2, y2)


def run_detect(cfg, split="test"):
    model, ann = load_tcnn(cfg)
    out = Path(cfg.out_dir) / "detections"
    out.mkdir(parents=True, exist_ok=True)
    all_rows = []
    for vid in _split_videos(ann, split):
        frames = load_video_frames(cfg.data_dir, vid)
        results = detect_video(model, frames, cfg)
        save_sequences(out / f"video_{vid:03d}.txt",
                       [r[0] for r in results])
        for rank, (seq, label, conf, boxes) in enumerate(results):
            for f, b in enumerate(boxes):
                all_rows.append((vid, rank, label, conf, f,
                                 b.x1, b.y1, b.x2, b.y2))
    with open(out / "detections.csv", "w") as fh:
        fh.write("video,rank,label,confidence,frame,x1,y1,x2,y2\n")
        for row in all_rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    return all_rows


def run_segment(cfg, split="test"):
    from .segmentation import save_mask

    model, ann = load_stcnn(cfg)
    out = Path(cfg.out_dir) / "segmentations"
    rows = []
    for vid in _split_videos(ann, split):
        frames = load_video_frames(cfg.data_dir, vid)
        num_frames = frames.shape[1]
        vdir = out / f"{vid:03d}"
        vdir.mkdir(parents=True, exist_ok=True)
        all_masks = []
        concat_boxes = []
        for clip in _clips_of(frames):
            masks, p_fg, concat1 = model.segment_clip(
                clip, cfg.mask_threshold)
            all_masks.extend(masks)
        all_masks = all_masks[:num_frames]
        for t, m in enumerate(all_masks):
            save_mask(vdir / f"frame_{t:04d}.sm", m.bits)
            b = mask_to_box(m)
            concat_boxes.append(b if b is not None
                                else Box(0, 0, cfg.width - 1, cfg.height - 1))
        # classify the full tube implied by the predicted masks
        logits_sum = None
        for ci, clip in enumerate(_clips_of(frames)):
            _, concat1, _ = model.forward(clip)
            boxes = concat_boxes[ci * 8:(ci + 1) * 8]
            boxes += [boxes[-1]] * (8 - len(boxes))
            logits, _ = model.recognition_forward(concat1, boxes)
            logits_sum = logits if logits_sum is None else logits_sum + logits
        probs = softmax(logits_sum / max(1, len(_clips_of(frames))))
        label = int(np.argmax(probs[1:]) + 1)
        rows.append((vid, label, float(probs[label])))
    with open(out / "labels.csv", "w") as fh:
        fh.write("video,label,confidence\n")
        for vid, label, conf in rows:
            fh.write(f"{vid},{label},{conf!r}\n")
    return rows


# ----------------------------------------------------------------------
# evaluation

def eval_detections(cfg, split="test"):
    """Frame-mAP / video-mAP of the written detections against the
    annotations."""
    ann = load_annotations(cfg.data_dir)
    vids = _split_videos(ann, split)
    det_rows = []
    path = Path(cfg.out_dir) / "detections" / "detections.csv"
    with open(path) as fh:
        next(fh)
        for line in fh:
            vid, rank, label, conf, f, x1, y1, x2, y2 = line.split(",")
            det_rows.append(mx.Detection(
                video=int(vid), cls=int(label), confidence=float(conf),
                frame=int(f), box=Box(float(x1), float(y1),
                                      float(x2), float(y2))))
    frame_gts = [{"video": vid, "frame": f, "cls": ann[vid]["label"],
                  "box": b}
                 for vid in vids
                 for f, b in enumerate(ann[vid]["boxes"])]
    fmap, per_class = mx.frame_map(det_rows, frame_gts, alpha=cfg.alpha)
    roc_points, auc = mx.roc_auc(det_rows, frame_gts, alpha=cfg.alpha)

    tube_dets = {}
    for d in det_rows:
        tube_dets.setdefault((d.video, d.cls, d.confidence), {})[d.frame] \
            = d.box
    video_dets = [mx.Detection(video=vid, cls=cls, confidence=conf,
                               tube=frames)
                  for (vid, cls, conf), frames in tube_dets.items()]
    video_gts = [{"video": vid, "cls": ann[vid]["label"],
                  "tube": dict(enumerate(ann[vid]["boxes"]))}
                 for vid in vids]
    vmap, vper = mx.video_map(video_dets, video_gts, alpha=cfg.alpha)
    return {"frame_map": fmap, "frame_ap": per_class,
            "video_map": vmap, "video_ap": vper,
            "roc_points": roc_points, "auc": auc}


def eval_segmentations(cfg, split="test"):
    """Region (J), contour (F), and stability (T) statistics of the
    written masks."""
    from .segmentation import SegMask, load_mask

    ann = load_annotations(cfg.data_dir)
    vids = _split_videos(ann, split)
    j_scores, f_scores, t_scores = {}, {}, []
    correct = 0
    label_rows = {}
    labels_path = Path(cfg.out_dir) / "segmentations" / "labels.csv"
    if labels_path.exists():
        with open(labels_path) as fh:
            next(fh)
            for line in fh:
                vid, label, conf = line.split(",")
                label_rows[int(vid)] = int(label)
    for vid in vids:
        gt = load_video_masks(cfg.data_dir, vid)
        vdir = Path(cfg.out_dir) / "segmentations" / f"{vid:03d}"
        pred = [SegMask(load_mask(p)) for p in sorted(vdir.glob("*.sm"))]
        j_scores[vid] = [mx.iou_mask(p, g) for p, g in zip(pred, gt)]
        f_scores[vid] = [mx.contour_f(p, g) for p, g in zip(pred, gt)]
        t_scores.append(mx.temporal_stability(pred))
        if label_rows.get(vid) == ann[vid]["label"]:
            correct += 1
    j_mean, j_recall, j_decay = mx.mean_recall_decay(j_scores)
    f_mean, f_recall, f_decay = mx.mean_recall_decay(f_scores)
    return {
        "J_mean": j_mean, "J_recall": j_recall, "J_decay": j_decay,
        "F_mean": f_mean, "F_recall": f_recall, "F_decay": f_decay,
        "T_mean": float(np.mean(t_scores)) if t_scores else 0.0,
        "label_accuracy": correct / max(1, len(vids)),
    }


def run_eval(cfg, split="test"):
    report = {}
    out = Path(cfg.out_dir)
    ev = mx.EvalReport()
    det_path = out / "detections" / "detections.csv"
    if det_path.exists():
        det = eval_detections(cfg, split)
        report.update(det)
        ev.per_class_ap = det["frame_ap"]
        ev.map = det["frame_map"]
        ev.roc_points = det["roc_points"]
        ev.auc = det["auc"]
        mx.write_curve_svg(out / "roc.svg", det["roc_points"],
                           "ROC", "FP per frame", "TPR")
    seg_dir = out / "segmentations"
    if seg_dir.exists():
        seg = eval_segmentations(cfg, split)
        report.update(seg)
        ev.j_stats = {"mean": seg["J_mean"], "recall": seg["J_recall"],
                      "decay": seg["J_decay"]}
        ev.f_stats = {"mean": seg["F_mean"], "recall": seg["F_recall"],
                      "decay": seg["F_decay"]}
        ev.t_mean = seg["T_mean"]
    mx.write_report_csv(out / "report.csv", ev)
    return report


# ----------------------------------------------------------------------
# benchmarking

def run_bench(cfg, repeats=3):
    """Median wall-clock seconds of each pipeline stage on one video."""
    ann = load_annotations(cfg.data_dir)
    vid = _split_videos(ann, "test")[0]
    frames = load_video_frames(cfg.data_dir, vid)
    timings = {}

    tcnn, _ = load_tcnn(cfg)

    def _detect():
        detect_video(tcnn, frames, cfg)

    stcnn, _ = load_stcnn(cfg)

    def _segment():
        for clip in _clips_of(frames):
            stcnn.segment_clip(clip, cfg.mask_threshold)

    def _encode():
        tcnn.encoder.forward(_clips_of(frames)[0])

    for name, fn in (("encode_clip", _encode), ("detect_video", _detect),
                     ("segment_video", _segment)):
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        timings[name] = float(np.median(samples))
    return timings
