"""Evaluation suite: box/mask IoU, average precision (frame and video level),
ROC/AUC, and the segmentation measures J (region similarity), F (contour
accuracy) and T (temporal stability).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .proposals import iou as iou_box_raw
from .segmentation import SegMask
from .tensor import ShapeError
from .toi import Box


@dataclass(frozen=True)
class Detection:
    """One frame-level or tube-level detection."""

    video: str
    cls: int
    confidence: float
    frame: int | None = None
    box: Box | None = None
    tube: dict | None = None  # frame index -> Box

    def __post_init__(self):
        if not math.isfinite(self.confidence):
            raise ValueError("non-finite confidence")


@dataclass
class EvalReport:
    per_class_ap: dict = field(default_factory=dict)
    map: float = 0.0
    roc_points: list = field(default_factory=list)
    auc: float = 0.0
    j_stats: dict = field(default_factory=dict)
    f_stats: dict = field(default_factory=dict)
    t_mean: float | None = None


def iou_box(a: Box, b: Box) -> float:
    return iou_box_raw(a, b)


def iou_mask(a: SegMask, b: SegMask) -> float:
    """Mask IoU; two empty masks agree perfectly (J = 1)."""
    if a.bits.shape != b.bits.shape:
        raise ShapeError(f"mask dims differ: {a.bits.shape} vs {b.bits.shape}")
    union = (a.bits | b.bits).sum()
    if union == 0:
        return 1.0
    return float((a.bits & b.bits).sum() / union)


def tube_iou(a: dict, b: dict) -> float:
    """Spatio-temporal IoU: mean per-frame box IoU over the union of the two
    temporal extents; frames present in only one tube contribute 0."""
    frames = sorted(set(a) | set(b))
    if not frames:
        return 0.0
    vals = [iou_box_raw(a[f], b[f]) if f in a and f in b else 0.0
            for f in frames]
    return float(np.mean(vals))


def _match_detections(detections, gts, match_fn, alpha):
    """Greedy confidence-order matching; each gt is consumed at most once.
    Returns (tp flags, fp flags) aligned with the sorted detection order."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].confidence, i))
    used = set()
    tp = np.zeros(len(order), bool)
    for rank, i in enumerate(order):
        det = detections[i]
        best, best_j = alpha, None
        for j, gt in enumerate(gts):
            if j in used or gt["video"] != det.video or gt["cls"] != det.cls:
                continue
            ov = match_fn(det, gt)
            if ov >= best and (best_j is None or ov > best):
                best, best_j = ov, j
        if best_j is not None:
            used.add(best_j)
            tp[rank] = True
    return tp, ~tp, order


def average_precision(detections, gts, match_fn, alpha: float) -> float:
    """Area under the exact precision-recall staircase (all points)."""
    npos = len(gts)
    if npos == 0:
        return 0.0
    if not detections:
        return 0.0
    tp, fp, _ = _match_detections(detections, gts, match_fn, alpha)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / npos
    precision = ctp / np.maximum(ctp + cfp, 1)
    ap = 0.0
    prev_r = 0.0
    for r, p in zip(recall, precision):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def _frame_match(det, gt):
    if det.frame != gt["frame"]:
        return 0.0
    return iou_box_raw(det.box, gt["box"])


def _video_match(det, gt):
    return tube_iou(det.tube, gt["tube"])


def frame_map(dets, gts, alpha: float):
    """Mean over classes of frame-level AP. gts: dicts with video, frame,
    cls, box."""
    return _mean_ap(dets, gts, _frame_match, alpha)


def video_map(seq_dets, gt_tubes, alpha: float):
    """Mean over classes of tube-level AP. gts: dicts with video, cls, tube."""
    return _mean_ap(seq_dets, gt_tubes, _video_match, alpha)


def _mean_ap(dets, gts, match_fn, alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha {alpha} outside (0,1)")
    classes = sorted({g["cls"] for g in gts})
    per_class = {}
    for cls in classes:
        d = [x for x in dets if x.cls == cls]
        g = [x for x in gts if x["cls"] == cls]
        per_class[cls] = average_precision(d, g, match_fn, alpha)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class


def roc_auc(dets, gts, alpha: float, num_frames: int | None = None):
    """ROC of true-positive rate against false positives per frame.

    A detection is correct when its class matches and IoU >= alpha. The
    curve sweeps the confidence thresholds; AUC is the trapezoidal area with
    the FP axis normalized to [0, 1] by its maximum (a flat zero-FP curve
    integrates to its final TPR).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha {alpha} outside (0,1)")
    npos = len(gts)
    if num_frames is None:
        num_frames = max(len({(g["video"], g.get("frame")) for g in gts}), 1)
    if not dets or npos == 0:
        return [(0.0, 0.0)], 0.0
    tp, fp, order = _match_detections(dets, gts, _frame_match, alpha)
    confs = [dets[i].confidence for i in order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    points = [(0.0, 0.0)]
    for i in range(len(order)):
        if i + 1 < len(order) and confs[i + 1] == confs[i]:
            continue  # same threshold: only the complete prefix is a point
        points.append((cfp[i] / num_frames, ctp[i] / npos))
    xmax = points[-1][0]
    if xmax == 0.0:
        return points, points[-1][1]
    auc = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) / xmax * (y0 + y1) / 2.0
    return points, float(auc)


def _boundary(bits: np.ndarray) -> np.ndarray:
    if not bits.any():
        return np.zeros_like(bits)
    eroded = ndimage.binary_erosion(bits, border_value=0)
    return bits & ~eroded


def default_contour_tolerance(shape) -> int:
    """0.8% of the image diagonal, rounded up."""
    h, w = shape
    return math.ceil(0.008 * math.hypot(h, w))


def contour_f(pred: SegMask, gt: SegMask, tolerance: float | None = None) -> float:
    """Boundary F-measure: precision/recall of contour pixels within
    `tolerance` (Euclidean pixels) of the other contour."""
    if pred.bits.shape != gt.bits.shape:
        raise ShapeError(f"mask dims differ: {pred.bits.shape} vs {gt.bits.shape}")
    if tolerance is None:
        tolerance = default_contour_tolerance(pred.bits.shape)
    pb = _boundary(pred.bits)
    gb = _boundary(gt.bits)
    if not pb.any() and not gb.any():
        return 1.0
    if not pb.any() or not gb.any():
        return 0.0
    dist_to_g = ndimage.distance_transform_edt(~gb)
    dist_to_p = ndimage.distance_transform_edt(~pb)
    precision = float((dist_to_g[pb] <= tolerance).mean())
    recall = float((dist_to_p[gb] <= tolerance).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def _symmetric_contour_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean distance from each boundary pixel to the other boundary,
    averaged over both directions, normalized by the image diagonal."""
    diag = math.hypot(*a.shape)
    ab = _boundary(a)
    bb = _boundary(b)
    if not ab.any() and not bb.any():
        return 0.0
    if not ab.any() or not bb.any():
        return 1.0
    da = ndimage.distance_transform_edt(~ab)
    db = ndimage.distance_transform_edt(~bb)
    return float((db[ab].mean() + da[bb].mean()) / 2.0 / diag)


def temporal_stability(masks) -> float:
    """Mean symmetric contour distance between consecutive masks (lower is
    more stable; a static sequence scores 0)."""
    masks = list(masks)
    if len(masks) < 2:
        raise ValueError("temporal stability needs at least 2 frames")
    vals = [_symmetric_contour_distance(a.bits, b.bits)
            for a, b in zip(masks, masks[1:])]
    return float(np.mean(vals))


def mean_recall_decay(per_item_scores):
    """Summary statistics over per-item score lists.

    mean: average of all scores; recall: fraction above 0.5; decay: average
    over items of (first temporal quartile mean - last quartile mean).
    """
    if isinstance(per_item_scores, dict):
        items = list(per_item_scores.values())
    else:
        items = [list(per_item_scores)]
    allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in items])
    if allv.size == 0:
        raise ValueError("no scores")
    mean = float(allv.mean())
    recall = float((allv > 0.5).mean())
    decays = []
    for v in items:
        quarts = np.array_split(np.asarray(v, dtype=np.float64), 4)
        first = quarts[0].mean() if quarts[0].size else 0.0
        last = quarts[-1].mean() if quarts[-1].size else 0.0
        decays.append(first - last)
    return mean, recall, float(np.mean(decays))


def write_report_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "ap"])
        for cls in sorted(report.per_class_ap):
            w.writerow([cls, f"{report.per_class_ap[cls]:.6f}"])
        w.writerow(["mAP", f"{report.map:.6f}"])
        w.writerow(["AUC", f"{report.auc:.6f}"])
        for name, stats in (("J", report.j_stats), ("F", report.f_stats)):
            for key, val in stats.items():
                w.writerow([f"{name}_{key}", f"{val:.6f}"])
        if report.t_mean is not None:
            w.writerow(["T_mean", f"{report.t_mean:.6f}"])


def write_curve_svg(path, points, title: str, xlabel: str, ylabel: str) -> None:
    """Minimal standalone SVG line plot for ROC/PR curves."""
    width, height, margin = 480, 360, 48
    xs = [p[0] for p in points] or [0.0]
    ys = [p[1] for p in points] or [0.0]
    xmax = max(max(xs), 1e-9)
    ymax = max(max(ys), 1e-9)

    def sx(x):
        return margin + (width - 2 * margin) * x / xmax

    def sy(y):
        return height - margin - (height - 2 * margin) * y / ymax

    path_d = " ".join(
        f"{'M' if i == 0 else 'L'}{sx(x):.1f},{sy(y):.1f}"
        for i, (x, y) in enumerate(points)
    )
    with open(path, "w") as fh:
        fh.write(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n'
            f'<text x="{width / 2}" y="20" text-anchor="middle">{title}</text>\n'
            f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
            f'y2="{height - margin}" stroke="black"/>\n'
            f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
            f'y2="{height - margin}" stroke="black"/>\n'
            f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" '
            f'font-size="12">{xlabel}</text>\n'
            f'<text x="14" y="{height / 2}" font-size="12" '
            f'transform="rotate(-90 14 {height / 2})">{ylabel}</text>\n'
            f'<path d="{path_d}" fill="none" stroke="crimson" '
            f'stroke-width="1.5"/>\n</svg>\n'
        )
