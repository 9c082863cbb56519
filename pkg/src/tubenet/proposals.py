"""Tube Proposal Network machinery: data-driven anchors, actionness labels,
box regression encoding, temporal skip pooling and paired tube features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import toi
from .tensor import ShapeError
from .toi import Box, Tube


@dataclass(frozen=True)
class Anchor:
    """Center-free box template (width, height) in pixels."""

    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"anchor dims must be positive: {self}")


POSITIVE, NEGATIVE, IGNORE = "positive", "negative", "ignore"


@dataclass(frozen=True)
class LabeledBox:
    box: Box
    actionness: float
    label: str

    def __post_init__(self):
        if not 0.0 <= self.actionness <= 1.0:
            raise ValueError(f"actionness {self.actionness} outside [0,1]")


@dataclass(frozen=True)
class RegressionTarget:
    d_cx: float
    d_cy: float
    d_w: float
    d_h: float

    def __post_init__(self):
        for v in (self.d_cx, self.d_cy, self.d_w, self.d_h):
            if not math.isfinite(v):
                raise ValueError(f"non-finite regression target {self}")


def iou(a: Box, b: Box) -> float:
    """IoU of two inclusive-corner boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1) + 1
    iy = min(a.y2, b.y2) - max(a.y1, b.y1) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def _wh_iou(wa, ha, wb, hb) -> float:
    # IoU of two center-aligned boxes, depends on (w, h) only
    inter = min(wa, wb) * min(ha, hb)
    return inter / (wa * ha + wb * hb - inter)


def kmeans_anchors(boxes, k: int, seed: int, max_iters: int = 100,
                   distance: str = "iou"):
    """Cluster (w, h) pairs into k anchors.

    `distance` is "iou" (1 - IoU of center-aligned boxes) or "euclidean".
    Deterministic given the seed; distortion is non-increasing over the
    reported iterations (an iteration that would raise it is discarded).
    """
    pts = np.asarray([(float(w), float(h)) for w, h in boxes], dtype=np.float64)
    if pts.size == 0:
        raise ValueError("no boxes to cluster")
    distinct = np.unique(pts, axis=0)
    if not 1 <= k <= len(distinct):
        raise ValueError(f"k={k} not in [1, {len(distinct)} distinct boxes]")

    def dists(points, centers):
        if distance == "euclidean":
            return np.linalg.norm(points[:, None] - centers[None], axis=-1)
        inter = (np.minimum(points[:, None, 0], centers[None, :, 0])
                 * np.minimum(points[:, None, 1], centers[None, :, 1]))
        areas = points[:, 0] * points[:, 1]
        careas = centers[:, 0] * centers[:, 1]
        return 1.0 - inter / (areas[:, None] + careas[None] - inter)

    rng = np.random.default_rng(seed)
    centers = distinct[rng.choice(len(distinct), size=k, replace=False)]
    prev_distortion = np.inf
    for _ in range(max_iters):
        d = dists(pts, centers)
        assign = d.argmin(axis=1)
        distortion = float(d[np.arange(len(pts)), assign].sum())
        if distortion > prev_distortion + 1e-12:
            break
        prev_distortion = distortion
        new_centers = centers.copy()
        for j in range(k):
            members = pts[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
            else:
                new_centers[j] = pts[d.min(axis=1).argmax()]
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    return [Anchor(float(w), float(h)) for w, h in centers[order]]


def save_anchors(path, anchors) -> None:
    with open(path, "w") as fh:
        for a in anchors:
            fh.write(f"{a.width!r} {a.height!r}\n")


def load_anchors(path):
    anchors = []
    with open(path) as fh:
        for line in fh:
            w, h = line.split()
            anchors.append(Anchor(float(w), float(h)))
    return anchors


def assign_actionness_labels(candidates, gt, pos_iou: float = 0.7,
                             scores=None):
    """Label candidate boxes against ground truth.

    Positive when IoU > pos_iou with any gt box, or when the candidate has the
    highest IoU for some gt box (so every gt gets at least one positive).
    Everything else is negative. `scores` optionally carries actionness values
    (defaults to the best IoU per candidate).
    """
    if not 0.0 < pos_iou < 1.0:
        raise ValueError(f"pos_iou {pos_iou} outside (0,1)")
    if not candidates:
        return []
    ious = np.zeros((len(candidates), max(len(gt), 1)))
    for i, c in enumerate(candidates):
        for j, g in enumerate(gt):
            ious[i, j] = iou(c, g)
    positive = (ious > pos_iou).any(axis=1)
    if gt:
        positive[ious.argmax(axis=0)] = True
    out = []
    for i, c in enumerate(candidates):
        score = float(scores[i]) if scores is not None else float(ious[i].max())
        out.append(LabeledBox(c, score, POSITIVE if positive[i] else NEGATIVE))
    return out


def encode_regression(anchor_box: Box, gt: Box, log_scale: bool = False
                      ) -> RegressionTarget:
    """Raw center/size displacements (the default); log-scale optional."""
    acx, acy = anchor_box.center
    gcx, gcy = gt.center
    if log_scale:
        return RegressionTarget((gcx - acx) / anchor_box.width,
                                (gcy - acy) / anchor_box.height,
                                math.log(gt.width / anchor_box.width),
                                math.log(gt.height / anchor_box.height))
    return RegressionTarget(gcx - acx, gcy - acy,
                            gt.width - anchor_box.width,
                            gt.height - anchor_box.height)


def decode_regression(anchor_box: Box, t: RegressionTarget,
                      log_scale: bool = False) -> Box:
    acx, acy = anchor_box.center
    if log_scale:
        cx = acx + t.d_cx * anchor_box.width
        cy = acy + t.d_cy * anchor_box.height
        w = anchor_box.width * math.exp(t.d_w)
        h = anchor_box.height * math.exp(t.d_h)
    else:
        cx, cy = acx + t.d_cx, acy + t.d_cy
        w = anchor_box.width + t.d_w
        h = anchor_box.height + t.d_h
    return Box(cx - (w - 1) / 2.0, cy - (h - 1) / 2.0,
               cx + (w - 1) / 2.0, cy + (h - 1) / 2.0)


def smooth_l1(diff: np.ndarray):
    """Smooth-L1 loss and gradient, elementwise-summed."""
    d = np.asarray(diff, dtype=np.float64)
    small = np.abs(d) < 1.0
    loss = np.where(small, 0.5 * d * d, np.abs(d) - 0.5).sum()
    grad = np.where(small, d, np.sign(d))
    return float(loss), grad


def temporal_skip_map(box5: Box, conv5_dims, conv2_dims, depth: int = 8) -> Tube:
    """Map a box on the temporally collapsed conv5 grid into a tube of
    identical boxes on every conv2 slice, scaling with outward rounding."""
    h5, w5 = conv5_dims
    h2, w2 = conv2_dims
    if min(h5, w5, h2, w2, depth) < 1:
        raise ValueError("dims and depth must be positive")
    sy, sx = h2 / h5, w2 / w5
    x1 = max(0, math.floor(box5.x1 * sx))
    y1 = max(0, math.floor(box5.y1 * sy))
    x2 = min(w2 - 1, max(x1, math.ceil((box5.x2 + 1) * sx) - 1))
    y2 = min(h2 - 1, max(y1, math.ceil((box5.y2 + 1) * sy) - 1))
    scaled = Box(x1, y1, x2, y2)
    return Tube(tuple(scaled for _ in range(depth)))


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Whole-vector L2 normalization; a zero vector is left untouched."""
    norm = float(np.linalg.norm(v.ravel()))
    return v if norm == 0.0 else v / norm


class PairedFeatureProjector:
    """Trainable 1x1 projections reducing the paired ToI-pooled tubes to a
    fixed-length descriptor.

    Each tube is L2-normalized, the conv5 tube is duplicated along depth to
    match the conv2 tube, each is channel-projected by a 1x1 convolution,
    and the two halves are vectorized and concatenated.
    """

    def __init__(self, conv2_channels, conv5_channels, proj2, proj5, rng):
        from .tensor import glorot_uniform
        self.w2 = glorot_uniform((proj2, conv2_channels), rng,
                                 conv2_channels, proj2, dtype=np.float64)
        self.w5 = glorot_uniform((proj5, conv5_channels), rng,
                                 conv5_channels, proj5, dtype=np.float64)

    def output_length(self, tube2_shape, tube5_shape) -> int:
        _, d2, h2, w2 = tube2_shape
        _, _, h5, w5 = tube5_shape
        return (self.w2.shape[0] * d2 * h2 * w2
                + self.w5.shape[0] * d2 * h5 * w5)

    def __call__(self, pooled2: np.ndarray, pooled5: np.ndarray) -> np.ndarray:
        feats, _ = self.forward(pooled2, pooled5)
        return feats

    def forward(self, pooled2: np.ndarray, pooled5: np.ndarray):
        n2 = l2_normalize(pooled2)
        n5 = l2_normalize(pooled5)
        dup5 = np.repeat(n5, pooled2.shape[1] // pooled5.shape[1], axis=1)
        p2 = np.einsum("oc,cdhw->odhw", self.w2, n2)
        p5 = np.einsum("oc,cdhw->odhw", self.w5, dup5)
        vec = np.concatenate([p2.ravel(), p5.ravel()])
        cache = (pooled2, pooled5, n2, dup5, p2.shape, p5.shape)
        return vec, cache

    def backward(self, grad_vec: np.ndarray, cache):
        pooled2, pooled5, n2, dup5, s2, s5 = cache
        g2 = grad_vec[: int(np.prod(s2))].reshape(s2)
        g5 = grad_vec[int(np.prod(s2)):].reshape(s5)
        gw2 = np.einsum("odhw,cdhw->oc", g2, n2)
        gw5 = np.einsum("odhw,cdhw->oc", g5, dup5)
        gn2 = np.einsum("oc,odhw->cdhw", self.w2, g2)
        gdup5 = np.einsum("oc,odhw->cdhw", self.w5, g5)
        rep = pooled2.shape[1] // pooled5.shape[1]
        gn5 = gdup5.reshape(gdup5.shape[0], pooled5.shape[1], rep,
                            *gdup5.shape[2:]).sum(axis=2)
        gp2 = _l2_normalize_backward(gn2, pooled2)
        gp5 = _l2_normalize_backward(gn5, pooled5)
        return gp2, gp5, gw2, gw5


def _l2_normalize_backward(grad_n: np.ndarray, x: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(x.ravel()))
    if norm == 0.0:
        return grad_n
    n = x / norm
    return (grad_n - n * np.vdot(n, grad_n)) / norm


def pair_tube_features(conv2_cube: np.ndarray, tube: Tube,
                       conv5_cube: np.ndarray, box5: Box,
                       pool2_shape=(8, 8, 8), pool5_shape=(1, 4, 4),
                       projector: PairedFeatureProjector | None = None
                       ) -> np.ndarray:
    """ToI-pool the conv2 tube and the conv5 box, L2-normalize both,
    duplicate the conv5 result along depth, vectorize, concatenate, and
    project to a fixed length."""
    pooled2, _ = toi.toi_pool_forward(conv2_cube, tube, pool2_shape)
    tube5 = Tube(tuple(box5 for _ in range(conv5_cube.shape[1])))
    pooled5, _ = toi.toi_pool_forward(conv5_cube, tube5, pool5_shape)
    if pooled2.shape[1] % pooled5.shape[1]:
        raise ShapeError(
            f"conv2 pooled depth {pooled2.shape[1]} not a multiple of "
            f"conv5 pooled depth {pooled5.shape[1]}"
        )
    if projector is None:
        n2 = l2_normalize(pooled2)
        n5 = l2_normalize(pooled5)
        dup5 = np.repeat(n5, pooled2.shape[1] // pooled5.shape[1], axis=1)
        return np.concatenate([n2.ravel(), dup5.ravel()])
    return projector(pooled2, pooled5)


def balanced_sample(labeled, rng, max_per_side=None):
    """Equal positive/negative sampling for a training batch."""
    pos = [lb for lb in labeled if lb.label == POSITIVE]
    neg = [lb for lb in labeled if lb.label == NEGATIVE]
    n = min(len(pos), len(neg))
    if max_per_side is not None:
        n = min(n, max_per_side)
    pos_pick = list(rng.choice(len(pos), size=min(n, len(pos)), replace=False)) \
        if len(pos) > n else range(len(pos))
    neg_pick = list(rng.choice(len(neg), size=n, replace=False)) \
        if len(neg) > n else range(len(neg))
    return [pos[i] for i in pos_pick], [neg[i] for i in neg_pick]
