"""Desk-scale trainable models for both pipelines.

These reuse the reference architectures' structure at reduced channel
counts so the end-to-end paths (proposal generation, linking, recognition,
segmentation) train in minutes on a single core. Every backward pass is
hand-written; there is no autograd tape.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from . import toi
from .networks import (FC, Conv3D, Pool3D, ReLU, SubpixelUp, UnpoolUp,
                       clip_grads)
from .proposals import (PairedFeatureProjector, decode_regression,
                        encode_regression, smooth_l1)
from .segmentation import segmentation_loss
from .tensor import softmax, softmax_xent
from .toi import Box, Tube, pixel_box_to_cells
from .upsample import UpscaleFactors

ENC_CHANNELS = (8, 16, 24, 32, 32)
ENC_POOLS = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))


class Encoder:
    """conv1..conv5 3D feature extractor with taps for skip connections.

    Activation names conv1..conv5 refer to the post-ReLU outputs; pooling
    follows conv1..conv4 as in the reference tables.
    """

    def __init__(self, rng, in_c=3, channels=ENC_CHANNELS, dtype=np.float32):
        self.channels = channels
        cs = (in_c,) + tuple(channels)
        self.convs = [Conv3D(cs[i], cs[i + 1], rng=rng, dtype=dtype)
                      for i in range(5)]
        self.relus = [ReLU() for _ in range(5)]
        self.pools = [Pool3D(k) for k in ENC_POOLS]

    def forward(self, x):
        acts = {}
        h = x
        for i in range(5):
            h = self.relus[i].forward(self.convs[i].forward(h))
            acts[f"conv{i + 1}"] = h
            if i < 4:
                h = self.pools[i].forward(h)
        return acts

    def backward(self, taps):
        g = taps.get("conv5")
        if g is None:
            g = np.zeros_like(self.relus[4]._x)
        g = self.convs[4].backward(self.relus[4].backward(g))
        for i in (3, 2, 1, 0):
            g = self.pools[i].backward(g)
            t = taps.get(f"conv{i + 1}")
            if t is not None:
                g = g + t
            g = self.convs[i].backward(self.relus[i].backward(g))
        return g

    def trainables(self):
        return list(self.convs)

    def state(self):
        return {f"conv{i + 1}": c.state() for i, c in enumerate(self.convs)}

    def load_state(self, st):
        for i, c in enumerate(self.convs):
            c.load_state(st[f"conv{i + 1}"])


def _flatten_state(state, prefix=""):
    out = {}
    for key, val in state.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten_state(val, name + "."))
        else:
            out[name] = val
    return out


class _ModelBase:
    def zero_grads(self):
        for layer in self.trainables():
            layer.zero_grads()

    def sgd_update(self, lr):
        for layer in self.trainables():
            layer.sgd_update(lr)

    def flat_state(self):
        return _flatten_state(self.state())


def candidate_boxes(anchors, grid_hw, frame_hw):
    """Anchor templates placed at every conv5 cell center, in pixel space."""
    gh, gw = grid_hw
    fh, fw = frame_hw
    boxes = []
    # anchor-major ordering so boxes[i] matches actionness logits.ravel()
    for a in anchors:
        for u in range(gh):
            for v in range(gw):
                cy = (u + 0.5) * fh / gh
                cx = (v + 0.5) * fw / gw
                x1 = max(0.0, cx - (a.width - 1) / 2)
                y1 = max(0.0, cy - (a.height - 1) / 2)
                x2 = min(fw - 1.0, cx + (a.width - 1) / 2)
                y2 = min(fh - 1.0, cy + (a.height - 1) / 2)
                boxes.append(Box(x1, y1, max(x1, x2), max(y1, y2)))
    return boxes


class TCNN(_ModelBase):
    """Top-down pipeline: actionness over anchors on the collapsed conv5
    cube, temporal skip pooling into conv2, paired-feature regression, and
    a recognition head over ToI-pooled tubes."""

    POOL2 = (8, 4, 4)
    POOL5 = (1, 2, 2)
    # regression targets are raw-pixel offsets (tens of pixels); a fixed
    # output scale lets the head reach them with O(1) weights
    REG_SCALE = 16.0

    def __init__(self, num_classes, anchors, frame_hw, seed=0):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.anchors = list(anchors)
        self.frame_hw = frame_hw
        self.encoder = Encoder(rng)
        c2, c5 = ENC_CHANNELS[1], ENC_CHANNELS[4]
        self.act_head = Conv3D(c5, len(self.anchors), (1, 1, 1), rng=rng)
        self.projector = PairedFeatureProjector(c2, c5, proj2=8, proj5=16,
                                                rng=rng)
        d2, h2, w2 = self.POOL2
        _, h5, w5 = self.POOL5
        vec_len = 8 * d2 * h2 * w2 + 16 * d2 * h5 * w5
        self.reg_fc1 = FC(vec_len, 128, rng)
        self.reg_relu = ReLU()
        self.reg_fc2 = FC(128, 8 * 4, rng)
        rec_len = c2 * d2 * h2 * w2
        self.rec_fc1 = FC(rec_len, 128, rng)
        self.rec_relu = ReLU()
        self.rec_fc2 = FC(128, num_classes + 1, rng)
        self._grid_hw = None

    def trainables(self):
        return (self.encoder.trainables()
                + [self.act_head, self.reg_fc1, self.reg_fc2,
                   self.rec_fc1, self.rec_fc2])

    # projector params are plain arrays; fold them into the update manually
    def sgd_update(self, lr):
        super().sgd_update(lr)

    def state(self):
        return {
            "encoder": self.encoder.state(),
            "act_head": self.act_head.state(),
            "proj_w2": self.projector.w2,
            "proj_w5": self.projector.w5,
            "reg_fc1": self.reg_fc1.state(),
            "reg_fc2": self.reg_fc2.state(),
            "rec_fc1": self.rec_fc1.state(),
            "rec_fc2": self.rec_fc2.state(),
        }

    def load_state(self, st):
        self.encoder.load_state(st["encoder"])
        self.act_head.load_state(st["act_head"])
        self.projector.w2 = st["proj_w2"].astype(np.float64)
        self.projector.w5 = st["proj_w5"].astype(np.float64)
        for name in ("reg_fc1", "reg_fc2", "rec_fc1", "rec_fc2"):
            getattr(self, name).load_state(st[name])

    # ------------------------------------------------------------------
    def encode_clip(self, frames):
        acts = self.encoder.forward(frames)
        logits = self.act_head.forward(acts["conv5"])
        if self._grid_hw is None:
            self._grid_hw = acts["conv5"].shape[2:]
        return acts, logits

    def clip_candidates(self):
        return candidate_boxes(self.anchors, self._grid_hw, self.frame_hw)

    def _tube_features(self, conv2, conv5, box_pixel):
        """Pair the skip-pooled conv2 tube with the conv5 box features."""
        cell5 = pixel_box_to_cells(box_pixel, conv5.shape[2:], self.frame_hw)
        cell2 = pixel_box_to_cells(box_pixel, conv2.shape[2:], self.frame_hw)
        tube2 = Tube(tuple(cell2 for _ in range(conv2.shape[1])))
        tube5 = Tube(tuple(cell5 for _ in range(conv5.shape[1])))
        pooled2, map2 = toi.toi_pool_forward(conv2, tube2, self.POOL2)
        pooled5, map5 = toi.toi_pool_forward(conv5, tube5, self.POOL5)
        vec, cache = self.projector.forward(pooled2.astype(np.float64),
                                            pooled5.astype(np.float64))
        return vec, (cache, map2, map5)

    def _regress(self, vec):
        h = self.reg_relu.forward(self.reg_fc1.forward(vec.astype(np.float32)))
        return self.reg_fc2.forward(h).reshape(8, 4) * self.REG_SCALE

    def _regress_backward(self, gdeltas):
        g = self.reg_fc2.backward(
            (gdeltas * self.REG_SCALE).reshape(-1).astype(np.float32))
        return self.reg_fc1.backward(self.reg_relu.backward(g))

    def tpn_step(self, frames, gt_boxes, rng, lr, reg_candidates=4,
                 reg_weight=1.0):
        """One alternated-TPN update on a clip: balanced actionness BCE plus
        smooth-L1 per-frame regression on a few positive candidates."""
        from .proposals import POSITIVE, assign_actionness_labels

        self.zero_grads()
        acts, logits = self.encode_clip(frames)
        cands = self.clip_candidates()
        labeled = assign_actionness_labels(cands, gt_boxes)
        pos_idx = [i for i, lb in enumerate(labeled) if lb.label == POSITIVE]
        neg_idx = [i for i, lb in enumerate(labeled) if lb.label != POSITIVE]
        n = min(len(pos_idx), len(neg_idx), 8)
        pos_pick = list(rng.choice(len(pos_idx), size=n, replace=False)) \
            if len(pos_idx) > n else range(len(pos_idx))
        neg_pick = list(rng.choice(len(neg_idx), size=n, replace=False))
        sampled = [(pos_idx[i], 1.0) for i in pos_pick] \
            + [(neg_idx[i], 0.0) for i in neg_pick]

        flat = logits.ravel()
        glogits = np.zeros_like(flat)
        bce = 0.0
        for i, y in sampled:
            z = float(flat[i])
            p = 1.0 / (1.0 + np.exp(-z))
            bce += -(y * np.log(max(p, 1e-12))
                     + (1 - y) * np.log(max(1 - p, 1e-12)))
            glogits[i] = (p - y) / len(sampled)
        bce /= max(len(sampled), 1)
        g5 = self.act_head.backward(glogits.reshape(logits.shape))

        g2 = np.zeros_like(acts["conv2"])
        reg_loss = 0.0
        picks = pos_idx[:reg_candidates]
        for i in picks:
            vec, (cache, map2, map5) = self._tube_features(
                acts["conv2"], acts["conv5"], cands[i])
            deltas = self._regress(vec)
            diffs = np.empty((8, 4))
            for f in range(8):
                t = encode_regression(cands[i], gt_boxes[min(f, len(gt_boxes) - 1)])
                diffs[f] = deltas[f] - np.array(
                    [t.d_cx, t.d_cy, t.d_w, t.d_h])
            loss, gdiff = smooth_l1(diffs)
            reg_loss += loss / 8.0
            gvec = self._regress_backward(gdiff * reg_weight / 8.0)
            gp2, gp5, gw2, gw5 = self.projector.backward(
                gvec.astype(np.float64), cache)
            gw2, gw5 = clip_grads(gw2, gw5)
            self.projector.w2 = tz.sgd_step(self.projector.w2, gw2, lr)
            self.projector.w5 = tz.sgd_step(self.projector.w5, gw5, lr)
            g2 += toi.toi_pool_backward(gp2.astype(np.float32), map2)
            g5 += toi.toi_pool_backward(gp5.astype(np.float32), map5)
        self.encoder.backward({"conv5": g5, "conv2": g2})
        super().sgd_update(lr)
        return float(bce), float(reg_loss / max(len(picks), 1))

    # ------------------------------------------------------------------
    def recognition_forward(self, conv2_cubes, pixel_boxes):
        """Pool a tube spanning the concatenated clips and classify it."""
        cube = np.concatenate(conv2_cubes, axis=1)
        cells = [pixel_box_to_cells(b, cube.shape[2:], self.frame_hw)
                 for b in pixel_boxes]
        pooled, pmap = toi.toi_pool_forward(cube, Tube(tuple(cells)),
                                            self.POOL2)
        vec = pooled.ravel().astype(np.float32)
        h = self.rec_relu.forward(self.rec_fc1.forward(vec))
        logits = self.rec_fc2.forward(h)
        return logits, (pmap, pooled.shape, [c.shape[1] for c in conv2_cubes])

    def recognition_backward(self, glogits, cache):
        pmap, pooled_shape, depths = cache
        g = self.rec_fc2.backward(glogits.astype(np.float32))
        g = self.rec_fc1.backward(self.rec_relu.backward(g))
        gcube = toi.toi_pool_backward(g.reshape(pooled_shape), pmap)
        return np.split(gcube, np.cumsum(depths)[:-1], axis=1)

    def recognition_step(self, clips, gt_boxes, label, rng, lr):
        """Joint update over a whole-video tube (label is 1..N, or 0 for a
        background tube)."""
        self.zero_grads()
        acts_list = [self.encoder.forward(fr) for fr in clips]
        # the encoder layer caches hold only the last clip; re-run per clip
        total = 0.0
        conv2_cubes = [a["conv2"] for a in acts_list]
        logits, cache = self.recognition_forward(conv2_cubes, gt_boxes)
        loss, glog = softmax_xent(logits, label)
        total += loss
        gsplit = self.recognition_backward(glog, cache)
        for frames, g2 in zip(clips, gsplit):
            self.encoder.forward(frames)  # restore this clip's caches
            self.encoder.backward({"conv2": g2})
        super().sgd_update(lr)
        return float(total)


class STCNN(_ModelBase):
    """Bottom-up pipeline: encoder-decoder with skip concatenations, a
    per-frame two-class segmentation head, and a recognition head on the
    final concatenation cube."""

    POOL = (8, 4, 4)

    def __init__(self, num_classes, frame_hw, seed=0, upsampler="subpixel"):
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.frame_hw = frame_hw
        self.upsampler = upsampler
        self.encoder = Encoder(rng)
        c1, c2, c3, c4, c5 = ENC_CHANNELS
        up = SubpixelUp if upsampler == "subpixel" else UnpoolUp
        self.up4 = up(c5, 8, UpscaleFactors(2, 2, 2), rng)
        self.conv4c = Conv3D(8 + c4, 16, rng=rng)
        self.relu4c = ReLU()
        self.up3 = up(16, 8, UpscaleFactors(2, 2, 2), rng)
        self.conv3c = Conv3D(8 + c3, 16, rng=rng)
        self.relu3c = ReLU()
        self.up2 = up(16, 8, UpscaleFactors(2, 2, 2), rng)
        self.conv2c = Conv3D(8 + c2, 16, rng=rng)
        self.relu2c = ReLU()
        self.up1 = up(16, 8, UpscaleFactors(1, 2, 2), rng)
        self.concat1_c = 8 + c1
        self.conv6 = Conv3D(self.concat1_c, 16, (1, 1, 1), rng=rng)
        self.relu6 = ReLU()
        self.conv7 = Conv3D(16, 2, (1, 1, 1), rng=rng)
        d, h, w = self.POOL
        self.rec_fc1 = FC(self.concat1_c * d * h * w, 64, rng)
        self.rec_relu = ReLU()
        self.rec_fc2 = FC(64, num_classes + 1, rng)

    def trainables(self):
        return (self.encoder.trainables()
                + [self.up4, self.conv4c, self.up3, self.conv3c,
                   self.up2, self.conv2c, self.up1, self.conv6, self.conv7,
                   self.rec_fc1, self.rec_fc2])

    def state(self):
        st = {"encoder": self.encoder.state()}
        for name in ("up4", "conv4c", "up3", "conv3c", "up2", "conv2c",
                     "up1", "conv6", "conv7", "rec_fc1", "rec_fc2"):
            st[name] = getattr(self, name).state()
        return st

    def load_state(self, st):
        self.encoder.load_state(st["encoder"])
        for name in ("up4", "conv4c", "up3", "conv3c", "up2", "conv2c",
                     "up1", "conv6", "conv7", "rec_fc1", "rec_fc2"):
            getattr(self, name).load_state(st[name])

    # ------------------------------------------------------------------
    def forward(self, frames):
        acts = self.encoder.forward(frames)
        h = self.up4.forward(acts["conv5"])
        h = self.relu4c.forward(self.conv4c.forward(
            np.concatenate([h, acts["conv4"]], axis=0)))
        h = self.up3.forward(h)
        h = self.relu3c.forward(self.conv3c.forward(
            np.concatenate([h, acts["conv3"]], axis=0)))
        h = self.up2.forward(h)
        h = self.relu2c.forward(self.conv2c.forward(
            np.concatenate([h, acts["conv2"]], axis=0)))
        h = self.up1.forward(h)
        concat1 = np.concatenate([h, acts["conv1"]], axis=0)
        seg_logits = self.conv7.forward(
            self.relu6.forward(self.conv6.forward(concat1)))
        return acts, concat1, seg_logits

    def backward(self, g_seg_logits, g_concat1_extra=None):
        g = self.conv6.backward(
            self.relu6.backward(self.conv7.backward(g_seg_logits)))
        if g_concat1_extra is not None:
            g = g + g_concat1_extra
        g_up1, g_skip1 = g[:8], g[8:]
        g = self.up1.backward(np.ascontiguousarray(g_up1))
        g = self.conv2c.backward(self.relu2c.backward(g))
        g_up2, g_skip2 = g[:8], g[8:]
        g = self.up2.backward(np.ascontiguousarray(g_up2))
        g = self.conv3c.backward(self.relu3c.backward(g))
        g_up3, g_skip3 = g[:8], g[8:]
        g = self.up3.backward(np.ascontiguousarray(g_up3))
        g = self.conv4c.backward(self.relu4c.backward(g))
        g_up4, g_skip4 = g[:8], g[8:]
        g5 = self.up4.backward(np.ascontiguousarray(g_up4))
        self.encoder.backward({
            "conv5": g5,
            "conv4": np.ascontiguousarray(g_skip4),
            "conv3": np.ascontiguousarray(g_skip3),
            "conv2": np.ascontiguousarray(g_skip2),
            "conv1": np.ascontiguousarray(g_skip1),
        })

    def recognition_forward(self, concat1, pixel_boxes):
        cells = [pixel_box_to_cells(b, concat1.shape[2:], self.frame_hw)
                 for b in pixel_boxes]
        pooled, pmap = toi.toi_pool_forward(concat1, Tube(tuple(cells)),
                                            self.POOL)
        vec = pooled.ravel().astype(np.float32)
        h = self.rec_relu.forward(self.rec_fc1.forward(vec))
        return self.rec_fc2.forward(h), (pmap, pooled.shape)

    def recognition_backward(self, glogits, cache):
        pmap, pooled_shape = cache
        g = self.rec_fc2.backward(glogits.astype(np.float32))
        g = self.rec_fc1.backward(self.rec_relu.backward(g))
        return toi.toi_pool_backward(g.reshape(pooled_shape), pmap)

    def train_step(self, frames, gt_masks, gt_boxes, label, lr,
                   seg_weight=1.0, rec_weight=1.0):
        """Joint segmentation + recognition update on one clip."""
        self.zero_grads()
        acts, concat1, seg_logits = self.forward(frames)
        seg_loss, g_seg = segmentation_loss(seg_logits, gt_masks)
        # rebalance the gradient so the sparse foreground class is not
        # swamped by background pixels (the reported loss stays unweighted)
        fg = np.stack([m.bits for m in gt_masks])
        rho = float(fg.mean())
        if 0.0 < rho < 1.0:
            w = np.where(fg, 0.5 / rho, 0.5 / (1.0 - rho))
            g_seg = g_seg * w[None].astype(g_seg.dtype)
        rec_loss = 0.0
        g_extra = None
        if label is not None and gt_boxes is not None:
            logits, cache = self.recognition_forward(concat1, gt_boxes)
            rec_loss, glog = softmax_xent(logits, label)
            g_extra = self.recognition_backward(glog * rec_weight, cache)
        self.backward(g_seg * seg_weight, g_extra)
        self.sgd_update(lr)
        return float(seg_loss), float(rec_loss)

    def segment_clip(self, frames, threshold=0.5):
        """Per-pixel foreground probabilities and binary masks for a clip."""
        from .segmentation import SegMask

        _, concat1, seg_logits = self.forward(frames)
        z = seg_logits - seg_logits.max(axis=0, keepdims=True)
        e = np.exp(z)
        p_fg = (e / e.sum(axis=0, keepdims=True))[1]
        masks = [SegMask(p_fg[t] >= threshold) for t in range(p_fg.shape[0])]
        return masks, p_fg, concat1
