"""3D sub-pixel upsampling.

A convolution in low resolution expands channels by p_d*p_h*p_w, then a
channel-to-space&depth permutation scatters each expanded channel group into
a p_d x p_h x p_w block of the high resolution cube:

    HR[c, i, j, k] = EXP[c', i//p_d, j//p_h, k//p_w]
    c' = c*p_d*p_h*p_w + mod(i, p_d) + p_w*mod(j, p_h) + p_w*p_h*mod(k, p_w)

The raw channel offset mod(i,p_d) + p_w*mod(j,p_h) + p_w*p_h*mod(k,p_w) is
only a permutation of [0, p_d*p_h*p_w) when p_d = p_w; for p_d < p_w the
offsets are still distinct but leave gaps, so they are compacted by rank to
keep the index map a bijection. When p_d = p_w the compaction is the
identity and the formula above holds verbatim.

The un-pool + convolution path is kept as the reference alternative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ArgmaxMap, KernelSet, ShapeError, conv3d


@dataclass(frozen=True)
class UpscaleFactors:
    """Integer upscale factors for depth, height and width.

    Factor combinations whose channel-offset map is not a bijection of
    [0, p_d*p_h*p_w) (possible when p_d > p_w) are rejected up front.
    """

    p_d: int
    p_h: int
    p_w: int

    def __post_init__(self):
        if min(self.p_d, self.p_h, self.p_w) < 1:
            raise ValueError(f"factors must be >= 1, got {self}")
        if len(set(self.raw_offsets().ravel())) != self.volume:
            raise ValueError(
                f"factors {self} make the channel offset map collide; "
                f"only combinations with p_d <= p_w are bijective"
            )

    @property
    def volume(self) -> int:
        return self.p_d * self.p_h * self.p_w

    def raw_offsets(self) -> np.ndarray:
        """Channel offset of each (i, j, k) phase, as printed."""
        a = np.arange(self.p_d)[:, None, None]
        b = np.arange(self.p_h)[None, :, None]
        c = np.arange(self.p_w)[None, None, :]
        return a + self.p_w * b + self.p_w * self.p_h * c

    def offset_table(self) -> np.ndarray:
        """Raw offsets compacted by rank into [0, volume); identical to
        raw_offsets when p_d = p_w."""
        raw = self.raw_offsets()
        return np.searchsorted(np.sort(raw.ravel()), raw)


def _offset_grid(p: UpscaleFactors, out_shape):
    _, od, oh, ow = out_shape
    i = np.arange(od)[:, None, None]
    j = np.arange(oh)[None, :, None]
    k = np.arange(ow)[None, None, :]
    off = p.offset_table()[i % p.p_d, j % p.p_h, k % p.p_w]
    return off, i // p.p_d, j // p.p_h, k // p.p_w


def channel_to_spacedepth(expanded: np.ndarray, p: UpscaleFactors) -> np.ndarray:
    """Permute a (C*v, D, H, W) cube into (C, p_d*D, p_h*H, p_w*W)."""
    ce, d, h, w = expanded.shape
    if ce % p.volume:
        raise ShapeError(f"{ce} channels not divisible by factor volume {p.volume}")
    c_out = ce // p.volume
    out_shape = (c_out, p.p_d * d, p.p_h * h, p.p_w * w)
    off, i2, j2, k2 = _offset_grid(p, out_shape)
    cprime = np.arange(c_out)[:, None, None, None] * p.volume + off[None]
    return expanded[cprime,
                    np.broadcast_to(i2[None], out_shape),
                    np.broadcast_to(j2[None], out_shape),
                    np.broadcast_to(k2[None], out_shape)]


def channel_to_spacedepth_backward(grad_hr: np.ndarray, p: UpscaleFactors
                                   ) -> np.ndarray:
    """Inverse permutation: gradients (or values) back to the expanded layout."""
    c, dh, hh, wh = grad_hr.shape
    if dh % p.p_d or hh % p.p_h or wh % p.p_w:
        raise ShapeError(f"HR shape {grad_hr.shape} not divisible by factors {p}")
    out = np.empty((c * p.volume, dh // p.p_d, hh // p.p_h, wh // p.p_w),
                   dtype=grad_hr.dtype)
    off, i2, j2, k2 = _offset_grid(p, grad_hr.shape)
    cprime = np.arange(c)[:, None, None, None] * p.volume + off[None]
    out[cprime,
        np.broadcast_to(i2[None], grad_hr.shape),
        np.broadcast_to(j2[None], grad_hr.shape),
        np.broadcast_to(k2[None], grad_hr.shape)] = grad_hr
    return out


def subpixel_upsample3d(lr: np.ndarray, kernels: KernelSet, p: UpscaleFactors
                        ) -> np.ndarray:
    """Channel-expanding convolution in LR space followed by the permutation."""
    if kernels.out_channels % p.volume:
        raise ShapeError(
            f"kernel out channels {kernels.out_channels} not divisible by "
            f"factor volume {p.volume}"
        )
    kd, kh, kw = kernels.kdhw
    expanded = conv3d(lr, kernels, stride=(1, 1, 1),
                      pad=(kd // 2, kh // 2, kw // 2))
    return channel_to_spacedepth(expanded, p)


def corner_placement_map(lr_shape, p: UpscaleFactors) -> ArgmaxMap:
    """Deterministic placement for un-pooling: each LR value lands on the
    top-left-front corner of its p-block in the HR grid."""
    c, d, h, w = lr_shape
    hr = (c, d * p.p_d, h * p.p_h, w * p.p_w)
    ci, di, hi, wi = np.meshgrid(np.arange(c), np.arange(d), np.arange(h),
                                 np.arange(w), indexing="ij")
    flat = ((ci * hr[1] + di * p.p_d) * hr[2] + hi * p.p_h) * hr[3] + wi * p.p_w
    return ArgmaxMap(flat, hr)


def unpool3d(lr: np.ndarray, placement: ArgmaxMap) -> np.ndarray:
    """Scatter LR values to their recorded HR positions, zeros elsewhere."""
    if placement.indices.shape != lr.shape:
        raise ShapeError(
            f"placement shape {placement.indices.shape} != input {lr.shape}"
        )
    hr = np.zeros(int(np.prod(placement.in_shape)), dtype=lr.dtype)
    hr[placement.indices.ravel()] = lr.ravel()
    return hr.reshape(placement.in_shape)


def unpool3d_backward(grad_hr: np.ndarray, placement: ArgmaxMap) -> np.ndarray:
    if grad_hr.shape != tuple(placement.in_shape):
        raise ShapeError(
            f"grad shape {grad_hr.shape} != HR shape {placement.in_shape}"
        )
    return grad_hr.ravel()[placement.indices.ravel()].reshape(
        placement.indices.shape)


def unpool_conv3d_reference(lr: np.ndarray, placement: ArgmaxMap,
                            kernels: KernelSet, p: UpscaleFactors) -> np.ndarray:
    """Reference upsampling: un-pool into the HR grid, then convolve."""
    expected = (lr.shape[0], lr.shape[1] * p.p_d,
                lr.shape[2] * p.p_h, lr.shape[3] * p.p_w)
    if tuple(placement.in_shape) != expected:
        raise ShapeError(
            f"placement HR shape {placement.in_shape} != {expected} for factors {p}"
        )
    hr = unpool3d(lr, placement)
    kd, kh, kw = kernels.kdhw
    return conv3d(hr, kernels, stride=(1, 1, 1), pad=(kd // 2, kh // 2, kw // 2))
