"""Dense 4-D tensor engine: 3D conv / max-pool / FC layers with hand-written
backward passes, a finite-difference gradient oracle, and the binary tensor
file format.

Tensors are plain numpy arrays in fixed (C, D, H, W) layout: channels, then
depth (frames), height, width. The `Tensor4` wrapper carries the layout
contract and the file format; all numerical kernels accept the raw array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

T4_MAGIC = b"T4"
T4_VERSION = 1


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(frozen=True)
class Tensor4:
    """A C x D x H x W feature cube. `values` owns the layout contract."""

    values: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims, got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ShapeError(f"all dims must be >= 1, got {self.values.shape}")

    @property
    def C(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    @property
    def H(self) -> int:
        return self.values.shape[2]

    @property
    def W(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self):
        return self.values.shape

    def save(self, path) -> None:
        save_tensor(path, self.values)

    @classmethod
    def load(cls, path) -> "Tensor4":
        return cls(load_tensor(path))


def save_tensor(path, values: np.ndarray) -> None:
    """Write a 4-D array: magic "T4", u16 version, four LE u32 dims, then
    raw little-endian float32 values in (C, D, H, W) order."""
    if values.ndim != 4:
        raise ShapeError(f"tensor file stores 4 dims, got {values.shape}")
    header = T4_MAGIC + struct.pack("<H4I", T4_VERSION, *values.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(20)
        if header[:2] != T4_MAGIC:
            raise ValueError(f"{path}: bad magic {header[:2]!r}")
        version, c, d, h, w = struct.unpack("<H4I", header[2:])
        if version != T4_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        values = np.frombuffer(fh.read(4 * c * d * h * w), dtype="<f4")
    if values.size != c * d * h * w:
        raise ValueError(f"{path}: truncated payload")
    return values.reshape(c, d, h, w).copy()


@dataclass(frozen=True)
class KernelSet:
    """Convolution weights (out, in, kd, kh, kw) plus per-out-channel bias."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 5:
            raise ShapeError(f"weights need 5 dims, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} != ({self.weights.shape[0]},)"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kdhw(self):
        return self.weights.shape[2:]


@dataclass(frozen=True)
class ArgmaxMap:
    """For each output element, the flat index of the winning input element."""

    indices: np.ndarray  # int64, shaped like the output
    in_shape: tuple

    def __post_init__(self):
        size = int(np.prod(self.in_shape))
        if self.indices.size and (
            self.indices.min() < 0 or self.indices.max() >= size
        ):
            raise ValueError("argmax index out of bounds for source shape")


def glorot_uniform(shape, rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    dtype = np.dtype(dtype)
    if dtype in (np.dtype(np.float32), np.dtype(np.float64)):
        # draw directly in the target dtype; avoids a float64 copy of big layers
        r = rng.random(size=shape, dtype=dtype)
        return (r * (2 * limit) - limit).astype(dtype, copy=False)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def make_kernels(out_channels: int, in_channels: int, kdhw, rng,
                 dtype=np.float32) -> KernelSet:
    kd, kh, kw = kdhw
    fan_in = in_channels * kd * kh * kw
    fan_out = out_channels * kd * kh * kw
    w = glorot_uniform((out_channels, in_channels, kd, kh, kw), rng,
                       fan_in, fan_out, dtype)
    return KernelSet(w, np.zeros(out_channels, dtype=dtype))


# ---------------------------------------------------------------------------
# 3D convolution


def conv3d_out_shape(in_shape, kernels: KernelSet, stride=(1, 1, 1), pad=(1, 1, 1)):
    c, d, h, w = in_shape
    if c != kernels.in_channels:
        raise ShapeError(
            f"input has {c} channels but kernels expect {kernels.in_channels} "
            f"(input {in_shape}, weights {kernels.weights.shape})"
        )
    kd, kh, kw = kernels.kdhw
    outs = []
    for ext, k, s, p in zip((d, h, w), (kd, kh, kw), stride, pad):
        o = (ext + 2 * p - k) // s + 1
        if o < 1:
            raise ShapeError(
                f"kernel {kernels.kdhw} does not fit input {in_shape} "
                f"with stride {stride} pad {pad}"
            )
        outs.append(o)
    return (kernels.out_channels,) + tuple(outs)


def conv3d(x: np.ndarray, kernels: KernelSet, stride=(1, 1, 1), pad=(1, 1, 1)
           ) -> np.ndarray:
    """Cross-correlation of a (C,D,H,W) cube with a KernelSet.

    Computed one output frame at a time via im2col + GEMM to bound the
    scratch memory on large feature maps.
    """
    out_shape = conv3d_out_shape(x.shape, kernels, stride, pad)
    oc, od, oh, ow = out_shape
    kd, kh, kw = kernels.kdhw
    sd, sh, sw = stride
    xp = np.pad(x, ((0, 0), (pad[0], pad[0]), (pad[1], pad[1]), (pad[2], pad[2])))
    # (C, D*, H*, W*, kd, kh, kw) view, strided spatially
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, :, ::sh, ::sw]
    w2 = kernels.weights.reshape(oc, -1)
    out = np.empty(out_shape, dtype=np.result_type(x, kernels.weights))
    for d in range(od):
        # (C, kd, kh, kw, oh, ow) -> (C*kd*kh*kw, oh*ow)
        col = np.ascontiguousarray(
            win[:, d * sd].transpose(0, 3, 4, 5, 1, 2)
        ).reshape(w2.shape[1], oh * ow)
        out[:, d] = (w2 @ col).reshape(oc, oh, ow)
    out += kernels.bias[:, None, None, None]
    return out


def conv3d_backward(grad_out: np.ndarray, x: np.ndarray, kernels: KernelSet,
                    stride=(1, 1, 1), pad=(1, 1, 1)):
    """Gradients of sum(grad_out * conv3d(x, k)) w.r.t. x, weights, bias."""
    out_shape = conv3d_out_shape(x.shape, kernels, stride, pad)
    if grad_out.shape != out_shape:
        raise ShapeError(f"grad shape {grad_out.shape} != conv output {out_shape}")
    oc, od, oh, ow = out_shape
    kd, kh, kw = kernels.kdhw
    sd, sh, sw = stride
    pd_, ph_, pw_ = pad
    xp = np.pad(x, ((0, 0), (pd_, pd_), (ph_, ph_), (pw_, pw_)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, :, ::sh, ::sw]
    w2 = kernels.weights.reshape(oc, -1)

    grad_w = np.zeros_like(w2, dtype=np.float64)
    gxp = np.zeros(xp.shape, dtype=np.float64)
    for d in range(od):
        col = np.ascontiguousarray(
            win[:, d * sd].transpose(0, 3, 4, 5, 1, 2)
        ).reshape(w2.shape[1], oh * ow)
        g = grad_out[:, d].reshape(oc, oh * ow)
        grad_w += g @ col.T
        gcol = (w2.T @ g).reshape(x.shape[0], kd, kh, kw, oh, ow)
        for a in range(kd):
            for b in range(kh):
                for c in range(kw):
                    gxp[:, d * sd + a, b:b + sh * oh:sh, c:c + sw * ow:sw] += \
                        gcol[:, a, b, c]
    grad_x = gxp[:, pd_:pd_ + x.shape[1], ph_:ph_ + x.shape[2], pw_:pw_ + x.shape[3]]
    grad_b = grad_out.sum(axis=(1, 2, 3), dtype=np.float64)
    dt = x.dtype
    return (grad_x.astype(dt, copy=False),
            grad_w.reshape(kernels.weights.shape).astype(dt, copy=False),
            grad_b.astype(dt, copy=False))


# ---------------------------------------------------------------------------
# 3D max pooling


def maxpool3d(x: np.ndarray, kernel, stride=None):
    """Max pool a (C,D,H,W) cube. Returns (output, ArgmaxMap).

    Stride defaults to the kernel (the only configuration the networks use).
    Trailing windows that do not fit are pooled over the available elements.
    Ties go to the lowest flat index.
    """
    if stride is None:
        stride = kernel
    if tuple(stride) != tuple(kernel):
        raise ShapeError("maxpool3d supports stride == kernel only")
    kd, kh, kw = kernel
    c, d, h, w = x.shape
    if kd > d or kh > h or kw > w:
        raise ShapeError(f"pool kernel {kernel} larger than input {x.shape}")
    od, oh, ow = -(-d // kd), -(-h // kh), -(-w // kw)
    pads = (od * kd - d, oh * kh - h, ow * kw - w)
    xp = np.pad(x, ((0, 0), (0, pads[0]), (0, pads[1]), (0, pads[2])),
                constant_values=-np.inf)
    r = xp.reshape(c, od, kd, oh, kh, ow, kw).transpose(0, 1, 3, 5, 2, 4, 6)
    r = np.ascontiguousarray(r).reshape(c, od, oh, ow, kd * kh * kw)
    win_arg = r.argmax(axis=-1)  # first max: lowest offset, lexicographic (d,h,w)
    out = np.take_along_axis(r, win_arg[..., None], axis=-1)[..., 0]
    a, rem = np.divmod(win_arg, kh * kw)
    b, cc = np.divmod(rem, kw)
    ci, di, hi, wi = np.meshgrid(np.arange(c), np.arange(od), np.arange(oh),
                                 np.arange(ow), indexing="ij")
    flat = ((ci * d + di * kd + a) * h + hi * kh + b) * w + wi * kw + cc
    return out.astype(x.dtype, copy=False), ArgmaxMap(flat, x.shape)


def maxpool3d_backward(grad_out: np.ndarray, amap: ArgmaxMap) -> np.ndarray:
    if grad_out.shape != amap.indices.shape:
        raise ShapeError(
            f"grad shape {grad_out.shape} != pooled shape {amap.indices.shape}"
        )
    grad_in = np.zeros(int(np.prod(amap.in_shape)), dtype=grad_out.dtype)
    np.add.at(grad_in, amap.indices.ravel(), grad_out.ravel())
    return grad_in.reshape(amap.in_shape)


# ---------------------------------------------------------------------------
# Fully connected, nonlinearity, losses


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray
                    ) -> np.ndarray:
    if x.shape != (weights.shape[1],):
        raise ShapeError(f"input length {x.shape} != weight rows {weights.shape}")
    return weights @ x + bias


def fully_connected_backward(grad_out, x, weights):
    return weights.T @ grad_out, np.outer(grad_out, x), grad_out.copy()


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum(dtype=np.float64)


def softmax_xent(logits: np.ndarray, label: int):
    """Cross-entropy of softmax(logits) against a class index.

    Returns (loss, grad wrt logits); the grad sums to zero.
    """
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} logits")
    p = softmax(logits)
    loss = -np.log(max(p[label], np.finfo(np.float64).tiny))
    grad = p.copy()
    grad[label] -= 1.0
    return float(loss), grad.astype(logits.dtype, copy=False)


def sgd_step(params, grads, lr: float):
    """One plain SGD update, params <- params - lr * grads. Pure."""
    if isinstance(params, dict):
        if set(params) != set(grads):
            raise ShapeError("param/grad keys differ")
        return {k: sgd_step(params[k], grads[k], lr) for k in params}
    if isinstance(params, (list, tuple)):
        if len(params) != len(grads):
            raise ShapeError("param/grad lengths differ")
        return type(params)(sgd_step(p, g, lr) for p, g in zip(params, grads))
    p = np.asarray(params)
    g = np.asarray(grads)
    if p.shape != g.shape:
        raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
    return p - lr * g


def finite_diff_grad(fn, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = grad.ravel()
    xf = x.astype(np.float64).ravel().copy()
    shape = x.shape
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + eps
        hi = fn(xf.reshape(shape))
        xf[i] = orig - eps
        lo = fn(xf.reshape(shape))
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * eps)
    return grad
