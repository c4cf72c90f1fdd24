"""Non-convolution operators: batchnorm (inference form), ReLU, pooling,
residual add, dense, softmax.

Inference-mode batch normalization never recomputes batch statistics: the
trained (gamma, beta, mean, var) are folded once into a per-channel
(scale, shift) pair and every application is the two-operation rewrite
y = scale*x + shift.  The standalone application below performs the same
two float32 operations, in the same order, as the fused GEMM epilogue, so
fusing a layer on or off cannot change the result.

All elementwise and pooling operators parallelize over the batch extent
with a caller-supplied thread count and are pure with respect to inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .gemm import EP_NONE, gemm_block_source, MatrixBlockSource
from .tensor import FP32, GeometryError, Layout, Tensor, make_tensor
from .tuning import select_cache_params


def _parallel_batches(t: int, threads: int, body):
    """Run body(lo, hi) over a partition of the batch extent."""
    nworkers = max(1, min(threads, t))
    if nworkers == 1:
        body(0, t)
        return
    bounds = [(t * i) // nworkers for i in range(nworkers + 1)]
    workers = [threading.Thread(target=body, args=(bounds[i], bounds[i + 1]),
                                daemon=True)
               for i in range(nworkers)]
    for w in workers:
        w.start()
    for w in workers:
        w.join()


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchNormParams:
    """Trained per-channel statistics and affine parameters."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        arrays = (self.gamma, self.beta, self.running_mean, self.running_var)
        c = len(self.gamma)
        if any(len(a) != c for a in arrays):
            raise ValueError("batchnorm parameter arrays must share one length")
        if np.any(np.asarray(self.running_var, dtype=np.float64) + self.eps <= 0):
            raise ValueError("var + eps must be positive")


@dataclass(frozen=True)
class FoldedBatchNorm:
    """The inference rewrite: y = scale*x + shift, per channel."""

    scale: np.ndarray
    shift: np.ndarray


def fold_batchnorm(p: BatchNormParams) -> FoldedBatchNorm:
    """Collapse (gamma, beta, mean, var, eps) into (scale, shift).

    scale = gamma / sqrt(var + eps), shift = beta - scale * mean.  Folded
    in double and rounded once to float32 so the pair carries the full
    precision of the trained statistics.
    """
    var = np.asarray(p.running_var, dtype=np.float64)
    scale = np.asarray(p.gamma, dtype=np.float64) / np.sqrt(var + p.eps)
    shift = np.asarray(p.beta, dtype=np.float64) - scale * np.asarray(
        p.running_mean, dtype=np.float64)
    return FoldedBatchNorm(scale.astype(FP32), shift.astype(FP32))


def batchnorm_inference(x: Tensor, f: FoldedBatchNorm, threads: int = 1,
                        out: Tensor | None = None) -> Tensor:
    """Apply y = scale*x + shift over the channel axis."""
    c = x.shape[3]
    if len(f.scale) != c or len(f.shift) != c:
        raise ValueError(f"folded coefficients cover {len(f.scale)} channels, "
                         f"tensor has {c}")
    out = _like(x, out)
    src = x.array
    dst = out.array
    if x.layout is Layout.NHWC:
        scale, shift = f.scale, f.shift
    else:
        scale, shift = f.scale[:, None, None], f.shift[:, None, None]

    def body(lo, hi):
        np.multiply(src[lo:hi], scale, out=dst[lo:hi])
        np.add(dst[lo:hi], shift, out=dst[lo:hi])

    _parallel_batches(x.shape[0], threads, body)
    return out


# ---------------------------------------------------------------------------
# ReLU / residual add
# ---------------------------------------------------------------------------

def relu(x: Tensor, threads: int = 1, out: Tensor | None = None) -> Tensor:
    """y = max(x, 0) elementwise."""
    out = _like(x, out)
    src, dst = x.array, out.array

    def body(lo, hi):
        np.maximum(src[lo:hi], FP32(0.0), out=dst[lo:hi])

    _parallel_batches(x.shape[0], threads, body)
    return out


def residual_add(a: Tensor, b: Tensor, threads: int = 1,
                 out: Tensor | None = None) -> Tensor:
    """Elementwise a + b; shapes and layouts must match."""
    if a.shape != b.shape or a.layout is not b.layout:
        raise ValueError(f"residual operands disagree: {a} vs {b}")
    out = _like(a, out)
    sa, sb, dst = a.array, b.array, out.array

    def body(lo, hi):
        np.add(sa[lo:hi], sb[lo:hi], out=dst[lo:hi])

    _parallel_batches(a.shape[0], threads, body)
    return out


def _like(x: Tensor, out: Tensor | None) -> Tensor:
    if out is None:
        return make_tensor(x.shape, x.layout, "zeros")
    if out.shape != x.shape or out.layout is not x.layout:
        raise ValueError(f"output tensor mismatch: {out} for input {x}")
    return out


# ---------------------------------------------------------------------------
# Pooling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PoolDescriptor:
    """Windowed reduction geometry; output extents follow the convolution
    formula.  Padding may not exceed half the window so every output cell
    sees at least one valid input."""

    mode: str
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.mode not in ("max", "avg"):
            raise ValueError(f"unknown pooling mode {self.mode!r}")
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if kh < 1 or kw < 1 or sh < 1 or sw < 1:
            raise GeometryError(f"invalid pooling geometry {self}")
        if ph > kh // 2 or pw > kw // 2 or ph < 0 or pw < 0:
            raise GeometryError(
                f"pooling padding {self.padding} exceeds half the window "
                f"{self.kernel}")

    def output_spatial(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise GeometryError(f"pooling window {self.kernel} does not fit "
                                f"a {h}x{w} input")
        return ho, wo


def _valid_range(extent, out_extent, k_off, stride, pad):
    """Output positions whose window row k_off maps inside [0, extent)."""
    lo = max(0, -(-(pad - k_off) // stride))
    hi = min(out_extent - 1, (extent - 1 + pad - k_off) // stride)
    return lo, hi


def pool(x: Tensor, d: PoolDescriptor, threads: int = 1,
         out: Tensor | None = None) -> Tensor:
    """Max or average pooling over NHWC input.

    Padded positions never participate: max treats them as the identity
    (-inf, i.e. skipped), avg divides by the count of valid positions.
    Implemented as one strided slice per window offset, so no input cell
    outside the valid region is ever read.
    """
    if x.layout is not Layout.NHWC:
        raise GeometryError("pooling expects NHWC input")
    t, h, w, c = x.shape
    ho, wo = d.output_spatial(h, w)
    kh, kw = d.kernel
    sh, sw = d.stride
    ph, pw = d.padding
    if out is None:
        out = make_tensor((t, ho, wo, c), Layout.NHWC, "zeros")
    elif out.shape != (t, ho, wo, c) or out.layout is not Layout.NHWC:
        raise ValueError(f"output tensor mismatch: {out}")
    src = x.array
    dst = out.array
    offsets = []
    counts = np.zeros((ho, wo), dtype=FP32)
    for r in range(kh):
        oh_lo, oh_hi = _valid_range(h, ho, r, sh, ph)
        if oh_lo > oh_hi:
            continue
        for s in range(kw):
            ow_lo, ow_hi = _valid_range(w, wo, s, sw, pw)
            if ow_lo > ow_hi:
                continue
            offsets.append((r, s, oh_lo, oh_hi, ow_lo, ow_hi))
            counts[oh_lo:oh_hi + 1, ow_lo:ow_hi + 1] += 1.0

    def body(lo_b, hi_b):
        sub_src = src[lo_b:hi_b]
        sub_dst = dst[lo_b:hi_b]
        sub_dst[...] = -np.inf if d.mode == "max" else 0.0
        for r, s, oh_lo, oh_hi, ow_lo, ow_hi in offsets:
            ih0 = oh_lo * sh - ph + r
            iw0 = ow_lo * sw - pw + s
            n_oh = oh_hi - oh_lo + 1
            n_ow = ow_hi - ow_lo + 1
            window = sub_src[:, ih0:ih0 + n_oh * sh:sh,
                             iw0:iw0 + n_ow * sw:sw, :]
            region = sub_dst[:, oh_lo:oh_hi + 1, ow_lo:ow_hi + 1, :]
            if d.mode == "max":
                np.maximum(region, window, out=region)
            else:
                np.add(region, window, out=region)

    _parallel_batches(t, threads, body)
    if d.mode == "avg":
        np.divide(dst, counts[None, :, :, None], out=dst)
    return out


# ---------------------------------------------------------------------------
# Dense / softmax
# ---------------------------------------------------------------------------

def dense(x: Tensor, weights: np.ndarray, bias: np.ndarray,
          threads: int = 1, out: Tensor | None = None) -> Tensor:
    """Fully connected layer on the flattened per-image features.

    weights is (units, features) with features = h*w*c of the input; the
    product runs through the blocked GEMM (epilogue none) and the bias is
    added per output feature afterwards.
    """
    t, h, w, c = x.shape
    features = h * w * c
    weights = np.ascontiguousarray(weights, dtype=FP32)
    bias = np.asarray(bias, dtype=FP32)
    units = weights.shape[0]
    if weights.shape != (units, features):
        raise ValueError(f"weights {weights.shape} do not match "
                         f"{features} input features")
    if len(bias) != units:
        raise ValueError("bias length must equal units")
    if out is None:
        out = make_tensor((t, 1, 1, units), Layout.NHWC, "zeros")
    else:
        out.buffer[:] = 0.0
    # B = x^T (features x t) and C (units x t) as strided views; no copies.
    item = x.buffer.itemsize
    b_arr = np.lib.stride_tricks.as_strided(
        x.buffer, shape=(features, t), strides=(item, features * item))
    c_arr = np.lib.stride_tricks.as_strided(
        out.buffer, shape=(units, t), strides=(item, units * item))
    params, variant = select_cache_params(units, t, features)
    gemm_block_source(weights, MatrixBlockSource(b_arr), c_arr, params,
                      variant, EP_NONE, threads)
    np.add(out.array, bias[None, None, None, :], out=out.array)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-stable softmax over the last axis (classifier convenience)."""
    z = np.asarray(logits, dtype=FP32)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
