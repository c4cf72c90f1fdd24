"""Convolution lowering: full im2col + GEMM, and blockwise-im2col convGEMM.

A convolution with filters (cout, kh, kw, cin) over an NHWC input lowers to
C = A . B with

    A (m x k): filter matrix, m = cout, k = kh*kw*cin, row-contiguous per
               output channel (a plain reshape of the filter tensor);
    B (k x n): the im2col matrix, n = t*ho*wo, with the canonical index
               decomposition
                   p -> (r, s, ci):  p = (r*kw + s)*cin + ci
                   q -> (b, oh, ow): q = (b*ho + oh)*wo + ow
               and B[p, q] = x[b, oh*sh - ph + r, ow*sw - pw + s, ci],
               0 where the mapped coordinate lands in the padding;
    C (m x n): written straight into the NHWC output tensor through a
               strided view (row stride 1, column stride cout), so no
               reshape pass is needed and the fused batchnorm epilogue can
               index its coefficients by row alone.

Keeping ci fastest in p makes every (r, s) run of a B column a contiguous
channel slice of the input, which is what lets the blockwise variant
gather with wide vector copies instead of per-element loops.

conv_gemm never materializes B: the kc x nc block is gathered on the fly
inside the B-packing routine, so peak scratch memory is bounded by the
packing buffers regardless of n.  Column index tables for the active nc
slice are rebuilt once per jc iteration; everything else is preallocated
per call.
"""

from __future__ import annotations

import enum

import numpy as np

from .gemm import (DEFAULT_HIERARCHY, EP_NONE, CacheHierarchy, Epilogue,
                   GemmCacheParams, LoopVariant, MatrixBlockSource,
                   _note_alloc, _note_free, gemm_block_source)
from .tensor import (FP32, ConvDescriptor, GeometryError, Layout, Tensor,
                     conv_output_geometry, make_tensor)
from .tuning import select_cache_params

# Columns gathered per step inside pack; multiple of the widest nr in use.
_GATHER_CHUNK = 128


class ConvAlgorithm(enum.Enum):
    IM2COL_GEMM = "im2col"
    CONV_GEMM = "convgemm"


def choose_algorithm(d: ConvDescriptor, input_shape) -> ConvAlgorithm:
    """Pure per-layer rule: full im2col only where it tends to win.

    Small kernels with few output channels leave the full transform cheap
    enough that the single big GEMM pays off; everywhere else the
    blockwise variant avoids the k x n buffer at equal arithmetic.
    """
    conv_output_geometry(d, input_shape)
    kh, kw = d.kernel
    if kh * kw == 1 and d.cout <= 128:
        return ConvAlgorithm.IM2COL_GEMM
    return ConvAlgorithm.CONV_GEMM


# ---------------------------------------------------------------------------
# im2col index mapping
# ---------------------------------------------------------------------------

class Im2colMatrix:
    """Logical k x n im2col matrix; materialized buffer or index map only."""

    def __init__(self, d: ConvDescriptor, input_shape, data: np.ndarray | None):
        self.descriptor = d
        self.input_shape = tuple(input_shape)
        ho, wo, m, n, k = conv_output_geometry(d, input_shape)
        self.ho, self.wo = ho, wo
        self.k, self.n = k, n
        self.data = data

    def index_of(self, p: int, q: int):
        """(b, ih, iw, ci, valid) for element (p, q) of the logical matrix."""
        d = self.descriptor
        _, h, w, _ = self.input_shape
        kh, kw = d.kernel
        ci = p % d.cin
        rs = p // d.cin
        r, s = rs // kw, rs % kw
        ow = q % self.wo
        rest = q // self.wo
        oh, b = rest % self.ho, rest // self.ho
        ih = oh * d.stride[0] - d.padding[0] + r
        iw = ow * d.stride[1] - d.padding[1] + s
        return b, ih, iw, ci, (0 <= ih < h and 0 <= iw < w)


class _GatherScratch:
    """Per-worker chunk buffers for the blockwise gather (flat backing so
    partial (kb, cw) views stay contiguous)."""

    def __init__(self, kc_cap: int, chunk: int):
        cells = kc_cap * chunk
        self.ih = np.empty(cells, dtype=np.int32)
        self.iw = np.empty(cells, dtype=np.int32)
        self.flat = np.empty(cells, dtype=np.int32)
        self.valid = np.empty(cells, dtype=bool)
        self.tmp = np.empty(cells, dtype=bool)
        self.vals = np.empty(cells, dtype=FP32)
        self.nbytes = (self.ih.nbytes + self.iw.nbytes + self.flat.nbytes
                       + self.valid.nbytes + self.tmp.nbytes + self.vals.nbytes)
        _note_alloc("gather_scratch", self.nbytes)

    def views(self, kb: int, cw: int):
        cells = kb * cw
        shape = (kb, cw)
        return (self.ih[:cells].reshape(shape), self.iw[:cells].reshape(shape),
                self.flat[:cells].reshape(shape),
                self.valid[:cells].reshape(shape),
                self.tmp[:cells].reshape(shape),
                self.vals[:cells].reshape(shape))


class Im2colGather:
    """B-operand block source that performs im2col inside pack_b.

    Row tables (per-k offsets) are built once per call; column tables for
    the current nc slice once per jc iteration.  pack_range gathers the
    requested panels chunk by chunk through preallocated scratch, so the
    only allocations proportional to the problem are the packing buffers
    themselves.
    """

    def __init__(self, x: Tensor, d: ConvDescriptor, kc_cap: int):
        if x.layout is not Layout.NHWC:
            raise GeometryError("convolution inputs must be NHWC")
        t, h, w, c = x.shape
        ho, wo, m, n, k = conv_output_geometry(d, x.shape)
        if x.size >= 2**31:
            raise GeometryError("input too large for 32-bit gather indices")
        self.x_flat = x.buffer
        self.h, self.w, self.c = h, w, c
        self.ho, self.wo = ho, wo
        self.sh, self.sw = d.stride
        self.shape = (k, n)
        kh, kw = d.kernel
        p = np.arange(k, dtype=np.int32)
        ci = p % c
        rs = p // c
        # Row tables: padding already folded into the offsets.
        self.r_off = (rs // kw - d.padding[0]).astype(np.int32)
        self.s_off = (rs % kw - d.padding[1]).astype(np.int32)
        self.ci = ci
        self.row_bytes = self.r_off.nbytes + self.s_off.nbytes + ci.nbytes
        _note_alloc("gather_tables", self.row_bytes)
        self.col_bytes = 0
        self.kc_cap = kc_cap
        self.gathered_elements = 0
        self._scratches: list[_GatherScratch] = []
        self._released = False

    def make_tables(self, jc: int, nb: int):
        q = np.arange(jc, jc + nb, dtype=np.int64)
        ow = (q % self.wo).astype(np.int32)
        rest = q // self.wo
        oh = (rest % self.ho).astype(np.int32)
        b = (rest // self.ho).astype(np.int32)
        oh_s = oh * np.int32(self.sh)
        ow_s = ow * np.int32(self.sw)
        b_base = b * np.int32(self.h * self.w * self.c)
        _note_free(self.col_bytes)
        self.col_bytes = oh_s.nbytes + ow_s.nbytes + b_base.nbytes
        _note_alloc("gather_tables", self.col_bytes)
        return oh_s, ow_s, b_base

    def make_scratch(self):
        scratch = _GatherScratch(self.kc_cap, _GATHER_CHUNK)
        self._scratches.append(scratch)
        return scratch

    def _gather_chunk(self, tables, pc: int, kb: int, c0: int, cw: int,
                      scratch: _GatherScratch) -> np.ndarray:
        """Materialize block columns [c0, c0+cw) of rows [pc, pc+kb) into
        scratch and return the (kb, cw) value view (padding cells zero)."""
        oh_s, ow_s, b_base = tables
        ih, iw, flat, valid, tmp, vals = scratch.views(kb, cw)
        cols = slice(c0, c0 + cw)
        r_off = self.r_off[pc:pc + kb, None]
        s_off = self.s_off[pc:pc + kb, None]
        np.add(oh_s[None, cols], r_off, out=ih)
        np.add(ow_s[None, cols], s_off, out=iw)
        # Bounds-test both spatial coordinates, then squash invalid indices
        # to 0 so the gather stays in range; their values are zeroed after.
        np.greater_equal(ih, 0, out=valid)
        np.less(ih, self.h, out=tmp)
        np.logical_and(valid, tmp, out=valid)
        np.greater_equal(iw, 0, out=tmp)
        np.logical_and(valid, tmp, out=valid)
        np.less(iw, self.w, out=tmp)
        np.logical_and(valid, tmp, out=valid)
        np.multiply(ih, np.int32(self.w * self.c), out=flat)
        np.multiply(iw, np.int32(self.c), out=iw)
        np.add(flat, iw, out=flat)
        np.add(flat, self.ci[pc:pc + kb, None], out=flat)
        np.add(flat, b_base[None, cols], out=flat)
        np.multiply(flat, valid, out=flat)
        np.take(self.x_flat, flat, out=vals)
        np.multiply(vals, valid, out=vals)
        self.gathered_elements += kb * cw
        return vals

    def pack_range(self, buf, tables, pc: int, kb: int, p_lo: int, p_hi: int,
                   scratch: _GatherScratch):
        nr = buf.width
        dest = buf.panels
        c_lo = p_lo * nr
        c_hi = min(p_hi * nr, len(tables[0]))
        for c0 in range(c_lo, c_hi, _GATHER_CHUNK):
            cw = min(_GATHER_CHUNK, c_hi - c0)
            vals = self._gather_chunk(tables, pc, kb, c0, cw, scratch)
            # Scatter the chunk into panel-major storage.
            pan0 = c0 // nr
            full = cw // nr
            rem = cw - full * nr
            if full:
                sv = np.lib.stride_tricks.as_strided(
                    vals, shape=(full, kb, nr),
                    strides=(nr * vals.itemsize, cw * vals.itemsize,
                             vals.itemsize))
                dest[pan0:pan0 + full, :kb, :] = sv
            if rem:
                tail = dest[pan0 + full]
                tail[:kb, :rem] = vals[:, full * nr:]
                tail[:kb, rem:] = 0.0

    def materialize_into(self, out: np.ndarray):
        """Fill a full (k, n) matrix using the same gather machinery."""
        k, n = self.shape
        scratch = self.make_scratch()
        tables = self.make_tables(0, n)
        kc = self.kc_cap
        for pc in range(0, k, kc):
            kb = min(kc, k - pc)
            for c0 in range(0, n, _GATHER_CHUNK):
                cw = min(_GATHER_CHUNK, n - c0)
                vals = self._gather_chunk(tables, pc, kb, c0, cw, scratch)
                out[pc:pc + kb, c0:c0 + cw] = vals

    def release(self):
        if not self._released:
            scratch_bytes = sum(s.nbytes for s in self._scratches)
            _note_free(self.row_bytes + self.col_bytes + scratch_bytes)
            self._scratches.clear()
            self._released = True


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def im2col(x: Tensor, d: ConvDescriptor) -> Im2colMatrix:
    """Materialize the full k x n im2col matrix (padding cells exact zeros).

    This is the memory cost the blockwise variant avoids; an allocation
    failure reports the buffer size that was requested.
    """
    ho, wo, m, n, k = conv_output_geometry(d, x.shape)
    try:
        data = np.empty((k, n), dtype=FP32)
    except MemoryError as exc:
        raise MemoryError(
            f"im2col buffer of {k}x{n} floats ({4 * k * n} bytes) "
            f"could not be allocated") from exc
    _note_alloc("im2col_full", data.nbytes)
    gather = Im2colGather(x, d, kc_cap=min(k, 512))
    try:
        gather.materialize_into(data)
    finally:
        gather.release()
    return Im2colMatrix(d, x.shape, data)


def _filter_matrix(w, d: ConvDescriptor) -> np.ndarray:
    w_arr = w.array if isinstance(w, Tensor) else np.asarray(w, dtype=FP32)
    kh, kw = d.kernel
    if w_arr.shape != (d.cout, kh, kw, d.cin):
        raise GeometryError(
            f"filters shaped {w_arr.shape}, expected {(d.cout, kh, kw, d.cin)}")
    return w_arr.reshape(d.cout, kh * kw * d.cin)


def _output_view(out: Tensor, m: int, n: int) -> np.ndarray:
    """C as an (m, n) strided window over the NHWC output buffer."""
    return np.lib.stride_tricks.as_strided(
        out.buffer, shape=(m, n),
        strides=(out.buffer.itemsize, m * out.buffer.itemsize))


def _prepare(x, w, d, params, variant, hw, out):
    ho, wo, m, n, k = conv_output_geometry(d, x.shape)
    if x.layout is not Layout.NHWC:
        raise GeometryError("convolution inputs must be NHWC")
    t = x.shape[0]
    a = _filter_matrix(w, d)
    if params is None:
        sel_params, sel_variant = select_cache_params(m, n, k, hw)
        params = sel_params
        variant = sel_variant if variant is None else variant
    elif variant is None:
        variant = LoopVariant.A2B1
    if out is None:
        out = make_tensor((t, ho, wo, d.cout), Layout.NHWC, "zeros")
    else:
        if out.shape != (t, ho, wo, d.cout) or out.layout is not Layout.NHWC:
            raise GeometryError(f"output tensor mismatch: {out.shape}")
        out.buffer[:] = 0.0
    return a, _output_view(out, m, n), out, params, variant, (m, n, k)


def conv_im2col_gemm(x: Tensor, w, d: ConvDescriptor,
                     params: GemmCacheParams | None = None,
                     variant: LoopVariant | None = None,
                     ep: Epilogue = EP_NONE, threads: int = 1,
                     out: Tensor | None = None,
                     hw: CacheHierarchy = DEFAULT_HIERARCHY) -> Tensor:
    """Convolution as full im2col followed by one blocked GEMM.

    1x1 stride-1 unpadded convolutions skip the transform entirely: the
    logical matrix is a transpose view of the input, with no duplication.
    """
    a, c_arr, out, params, variant, (m, n, k) = _prepare(
        x, w, d, params, variant, hw, out)
    kh, kw = d.kernel
    if (kh, kw) == (1, 1) and d.stride == (1, 1) and d.padding == (0, 0):
        b_arr = np.lib.stride_tricks.as_strided(
            x.buffer, shape=(k, n),
            strides=(x.buffer.itemsize, k * x.buffer.itemsize))
        gemm_block_source(a, MatrixBlockSource(b_arr), c_arr, params, variant,
                          ep, threads, hw=hw)
        return out
    col = im2col(x, d)
    try:
        gemm_block_source(a, MatrixBlockSource(col.data), c_arr, params,
                          variant, ep, threads, hw=hw)
    finally:
        _note_free(col.data.nbytes)
    return out


def conv_gemm(x: Tensor, w, d: ConvDescriptor,
              params: GemmCacheParams | None = None,
              variant: LoopVariant | None = None,
              ep: Epilogue = EP_NONE, threads: int = 1,
              out: Tensor | None = None,
              hw: CacheHierarchy = DEFAULT_HIERARCHY) -> Tensor:
    """Convolution with blockwise im2col fused into B-packing.

    Numerically identical to conv_im2col_gemm (same blocking, same packed
    values); the k x n matrix is never allocated.
    """
    a, c_arr, out, params, variant, (m, n, k) = _prepare(
        x, w, d, params, variant, hw, out)
    gather = Im2colGather(x, d, kc_cap=min(params.kc, k))
    try:
        gemm_block_source(a, gather, c_arr, params, variant, ep, threads,
                          hw=hw)
    finally:
        gather.release()
    return out


def conv2d(x: Tensor, w, d: ConvDescriptor,
           algorithm: ConvAlgorithm | None = None, **kwargs) -> Tensor:
    """Run the convolution with an explicit or per-layer-chosen algorithm."""
    if algorithm is None:
        algorithm = choose_algorithm(d, x.shape)
    if algorithm is ConvAlgorithm.IM2COL_GEMM:
        return conv_im2col_gemm(x, w, d, **kwargs)
    return conv_gemm(x, w, d, **kwargs)
