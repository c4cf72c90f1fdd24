"""Cache-blocked GEMM with packing, micro-kernel fusion and loop variants.

The kernel computes C += A.B as five loops around an mr x nr micro-kernel,
with the two inner operand blocks copied into panel-major buffers so the
micro-kernel streams both with unit stride:

    A2B1 (reference order; packed A targets L2, B panels stream through L1)
      L1: for jc in 0..n  step nc
      L2:   for pc in 0..k  step kc     -> pack B(pc, jc) into Bc
      L3:     for ic in 0..m  step mc   -> pack A(ic, pc) into Ac
      L4:       for jr in 0..nb step nr       # macro-kernel
      L5:         for ir in 0..mb step mr
                    C(ic+ir, jc+jr) += Ac[ir] . Bc[jr]   # micro-kernel

    B2A1 interchanges L1 with L3 and L4 with L5, so the packed B block is
    the one held resident in L2 while A panels stream through L1.  Useful
    when m is small and n is huge and Ac alone cannot fill the cache.

Numerics: packing promotes operands to float64 and the micro-tile
accumulates in double, rounding to float32 exactly once per k-block store.
This makes results bitwise independent of loop variant, blocking
parameters and thread count, and keeps the vectorized and scalar
micro-kernels within 1 ulp of each other.  All tensor-level data stays
float32.

An optional epilogue (ReLU and/or folded batch normalization) is applied
inside the micro-kernel on the final k-block, after the float32 rounding
and before the store, so fused and unfused pipelines agree bitwise.  The
2-D -> 4-D output coordinate mapping is fixed by convention: row = output
channel, column = flattened (image, oh, ow), so batchnorm coefficients are
indexed by row only.
"""

from __future__ import annotations

import enum
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensor import FP32, as_matrix

PACK_DTYPE = np.float64


class GemmDimensionError(ValueError):
    """Operand dimensions do not conform."""


class GemmConfigError(ValueError):
    """Blocking parameters violate the packed-buffer budget."""


# ---------------------------------------------------------------------------
# Cache hierarchy and blocking parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CacheHierarchy:
    """Per-level cache budget used to validate and select blockings.

    l3_bytes is 0 on hierarchies without a last-level cache (the reference
    target has none).  Sizes must be strictly increasing across the levels
    that are present.
    """

    l1_bytes: int = 64 * 1024
    l2_bytes: int = 2 * 1024 * 1024
    l3_bytes: int = 0
    line_bytes: int = 64
    associativity: tuple[int, ...] = (4, 16)

    def __post_init__(self):
        sizes = [s for s in (self.l1_bytes, self.l2_bytes, self.l3_bytes) if s]
        if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
            raise GemmConfigError(f"cache sizes must be strictly increasing: {self}")
        if self.l1_bytes <= 0 or self.l2_bytes <= 0:
            raise GemmConfigError("L1 and L2 budgets are required")


#: Blocking reference target: 64 KiB L1, 2 MiB L2, no L3.
DEFAULT_HIERARCHY = CacheHierarchy()


@dataclass(frozen=True)
class GemmCacheParams:
    """The blocking quintuple (mc, nc, kc, mr, nr).

    mc and nc must be multiples of the register blocking; ragged problem
    edges are handled by zero-padding inside packing, not by the strides.
    """

    mc: int = 560
    nc: int = 3072
    kc: int = 368
    mr: int = 8
    nr: int = 8

    def __post_init__(self):
        for name in ("mc", "nc", "kc", "mr", "nr"):
            if getattr(self, name) < 1:
                raise GemmConfigError(f"{name} must be positive, got {self}")
        if self.mc % self.mr:
            raise GemmConfigError(f"mc={self.mc} not a multiple of mr={self.mr}")
        if self.nc % self.nr:
            raise GemmConfigError(f"nc={self.nc} not a multiple of nr={self.nr}")

    def validate(self, hw: CacheHierarchy = DEFAULT_HIERARCHY):
        """Check the streamed micro-panel footprints against the L1 budget."""
        itemsize = np.dtype(PACK_DTYPE).itemsize
        a_panel = self.kc * self.mr * itemsize
        b_panel = self.kc * self.nr * itemsize
        if max(a_panel, b_panel) > hw.l1_bytes:
            raise GemmConfigError(
                f"micro-panel of {max(a_panel, b_panel)} bytes exceeds the "
                f"{hw.l1_bytes}-byte L1 budget; lower kc or the register blocking"
            )


DEFAULT_PARAMS = GemmCacheParams()


class LoopVariant(enum.Enum):
    A2B1 = "a2b1"
    B2A1 = "b2a1"


# ---------------------------------------------------------------------------
# Epilogue
# ---------------------------------------------------------------------------

class EpilogueKind(enum.Enum):
    NONE = "none"
    RELU = "relu"
    BATCHNORM = "batchnorm"
    BATCHNORM_RELU = "batchnorm_relu"


@dataclass(frozen=True)
class Epilogue:
    """Post-operation fused into the micro-kernel on the final k-block.

    scale/shift are per-output-channel float32 arrays; the GEMM output row
    index is the channel index, which is the whole 2-D -> 4-D coordinate
    mapping the batchnorm variants need.
    """

    kind: EpilogueKind = EpilogueKind.NONE
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None

    @staticmethod
    def none() -> "Epilogue":
        return Epilogue(EpilogueKind.NONE)

    @staticmethod
    def relu() -> "Epilogue":
        return Epilogue(EpilogueKind.RELU)

    @staticmethod
    def batchnorm(scale, shift, relu=False) -> "Epilogue":
        kind = EpilogueKind.BATCHNORM_RELU if relu else EpilogueKind.BATCHNORM
        return Epilogue(kind, np.asarray(scale, dtype=FP32),
                        np.asarray(shift, dtype=FP32))

    @property
    def has_batchnorm(self) -> bool:
        return self.kind in (EpilogueKind.BATCHNORM, EpilogueKind.BATCHNORM_RELU)

    @property
    def has_relu(self) -> bool:
        return self.kind in (EpilogueKind.RELU, EpilogueKind.BATCHNORM_RELU)

    def validate(self, m: int):
        if self.has_batchnorm:
            if self.scale is None or self.shift is None:
                raise GemmConfigError("batchnorm epilogue requires scale and shift")
            if len(self.scale) != m or len(self.shift) != m:
                raise GemmConfigError(
                    f"epilogue coefficients cover {len(self.scale)} rows, "
                    f"output has {m}"
                )


EP_NONE = Epilogue.none()


# ---------------------------------------------------------------------------
# Allocation / epilogue instrumentation
# ---------------------------------------------------------------------------

class AllocationStats:
    """Counters for engine-internal buffers while a tracking context is open.

    Tracks the packing buffers and the gather tables/staging of the
    blockwise-im2col source.  O(1) micro-tile temporaries (mr*nr elements)
    are below the accounting granularity and excluded.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.events: list[tuple[str, int]] = []
        self.live_bytes = 0
        self.peak_bytes = 0
        self.epilogue_elements = 0

    def note_alloc(self, tag: str, nbytes: int):
        with self._lock:
            self.events.append((tag, nbytes))
            self.live_bytes += nbytes
            self.peak_bytes = max(self.peak_bytes, self.live_bytes)

    def note_free(self, nbytes: int):
        with self._lock:
            self.live_bytes -= nbytes

    def note_epilogue(self, count: int):
        with self._lock:
            self.epilogue_elements += count

    def count(self, tag: str) -> int:
        return sum(1 for t, _ in self.events if t == tag)

    def bytes_for(self, tag: str) -> int:
        return sum(b for t, b in self.events if t == tag)


_active_stats: AllocationStats | None = None
_stats_guard = threading.Lock()


@contextmanager
def track_allocations():
    """Collect buffer allocation and epilogue counters for enclosed calls.

    Single-flight: intended for one measured call at a time, not for
    concurrent engine instances.
    """
    global _active_stats
    stats = AllocationStats()
    with _stats_guard:
        _active_stats = stats
    try:
        yield stats
    finally:
        with _stats_guard:
            _active_stats = None


def _note_alloc(tag: str, nbytes: int):
    stats = _active_stats
    if stats is not None:
        stats.note_alloc(tag, nbytes)


def _note_free(nbytes: int):
    stats = _active_stats
    if stats is not None:
        stats.note_free(nbytes)


def _note_epilogue(count: int):
    stats = _active_stats
    if stats is not None:
        stats.note_epilogue(count)


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------

def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


class PackedBuffer:
    """Panel-major packed operand block.

    Storage is (num_panels, kc, width) where width is the register blocking
    of the packed side.  Element (i, p) of an A block lives at panel i//mr,
    row p, lane i%mr; a B block's (p, j) at panel j//nr, row p, lane j%nr.
    Panels zero-pad the ragged edge so the micro-kernel never branches.
    The buffer is module-private: it is allocated once per GEMM call and
    refilled across block iterations, never exposed through views.
    """

    __slots__ = ("panels", "width", "tag", "rows", "cols", "n_panels", "nbytes")

    def __init__(self, width: int, kc_cap: int, n_panels_cap: int, tag: str):
        self.width = width
        self.tag = tag
        self.panels = np.empty((n_panels_cap, kc_cap, width), dtype=PACK_DTYPE)
        self.nbytes = self.panels.nbytes
        self.rows = 0
        self.cols = 0
        self.n_panels = 0
        _note_alloc(tag, self.nbytes)

    def release(self):
        _note_free(self.nbytes)

    def panel(self, idx: int, kb: int | None = None) -> np.ndarray:
        """(kb, width) view of one micro-panel."""
        kb = self.panels.shape[1] if kb is None else kb
        return self.panels[idx, :kb, :]


def _pack_a_range(buf: PackedBuffer, src: np.ndarray, p_lo: int, p_hi: int):
    """Fill panels [p_lo, p_hi) of an A block (mb x kb), column-major panels.

    buf.panels[i, p, lane] = src[i*mr + lane, p]; the trailing ragged panel
    is zero-padded to mr lanes.
    """
    mb, kb = src.shape
    mr = buf.width
    full = mb // mr
    rem = mb - full * mr
    lo, hi_full = p_lo, min(p_hi, full)
    if hi_full > lo:
        rs0, rs1 = src.strides
        sv = np.lib.stride_tricks.as_strided(
            src[lo * mr:], shape=(hi_full - lo, kb, mr),
            strides=(mr * rs0, rs1, rs0))
        buf.panels[lo:hi_full, :kb, :] = sv
    if rem and p_hi > full >= p_lo:
        tail = buf.panels[full]
        tail[:kb, :rem] = src[full * mr:, :].T
        tail[:kb, rem:] = 0.0


def _pack_b_range(buf: PackedBuffer, src: np.ndarray, p_lo: int, p_hi: int):
    """Fill panels [p_lo, p_hi) of a B block (kb x nb), row-major panels.

    buf.panels[j, p, lane] = src[p, j*nr + lane]; ragged edge zero-padded.
    Consuming a panel row-by-row touches memory in strictly increasing
    order, which is the whole point of packing.
    """
    kb, nb = src.shape
    nr = buf.width
    full = nb // nr
    rem = nb - full * nr
    lo, hi_full = p_lo, min(p_hi, full)
    if hi_full > lo:
        rs0, rs1 = src.strides
        sv = np.lib.stride_tricks.as_strided(
            src[:, lo * nr:], shape=(hi_full - lo, kb, nr),
            strides=(nr * rs1, rs0, rs1))
        buf.panels[lo:hi_full, :kb, :] = sv
    if rem and p_hi > full >= p_lo:
        tail = buf.panels[full]
        tail[:kb, :rem] = src[:, full * nr:]
        tail[:kb, rem:] = 0.0


def pack_a(src, mr: int = 8) -> PackedBuffer:
    """Pack an A block (rows x kc) into mr-row micro-panels."""
    arr = as_matrix(src)
    mb, kb = arr.shape
    buf = PackedBuffer(mr, kb, _ceil_div(mb, mr), "pack_a")
    _pack_a_range(buf, arr, 0, _ceil_div(mb, mr))
    buf.rows, buf.cols, buf.n_panels = mb, kb, _ceil_div(mb, mr)
    return buf


def pack_b(src, nr: int = 8) -> PackedBuffer:
    """Pack a B block (kc x cols) into nr-column micro-panels."""
    arr = as_matrix(src)
    kb, nb = arr.shape
    buf = PackedBuffer(nr, kb, _ceil_div(nb, nr), "pack_b")
    _pack_b_range(buf, arr, 0, _ceil_div(nb, nr))
    buf.rows, buf.cols, buf.n_panels = kb, nb, _ceil_div(nb, nr)
    return buf


def unpack_a(buf: PackedBuffer) -> np.ndarray:
    """Test-only inverse of pack_a (drops edge padding)."""
    out = np.empty((buf.rows, buf.cols), dtype=FP32)
    mr = buf.width
    for i in range(buf.rows):
        out[i, :] = buf.panels[i // mr, :buf.cols, i % mr]
    return out


def unpack_b(buf: PackedBuffer) -> np.ndarray:
    """Test-only inverse of pack_b (drops edge padding)."""
    out = np.empty((buf.rows, buf.cols), dtype=FP32)
    nr = buf.width
    for j in range(buf.cols):
        out[:, j] = buf.panels[j // nr, :buf.rows, j % nr]
    return out


# ---------------------------------------------------------------------------
# Micro-kernel
# ---------------------------------------------------------------------------

class _MicroScratch:
    """Per-worker tile buffers and precomputed epilogue coefficient views.

    row0 is always a multiple of mr, so the per-channel scale/shift column
    views can be resolved by panel index with no per-tile slicing.
    """

    __slots__ = ("tile", "tile32", "scales", "shifts")

    def __init__(self, mr: int, nr: int, ep: Epilogue, m: int):
        self.tile = np.empty((mr, nr), dtype=PACK_DTYPE)
        self.tile32 = np.empty((mr, nr), dtype=FP32)
        if ep.has_batchnorm:
            npan = _ceil_div(m, mr)
            self.scales = [ep.scale[i * mr:(i + 1) * mr, None]
                           for i in range(npan)]
            self.shifts = [ep.shift[i * mr:(i + 1) * mr, None]
                           for i in range(npan)]
        else:
            self.scales = self.shifts = None


def _micro(a_panel: np.ndarray, b_panel: np.ndarray, cblk: np.ndarray, kb: int,
           accumulate: bool, ep: Epilogue, apply_ep: bool, row0: int,
           scr: _MicroScratch | None = None, coeffs=None):
    """Vectorized micro-kernel: cblk (+)= a_panel^T . b_panel, then epilogue.

    Panels are (kc, mr) / (kc, nr) float64; the rank-kb update is one
    contraction over the shared k axis, accumulated in double and rounded
    to float32 once at the store.  The epilogue sees the rounded float32
    tile and performs the same float32 operations, in the same order, as
    the standalone batchnorm/ReLU layers.
    """
    ru, cu = cblk.shape
    if scr is None:
        tile = np.dot(a_panel[:kb].T, b_panel[:kb])
    else:
        tile = scr.tile
        np.dot(a_panel[:kb].T, b_panel[:kb], out=tile)
    used = tile[:ru, :cu]
    # The double accumulator is rounded to float32 exactly once, inside the
    # add that also loads the previous C values.
    if apply_ep and ep.kind is not EpilogueKind.NONE:
        out32 = scr.tile32[:ru, :cu] if scr is not None else np.empty(
            (ru, cu), dtype=FP32)
        if accumulate:
            np.add(used, cblk, out=out32)
        else:
            np.copyto(out32, used)
        if coeffs is not None:
            scale_col, shift_col = coeffs
            np.multiply(out32, scale_col[:ru], out=out32)
            np.add(out32, shift_col[:ru], out=out32)
        if ep.has_relu:
            np.maximum(out32, FP32(0.0), out=out32)
        _note_epilogue(ru * cu)
        cblk[...] = out32
    elif accumulate:
        np.add(used, cblk, out=cblk)
    else:
        cblk[...] = used


def _micro_scalar(a_panel: np.ndarray, b_panel: np.ndarray, cblk: np.ndarray,
                  kb: int, accumulate: bool, ep: Epilogue, apply_ep: bool,
                  row0: int, scr: _MicroScratch | None = None, coeffs=None):
    """Portable scalar micro-kernel: kb rank-1 updates with one-ahead loads.

    The next A column / B row is pulled into locals one iteration before it
    is consumed (the software analog of the prefetch scheme the vector
    kernel relies on).  Accumulation is double precision, identical in
    rounding to the vectorized path within 1 ulp.
    """
    ru, cu = cblk.shape
    mr = a_panel.shape[1]
    nr = b_panel.shape[1]
    acols = a_panel[:kb].tolist()
    brows = b_panel[:kb].tolist()
    acc = [[0.0] * nr for _ in range(mr)]
    a_next = acols[0]
    b_next = brows[0]
    for p in range(kb):
        a_cur = a_next
        b_cur = b_next
        if p + 1 < kb:
            a_next = acols[p + 1]
            b_next = brows[p + 1]
        for i in range(mr):
            ai = a_cur[i]
            row = acc[i]
            for j in range(nr):
                row[j] += ai * b_cur[j]
    zero = FP32(0.0)
    scale = ep.scale if ep.has_batchnorm else None
    for i in range(ru):
        row = acc[i]
        for j in range(cu):
            v = row[j] + float(cblk[i, j]) if accumulate else row[j]
            v32 = FP32(v)
            if apply_ep:
                if scale is not None:
                    v32 = FP32(v32 * scale[row0 + i]) + ep.shift[row0 + i]
                if ep.has_relu and v32 < zero:
                    v32 = zero
            cblk[i, j] = v32
    if apply_ep and ep.kind is not EpilogueKind.NONE:
        _note_epilogue(ru * cu)


def microkernel(ar: np.ndarray, br: np.ndarray, cr, kc: int,
                accumulate: bool = True, ep: Epilogue = EP_NONE,
                apply_epilogue: bool = False, row_offset: int = 0,
                scalar: bool = False):
    """One register-tile update: cr (+)= ar . br over kc rank-1 terms.

    ar/br are packed panels shaped (>=kc, mr) and (>=kc, nr); cr is a
    MatrixView or 2-D array of at most (mr, nr).  With apply_epilogue the
    post-operation hits the tile after the float32 rounding, before the
    store; batchnorm coefficients are looked up at row_offset + tile row.
    """
    cblk = as_matrix(cr)
    ru, cu = cblk.shape
    if ru > ar.shape[1] or cu > br.shape[1]:
        raise GemmDimensionError(
            f"output tile {ru}x{cu} exceeds panel widths "
            f"{ar.shape[1]}x{br.shape[1]}")
    if kc > ar.shape[0] or kc > br.shape[0]:
        raise GemmDimensionError(f"kc={kc} exceeds panel depth")
    coeffs = None
    if apply_epilogue and ep.has_batchnorm:
        if ep.scale is None or len(ep.scale) < row_offset + ru:
            raise GemmConfigError("epilogue coefficients do not cover the tile")
        coeffs = (ep.scale[row_offset:row_offset + ru, None],
                  ep.shift[row_offset:row_offset + ru, None])
    a64 = np.ascontiguousarray(ar[:kc], dtype=PACK_DTYPE)
    b64 = np.ascontiguousarray(br[:kc], dtype=PACK_DTYPE)
    kernel = _micro_scalar if scalar else _micro
    kernel(a64, b64, cblk, kc, accumulate, ep, apply_epilogue, row_offset,
           coeffs=coeffs)


# ---------------------------------------------------------------------------
# Block sources: plain matrix, or anything that can pack its own B block
# ---------------------------------------------------------------------------

class MatrixBlockSource:
    """B operand backed by a materialized (k, n) matrix."""

    def __init__(self, arr: np.ndarray):
        self.arr = arr
        self.shape = arr.shape

    def make_tables(self, jc: int, nb: int):
        return (jc, nb)

    def make_scratch(self):
        return None

    def pack_range(self, buf: PackedBuffer, tables, pc: int, kb: int,
                   p_lo: int, p_hi: int, scratch=None):
        jc, nb = tables
        sub = self.arr[pc:pc + kb, jc:jc + nb]
        _pack_b_range(buf, sub, p_lo, p_hi)


# ---------------------------------------------------------------------------
# GEMM driver
# ---------------------------------------------------------------------------

def _thread_share(total: int, tid: int, nthreads: int) -> tuple[int, int]:
    """Contiguous [lo, hi) share of `total` items for worker `tid`."""
    return (total * tid) // nthreads, (total * (tid + 1)) // nthreads


class _NullBarrier:
    """Barrier stand-in for the single-threaded nest."""

    def wait(self):
        pass

    def abort(self):
        pass


def _macro_kernel(abuf, bbuf, c_arr, ic, jc, mb, nb, kb, mr, nr,
                  variant, ep, apply_ep, scalar, pan_lo, pan_hi, scr):
    """Loops L4/L5 over one packed block pair.

    Only A panels [pan_lo, pan_hi) are visited; the caller partitions that
    range across workers, so every C row is written by exactly one worker.
    A2B1 keeps jr outermost (the B panel is the one reused from L1); B2A1
    swaps the two loops.
    """
    micro = _micro_scalar if scalar else _micro
    panels_a = abuf.panels
    panels_b = bbuf.panels
    want_coeffs = apply_ep and scr.scales is not None
    if variant is LoopVariant.A2B1:
        for jr in range(0, nb, nr):
            cu = min(nr, nb - jr)
            bp = panels_b[jr // nr, :kb, :]
            col = slice(jc + jr, jc + jr + cu)
            for pan in range(pan_lo, pan_hi):
                ir = pan * mr
                ru = min(mr, mb - ir)
                row0 = ic + ir
                cblk = c_arr[row0:row0 + ru, col]
                micro(panels_a[pan, :kb, :], bp, cblk, kb, True,
                      ep, apply_ep, row0, scr,
                      (scr.scales[row0 // mr], scr.shifts[row0 // mr])
                      if want_coeffs else None)
    else:
        for pan in range(pan_lo, pan_hi):
            ir = pan * mr
            ru = min(mr, mb - ir)
            ap = panels_a[pan, :kb, :]
            row0 = ic + ir
            row = slice(row0, row0 + ru)
            coeffs = ((scr.scales[row0 // mr], scr.shifts[row0 // mr])
                      if want_coeffs else None)
            for jr in range(0, nb, nr):
                cu = min(nr, nb - jr)
                cblk = c_arr[row, jc + jr:jc + jr + cu]
                micro(ap, panels_b[jr // nr, :kb, :], cblk, kb, True,
                      ep, apply_ep, row0, scr, coeffs)


def _nest_worker(tid, team_size, barrier, tables_cell, abuf, bbuf,
                 a_arr, bsrc, c_arr, m, n, k, prm, ep, scalar, variant):
    """One worker's walk of the full loop nest.

    All workers follow the same (jc, pc, ic) schedule in lockstep.  The
    packed blocks are shared and built cooperatively: each worker fills a
    contiguous share of micro-panels.  B panels are consumed by everyone,
    so a barrier separates their packing from the macro-kernel; A panels
    are consumed only by the worker that packed them (the macro-kernel is
    partitioned over the same panel shares), which also pins each C row
    slice to a single writer.
    """
    mr, nr = prm.mr, prm.nr
    kc = min(prm.kc, k)
    mc = min(prm.mc, _ceil_div(m, mr) * mr)
    nc = min(prm.nc, _ceil_div(n, nr) * nr)
    scratch = bsrc.make_scratch()
    scr = _MicroScratch(mr, nr, ep, m)
    if variant is LoopVariant.A2B1:
        for jc in range(0, n, nc):
            nb = min(nc, n - jc)
            if tid == 0:
                tables_cell[0] = bsrc.make_tables(jc, nb)
            barrier.wait()
            tables = tables_cell[0]
            npan_b = _ceil_div(nb, nr)
            for pc in range(0, k, kc):
                kb = min(kc, k - pc)
                last = pc + kb == k
                blo, bhi = _thread_share(npan_b, tid, team_size)
                if bhi > blo:
                    bsrc.pack_range(bbuf, tables, pc, kb, blo, bhi, scratch)
                barrier.wait()
                for ic in range(0, m, mc):
                    mb = min(mc, m - ic)
                    alo, ahi = _thread_share(_ceil_div(mb, mr), tid, team_size)
                    if ahi > alo:
                        _pack_a_range(abuf, a_arr[ic:ic + mb, pc:pc + kb],
                                      alo, ahi)
                        _macro_kernel(abuf, bbuf, c_arr, ic, jc, mb, nb, kb,
                                      mr, nr, variant, ep, last, scalar,
                                      alo, ahi, scr)
                    # Panel shares move with the block's panel count, so
                    # neither abuf nor Bc may be repacked while any worker
                    # still reads them.
                    barrier.wait()
    else:
        for ic in range(0, m, mc):
            mb = min(mc, m - ic)
            for pc in range(0, k, kc):
                kb = min(kc, k - pc)
                last = pc + kb == k
                alo, ahi = _thread_share(_ceil_div(mb, mr), tid, team_size)
                if ahi > alo:
                    _pack_a_range(abuf, a_arr[ic:ic + mb, pc:pc + kb],
                                  alo, ahi)
                for jc in range(0, n, nc):
                    nb = min(nc, n - jc)
                    if tid == 0:
                        tables_cell[0] = bsrc.make_tables(jc, nb)
                    barrier.wait()
                    tables = tables_cell[0]
                    blo, bhi = _thread_share(_ceil_div(nb, nr), tid, team_size)
                    if bhi > blo:
                        bsrc.pack_range(bbuf, tables, pc, kb, blo, bhi,
                                        scratch)
                    barrier.wait()
                    if ahi > alo:
                        _macro_kernel(abuf, bbuf, c_arr, ic, jc, mb, nb, kb,
                                      mr, nr, variant, ep, last, scalar,
                                      alo, ahi, scr)
                    barrier.wait()


def gemm_block_source(a_arr: np.ndarray, bsrc, c_arr: np.ndarray,
                      params: GemmCacheParams, variant: LoopVariant,
                      ep: Epilogue, threads: int, scalar: bool = False,
                      hw: CacheHierarchy = DEFAULT_HIERARCHY):
    """C += A . B where B is anything implementing the block-source protocol.

    The packing buffers are allocated once per call (shared by the whole
    team) and refilled across block iterations.
    """
    m, ka = a_arr.shape
    kb_, n = bsrc.shape
    if ka != kb_:
        raise GemmDimensionError(f"A is {m}x{ka}, B is {kb_}x{n}")
    if c_arr.shape != (m, n):
        raise GemmDimensionError(f"C is {c_arr.shape}, expected {(m, n)}")
    if threads < 1:
        raise GemmConfigError("threads must be >= 1")
    params.validate(hw)
    ep.validate(m)
    k = ka
    mr, nr = params.mr, params.nr
    kc = min(params.kc, k)
    mc = min(params.mc, _ceil_div(m, mr) * mr)
    nc = min(params.nc, _ceil_div(n, nr) * nr)
    # More workers than A micro-panels would only idle at barriers.
    team_size = max(1, min(threads, _ceil_div(m, mr)))
    abuf = PackedBuffer(mr, kc, _ceil_div(mc, mr), "pack_a")
    bbuf = PackedBuffer(nr, kc, _ceil_div(nc, nr), "pack_b")
    tables_cell = [None]
    try:
        if team_size == 1:
            _nest_worker(0, 1, _NullBarrier(), tables_cell, abuf, bbuf,
                         a_arr, bsrc, c_arr, m, n, k, params, ep, scalar,
                         variant)
        else:
            barrier = threading.Barrier(team_size)
            errors: list[BaseException] = []

            def run(tid):
                try:
                    _nest_worker(tid, team_size, barrier, tables_cell,
                                 abuf, bbuf, a_arr, bsrc, c_arr, m, n, k,
                                 params, ep, scalar, variant)
                except BaseException as exc:
                    errors.append(exc)
                    barrier.abort()

            workers = [threading.Thread(target=run, args=(tid,), daemon=True)
                       for tid in range(team_size)]
            for t in workers:
                t.start()
            for t in workers:
                t.join()
            if errors:
                real = [e for e in errors
                        if not isinstance(e, threading.BrokenBarrierError)]
                raise (real or errors)[0]
    finally:
        abuf.release()
        bbuf.release()


def gemm(a, b, c, params: GemmCacheParams | None = None,
         variant: LoopVariant = LoopVariant.A2B1, ep: Epilogue = EP_NONE,
         threads: int = 1, scalar: bool = False,
         hw: CacheHierarchy = DEFAULT_HIERARCHY):
    """C += A . B with blocked packing, optional fused epilogue and threads.

    Accumulate semantics only (no alpha/beta); zero C beforehand for a
    plain product.  The epilogue is applied exactly once per output
    element, on the final k-block.  Results are bitwise independent of
    params, variant and thread count.
    """
    a_arr = as_matrix(a)
    b_arr = as_matrix(b)
    c_arr = as_matrix(c)
    gemm_block_source(a_arr, MatrixBlockSource(b_arr), c_arr,
                      params or DEFAULT_PARAMS, variant, ep, threads,
                      scalar, hw)
