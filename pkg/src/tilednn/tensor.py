"""Dense tensor and matrix containers with explicit layouts.

Activations are 4-D single-precision tensors identified by a logical
(batch, height, width, channels) shape plus a storage layout (NHWC or
NCHW).  The canonical layout throughout the engine is NHWC: channels are
the fastest-moving axis, which keeps per-pixel channel runs contiguous
and makes the lowered convolution operand gather stride-friendly.

MatrixView is the 2-D operand handle every GEMM entry point consumes: a
(rows, cols) window over a flat float32 buffer described by strides and
an offset, so outputs can be written in place without reshuffling.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

FP32 = np.float32

# Refuse silly allocations before numpy tries to honor them (2^34 elements
# is a 64 GiB float32 buffer).
_MAX_ELEMENTS = 1 << 34


class GeometryError(ValueError):
    """Convolution/pooling geometry does not admit a valid output."""


class Layout(enum.Enum):
    NHWC = "nhwc"
    NCHW = "nchw"

    @property
    def axes(self):
        """Storage axis order as a permutation of the logical (t,h,w,c)."""
        return (0, 1, 2, 3) if self is Layout.NHWC else (0, 3, 1, 2)


class Tensor:
    """4-D float32 tensor with an explicit storage layout.

    The logical shape is always reported as (t, h, w, c) regardless of
    layout; `array` is the C-contiguous 4-D view in storage axis order and
    `buffer` the flat view over the same memory.  Tensors are treated as
    immutable by all readers once constructed, so they are safe to share
    across threads.
    """

    __slots__ = ("shape", "layout", "array")

    def __init__(self, shape, layout: Layout, array: np.ndarray):
        t, h, w, c = (int(x) for x in shape)
        _check_extents((t, h, w, c))
        storage_shape = tuple((t, h, w, c)[a] for a in layout.axes)
        if array.dtype != FP32:
            raise TypeError(f"tensor buffer must be float32, got {array.dtype}")
        if array.shape != storage_shape:
            raise ValueError(
                f"buffer shape {array.shape} does not match layout "
                f"{layout.name} storage shape {storage_shape}"
            )
        if not array.flags.c_contiguous:
            array = np.ascontiguousarray(array)
        self.shape = (t, h, w, c)
        self.layout = layout
        self.array = array

    @property
    def buffer(self) -> np.ndarray:
        return self.array.reshape(-1)

    @property
    def size(self) -> int:
        t, h, w, c = self.shape
        return t * h * w * c

    def nhwc_view(self) -> np.ndarray:
        """Logical (t,h,w,c) view; strided (not a copy) for NCHW tensors."""
        if self.layout is Layout.NHWC:
            return self.array
        return self.array.transpose(0, 2, 3, 1)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, layout={self.layout.name})"


def _check_extents(shape):
    total = 1
    for extent in shape:
        if extent < 1:
            raise ValueError(f"tensor extents must be >= 1, got {shape}")
        total *= extent
    if total > _MAX_ELEMENTS:
        raise ValueError(f"tensor of {total} elements exceeds allocation cap")


def make_tensor(shape, layout: Layout = Layout.NHWC, fill: str = "zeros",
                value: float = 0.0, seed: int | None = None) -> Tensor:
    """Allocate a tensor and fill its buffer per policy.

    fill is one of "zeros", "constant" (uses `value`), "sequence"
    (0,1,2,... in storage order) or "random" (uniform [-1,1), deterministic
    in `seed`).
    """
    t, h, w, c = (int(x) for x in shape)
    _check_extents((t, h, w, c))
    storage_shape = tuple((t, h, w, c)[a] for a in layout.axes)
    n = t * h * w * c
    if fill == "zeros":
        buf = np.zeros(n, dtype=FP32)
    elif fill == "constant":
        buf = np.full(n, value, dtype=FP32)
    elif fill == "sequence":
        buf = np.arange(n, dtype=FP32)
    elif fill == "random":
        if seed is None:
            raise ValueError("random fill requires a seed")
        rng = np.random.default_rng(seed)
        buf = rng.uniform(-1.0, 1.0, size=n).astype(FP32)
    else:
        raise ValueError(f"unknown fill policy {fill!r}")
    return Tensor((t, h, w, c), layout, buf.reshape(storage_shape))


def tensor_from_array(arr: np.ndarray, layout: Layout = Layout.NHWC) -> Tensor:
    """Wrap a 4-D array (in storage axis order) as a Tensor."""
    arr = np.ascontiguousarray(arr, dtype=FP32)
    if arr.ndim != 4:
        raise ValueError(f"expected 4-D array, got {arr.ndim}-D")
    if layout is Layout.NHWC:
        shape = arr.shape
    else:
        t, c, h, w = arr.shape
        shape = (t, h, w, c)
    return Tensor(shape, layout, arr)


def convert_layout(t: Tensor, target: Layout) -> Tensor:
    """Return a logically identical tensor stored in `target` layout.

    A round trip (NHWC -> NCHW -> NHWC) reproduces the original buffer
    bitwise: the conversion only permutes elements.
    """
    if t.layout is target:
        return Tensor(t.shape, target, t.array.copy())
    if target is Layout.NCHW:
        moved = t.array.transpose(0, 3, 1, 2)
    else:
        moved = t.array.transpose(0, 2, 3, 1)
    return Tensor(t.shape, target, np.ascontiguousarray(moved))


# ---------------------------------------------------------------------------
# Convolution geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvDescriptor:
    """Convolution geometry plus the derived GEMM problem dimensions.

    Output extents and GEMM dims are always recomputed from the input
    shape, never cached, so a descriptor can be reused across input sizes.
    """

    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    cin: int = 1
    cout: int = 1

    def __post_init__(self):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        if kh < 1 or kw < 1 or sh < 1 or sw < 1 or ph < 0 or pw < 0:
            raise GeometryError(f"invalid convolution geometry {self}")
        if self.cin < 1 or self.cout < 1:
            raise GeometryError("channel counts must be >= 1")

    def output_spatial(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        ho = (h + 2 * ph - kh) // sh + 1
        wo = (w + 2 * pw - kw) // sw + 1
        if ho < 1 or wo < 1:
            raise GeometryError(
                f"kernel {self.kernel} stride {self.stride} pad {self.padding} "
                f"yields non-positive output for {h}x{w} input"
            )
        return ho, wo


def conv_output_geometry(d: ConvDescriptor, input_shape) -> tuple[int, int, int, int, int]:
    """Derived (ho, wo, m, n, k) of the lowered convolution.

    m = cout, k = cin*kh*kw, n = t*ho*wo.  Raises GeometryError when the
    geometry does not admit a positive output extent or the input channel
    count disagrees with the descriptor.
    """
    t, h, w, c = input_shape
    if c != d.cin:
        raise GeometryError(f"input has {c} channels, descriptor expects {d.cin}")
    ho, wo = d.output_spatial(h, w)
    kh, kw = d.kernel
    m = d.cout
    k = d.cin * kh * kw
    n = t * ho * wo
    return ho, wo, m, n, k


# ---------------------------------------------------------------------------
# MatrixView
# ---------------------------------------------------------------------------

class MatrixView:
    """(rows, cols) window over a flat float32 buffer.

    Strides and the base offset are in elements.  Construction validates
    that every (i, j) with i < rows, j < cols lands inside the owning
    buffer.  Views never alias the packing buffers used inside GEMM; those
    are module-private.
    """

    __slots__ = ("buffer", "rows", "cols", "row_stride", "col_stride", "offset")

    def __init__(self, buffer: np.ndarray, rows: int, cols: int,
                 row_stride: int, col_stride: int, offset: int = 0):
        if buffer.ndim != 1:
            raise ValueError("MatrixView requires a flat owning buffer")
        self.buffer = buffer
        self.rows = int(rows)
        self.cols = int(cols)
        self.row_stride = int(row_stride)
        self.col_stride = int(col_stride)
        self.offset = int(offset)
        if self.rows < 0 or self.cols < 0:
            raise ValueError("negative view dims")
        if self.rows and self.cols:
            corners = [
                self.offset,
                self.offset + (self.rows - 1) * self.row_stride,
                self.offset + (self.cols - 1) * self.col_stride,
                self.offset + (self.rows - 1) * self.row_stride
                + (self.cols - 1) * self.col_stride,
            ]
            if min(corners) < 0 or max(corners) >= buffer.size:
                raise ValueError("view maps outside the owning buffer")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "MatrixView":
        """Row-major view over a 2-D array (copied first if non-contiguous).

        Writes through the view reach the original array only when it was
        already C-contiguous; build views over `Tensor.buffer` directly when
        aliasing matters.
        """
        if arr.ndim != 2:
            raise ValueError("expected a 2-D array")
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        return cls(arr.reshape(-1), arr.shape[0], arr.shape[1], arr.shape[1], 1)

    def as_array(self) -> np.ndarray:
        """Writable strided 2-D ndarray over the viewed window."""
        itemsize = self.buffer.itemsize
        return np.lib.stride_tricks.as_strided(
            self.buffer[self.offset:],
            shape=(self.rows, self.cols),
            strides=(self.row_stride * itemsize, self.col_stride * itemsize),
        )

    def __repr__(self):
        return (f"MatrixView({self.rows}x{self.cols}, strides="
                f"({self.row_stride},{self.col_stride}), offset={self.offset})")


def as_matrix(x) -> np.ndarray:
    """Coerce a MatrixView or 2-D ndarray to a strided ndarray operand."""
    if isinstance(x, MatrixView):
        return x.as_array()
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return x
    raise TypeError(f"expected MatrixView or 2-D ndarray, got {type(x).__name__}")
