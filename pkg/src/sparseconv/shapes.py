"""Convolution layer geometry and dense NCHW tensor helpers.

All tensors in this package are plain numpy arrays in NCHW layout with dtype
float32, float64 or float16 (binary16 storage, binary32 accumulation).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64, np.float16)


@dataclass(frozen=True)
class ConvShape:
    """Geometry of one convolution layer.

    ``n`` is the batch size; the spatial output extents ``e`` / ``f`` follow
    from (h, w, r, s, stride, padding) and must come out as positive integers.
    """

    n: int
    c: int
    h: int
    w: int
    k: int
    r: int
    s: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("n", "c", "h", "w", "k", "r", "s", "stride"):
            if getattr(self, name) < 1:
                raise ShapeError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.padding < 0:
            raise ShapeError(f"padding must be >= 0, got {self.padding}")
        if self.r > self.h + 2 * self.padding or self.s > self.w + 2 * self.padding:
            raise ShapeError(
                f"kernel {self.r}x{self.s} larger than padded input "
                f"{self.h + 2 * self.padding}x{self.w + 2 * self.padding}"
            )
        for dim, ker in ((self.h, self.r), (self.w, self.s)):
            span = dim + 2 * self.padding - ker
            if span % self.stride != 0:
                raise ShapeError(
                    f"(extent + 2*padding - kernel) = {span} not divisible by stride {self.stride}"
                )

    @property
    def e(self) -> int:
        return (self.h + 2 * self.padding - self.r) // self.stride + 1

    @property
    def f(self) -> int:
        return (self.w + 2 * self.padding - self.s) // self.stride + 1

    @property
    def hp(self) -> int:
        """Padded input height."""
        return self.h + 2 * self.padding

    @property
    def wp(self) -> int:
        """Padded input width."""
        return self.w + 2 * self.padding

    @property
    def kernel_volume(self) -> int:
        return self.c * self.r * self.s

    def with_batch(self, n: int) -> "ConvShape":
        return ConvShape(n, self.c, self.h, self.w, self.k, self.r, self.s,
                         self.stride, self.padding)


def output_shape(shape: ConvShape) -> tuple[int, int]:
    """Output spatial extents (e, f) for a valid ConvShape."""
    return shape.e, shape.f


def check_nchw(x: np.ndarray, name: str = "input") -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4D NCHW, got ndim={x.ndim}")
    if x.dtype.type not in SUPPORTED_DTYPES:
        raise ShapeError(f"{name} dtype {x.dtype} not in f32/f64/f16")
    return np.ascontiguousarray(x)


def compute_dtype(dtype: np.dtype) -> np.dtype:
    """Accumulation dtype for a storage dtype: f16 accumulates in f32."""
    return np.dtype(np.float32) if dtype == np.float16 else np.dtype(dtype)


def pad_input(x: np.ndarray, padding: int) -> np.ndarray:
    """Zero-pad the two spatial dims of an NCHW tensor by `padding` each side."""
    x = check_nchw(x)
    if padding < 0:
        raise ShapeError(f"padding must be >= 0, got {padding}")
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
