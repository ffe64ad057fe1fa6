"""Dense convolution baselines: direct triple-loop and im2col + GEMM.

These are the correctness oracle and the performance stand-ins for the dense
library path. No activation function is applied.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ShapeError
from .shapes import ConvShape, check_nchw, compute_dtype, pad_input


@dataclass
class ConvLayerDense:
    """Dense weights (K, C, R, S) plus bias and stride/padding."""

    weights: np.ndarray
    bias: np.ndarray = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be KCRS 4D, got ndim={self.weights.ndim}")
        self.weights = np.ascontiguousarray(self.weights)
        k = self.weights.shape[0]
        if self.bias is None:
            self.bias = np.zeros(k, dtype=self.weights.dtype)
        self.bias = np.ascontiguousarray(self.bias)
        if self.bias.shape != (k,):
            raise ShapeError(f"bias must have shape ({k},), got {self.bias.shape}")

    def conv_shape(self, x: np.ndarray) -> ConvShape:
        """Full ConvShape for this layer applied to input x (validates fit)."""
        k, c, r, s = self.weights.shape
        n, cx, h, w = x.shape
        if cx != c:
            raise ShapeError(f"input has {cx} channels, weights expect {c}")
        return ConvShape(n, c, h, w, k, r, s, self.stride, self.padding)


def _prep(x, layer):
    x = check_nchw(x)
    shape = layer.conv_shape(x)
    ct = compute_dtype(x.dtype)
    xp = pad_input(x, layer.padding).astype(ct, copy=False)
    w = layer.weights.astype(ct, copy=False)
    b = layer.bias.astype(ct, copy=False)
    return xp, w, b, shape, ct


def conv_dense_direct(x: np.ndarray, layer: ConvLayerDense) -> np.ndarray:
    """Direct convolution; accumulation order per output element is fixed
    (c-major, then r, then s), bit-deterministic regardless of thread count."""
    xp, w, b, shape, ct = _prep(x, layer)
    out = np.empty((shape.n, shape.k, shape.e, shape.f), dtype=ct)
    xf = np.ascontiguousarray(xp.reshape(shape.n, -1))
    _kernels.conv_direct_kernel(xf, w, b, out, shape.hp, shape.wp, shape.stride)
    return out.astype(x.dtype, copy=False)


def im2col(xp: np.ndarray, shape: ConvShape) -> np.ndarray:
    """Patch matrix (N, C*R*S, E*F) from the padded input."""
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(shape.n, shape.c, shape.r, shape.s, shape.e, shape.f),
        strides=(sn, sc, sh, sw, sh * shape.stride, sw * shape.stride),
        writeable=False,
    )
    return view.reshape(shape.n, shape.kernel_volume, shape.e * shape.f)


def conv_dense_gemm(x: np.ndarray, layer: ConvLayerDense) -> np.ndarray:
    """im2col followed by a batched matrix multiply; numerically equivalent to
    conv_dense_direct within accumulation tolerance."""
    xp, w, b, shape, ct = _prep(x, layer)
    cols = im2col(xp, shape)
    w2d = w.reshape(shape.k, shape.kernel_volume)
    out = np.matmul(w2d, cols) + b[:, None]
    out = out.reshape(shape.n, shape.k, shape.e, shape.f)
    return out.astype(x.dtype, copy=False)
