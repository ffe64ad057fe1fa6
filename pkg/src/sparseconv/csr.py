"""Unified-sparsity CSR weight format.

Every output channel of a layer is forced to carry the same non-zero count
(the maximum over channels) by promoting selected zeros to stored "non-zero"
entries with value 0.0. Promoted zeros are chosen adjacency-first so the
stored offsets stay as contiguous as possible. colidx holds precomputed
flattened offsets into the *padded* input plane (c*Hp*Wp + r*Wp + s), so the
engine's inner loop is addition-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .shapes import ConvShape

# colidx is int32; reject layers whose padded input volume would overflow it.
_MAX_OFFSET = 2**31 - 1


@dataclass
class SparsityReport:
    """Exact zero statistics of one layer's weight tensor."""

    per_channel_nnz: np.ndarray
    unified_nnz: int
    padded_zero_count: int
    layer_sparsity: float


@dataclass
class CsrKernel:
    """Compressed weights of one convolution layer.

    values/colidx are parallel arrays; rowptr[k]..rowptr[k+1] delimits output
    channel k. For unified kernels every channel holds exactly sparse_level
    entries. The kernel is immutable after construction and safe to share
    across threads.
    """

    values: np.ndarray
    colidx: np.ndarray
    rowptr: np.ndarray
    sparse_level: int
    shape: ConvShape
    unified: bool = True

    def validate(self) -> None:
        """Check all structural invariants; raises FormatError on violation."""
        sh = self.shape
        if self.values.shape != self.colidx.shape or self.values.ndim != 1:
            raise FormatError("values/colidx must be parallel 1D arrays")
        if self.rowptr.shape != (sh.k + 1,):
            raise FormatError(f"rowptr must have length K+1={sh.k + 1}")
        if self.rowptr[0] != 0 or self.rowptr[-1] != len(self.values):
            raise FormatError("rowptr must start at 0 and end at len(values)")
        deltas = np.diff(self.rowptr)
        if np.any(deltas < 0):
            raise FormatError("rowptr must be monotonically non-decreasing")
        if self.unified and np.any(deltas != self.sparse_level):
            raise FormatError("unified kernel requires equal per-channel counts")
        plane = sh.hp * sh.wp
        c, rem = np.divmod(self.colidx, plane)
        r, s = np.divmod(rem, sh.wp)
        if len(self.colidx):
            if self.colidx.min() < 0 or np.any(c >= sh.c) or np.any(r >= sh.r) or np.any(s >= sh.s):
                raise FormatError("colidx entry outside the kernel volume")
        for k in range(sh.k):
            seg = self.colidx[self.rowptr[k]:self.rowptr[k + 1]]
            if len(seg) > 1 and np.any(np.diff(seg) <= 0):
                raise FormatError(f"colidx not strictly increasing in channel {k}")

    @property
    def nnz(self) -> int:
        return len(self.values)


def analyze_sparsity(weights: np.ndarray) -> SparsityReport:
    """Zero-count statistics of a (K, C, R, S) weight tensor."""
    if weights.ndim != 4 or weights.size == 0:
        raise ShapeError("weights must be a non-empty KCRS tensor")
    per_channel = np.count_nonzero(weights.reshape(weights.shape[0], -1), axis=1)
    unified = int(per_channel.max())
    return SparsityReport(
        per_channel_nnz=per_channel,
        unified_nnz=unified,
        padded_zero_count=int(np.sum(unified - per_channel)),
        layer_sparsity=1.0 - np.count_nonzero(weights) / weights.size,
    )


def select_padding_zeros(channel_weights: np.ndarray, deficit: int) -> np.ndarray:
    """Pick `deficit` zero positions of a flattened channel for promotion.

    Zeros are taken in increasing flat-index distance to the nearest existing
    non-zero (distance-1 first, i.e. side-by-side), ties broken by lower
    index; with no non-zeros at all the lowest-index zeros are used. Returned
    sorted ascending.
    """
    flat = np.asarray(channel_weights).ravel()
    zeros = np.flatnonzero(flat == 0)
    if deficit == 0:
        return np.empty(0, dtype=np.int64)
    if deficit > len(zeros):
        raise ShapeError(f"deficit {deficit} exceeds available zeros {len(zeros)}")
    nz = np.flatnonzero(flat)
    if len(nz) == 0:
        return zeros[:deficit]
    # distance of each zero to its nearest non-zero, via the sorted nz array
    pos = np.searchsorted(nz, zeros)
    left = np.where(pos > 0, zeros - nz[np.maximum(pos - 1, 0)], np.iinfo(np.int64).max)
    right = np.where(pos < len(nz), nz[np.minimum(pos, len(nz) - 1)] - zeros, np.iinfo(np.int64).max)
    dist = np.minimum(left, right)
    order = np.lexsort((zeros, dist))
    return np.sort(zeros[order[:deficit]])


def build_csr(weights: np.ndarray, shape: ConvShape, unify: bool = True) -> CsrKernel:
    """Compress a (K, C, R, S) weight tensor for the given layer geometry.

    With unify=True (default), zero promotion equalizes per-channel counts;
    unify=False keeps ragged channels (instrumentation only, the engine
    accepts both).
    """
    if weights.ndim != 4:
        raise ShapeError("weights must be KCRS 4D")
    k, c, r, s = weights.shape
    if (k, c, r, s) != (shape.k, shape.c, shape.r, shape.s):
        raise ShapeError(
            f"weights {weights.shape} inconsistent with shape KCRS="
            f"({shape.k},{shape.c},{shape.r},{shape.s})"
        )
    plane = shape.hp * shape.wp
    if c * plane > _MAX_OFFSET:
        raise ShapeError("padded input volume exceeds 32-bit offset range")
    report = analyze_sparsity(weights)
    target = report.unified_nnz if unify else None

    all_idx = []
    counts = np.empty(k, dtype=np.int64)
    for ch in range(k):
        flat = weights[ch].ravel()
        idx = np.flatnonzero(flat)
        if unify and len(idx) < target:
            pad = select_padding_zeros(flat, target - len(idx))
            idx = np.sort(np.concatenate([idx, pad]))
        counts[ch] = len(idx)
        all_idx.append(idx)

    rowptr = np.zeros(k + 1, dtype=np.int32)
    rowptr[1:] = np.cumsum(counts)
    idx_cat = np.concatenate(all_idx) if all_idx else np.empty(0, np.int64)
    ch_of = np.repeat(np.arange(k), counts)
    values = weights.reshape(k, -1)[ch_of, idx_cat] if len(idx_cat) else np.empty(0, weights.dtype)
    # flat kernel index (c*R*S + r*S + s) -> padded input offset
    cc, rem = np.divmod(idx_cat, r * s)
    rr, ss = np.divmod(rem, s)
    colidx = (cc * plane + rr * shape.wp + ss).astype(np.int32)
    level = int(target) if unify else int(counts.max(initial=0))
    kernel = CsrKernel(values=np.ascontiguousarray(values), colidx=colidx,
                       rowptr=rowptr, sparse_level=level, shape=shape, unified=unify)
    kernel.validate()
    return kernel


def decompress(kernel: CsrKernel) -> np.ndarray:
    """Reconstruct the dense (K, C, R, S) tensor; exact inverse of build_csr."""
    kernel.validate()
    sh = kernel.shape
    out = np.zeros((sh.k, sh.c, sh.r, sh.s), dtype=kernel.values.dtype)
    plane = sh.hp * sh.wp
    c, rem = np.divmod(kernel.colidx.astype(np.int64), plane)
    r, s = np.divmod(rem, sh.wp)
    k = np.repeat(np.arange(sh.k), np.diff(kernel.rowptr))
    out[k, c, r, s] = kernel.values
    return out
