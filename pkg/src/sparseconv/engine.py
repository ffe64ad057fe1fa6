"""CPU-parallel direct sparse convolution engine.

GPU thread blocks become work units on a fixed worker pool: one unit covers
(output channel, sub-batch block), stages that channel's (value, offset)
pairs once and reuses them for sub_batch_size inputs. Outputs are
bit-identical across sub_batch_size and worker counts because each output
element is always accumulated in colidx order.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from . import _kernels
from .csr import CsrKernel
from .errors import ShapeError
from .shapes import check_nchw, compute_dtype, pad_input

log = logging.getLogger(__name__)

SUB_BATCH_CANDIDATES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class EnginePlan:
    """Execution plan for conv_sparse."""

    sub_batch_size: int = 1
    worker_count: int = 1

    def __post_init__(self):
        if self.sub_batch_size not in SUB_BATCH_CANDIDATES:
            raise ShapeError(f"sub_batch_size must be in {SUB_BATCH_CANDIDATES}")
        if self.worker_count < 1:
            raise ShapeError("worker_count must be >= 1")


def _set_workers(worker_count: int) -> None:
    avail = numba.config.NUMBA_NUM_THREADS
    if worker_count > avail:
        log.debug("clamping worker_count %d to %d available threads", worker_count, avail)
    numba.set_num_threads(min(worker_count, avail))


def _prep_sparse(x, kernel, bias):
    x = check_nchw(x)
    sh = kernel.shape
    if x.shape[1:] != (sh.c, sh.h, sh.w):
        raise ShapeError(f"input {x.shape} does not match kernel geometry "
                         f"(C,H,W)=({sh.c},{sh.h},{sh.w})")
    ct = compute_dtype(x.dtype)
    if bias is None:
        bias = np.zeros(sh.k, dtype=ct)
    bias = np.ascontiguousarray(np.asarray(bias), dtype=ct)
    if bias.shape != (sh.k,):
        raise ShapeError(f"bias must have shape ({sh.k},)")
    n = x.shape[0]
    xp = pad_input(x, sh.padding).astype(ct, copy=False)
    xf = np.ascontiguousarray(xp.reshape(n, -1))
    vals = kernel.values.astype(ct, copy=False)
    return xf, vals, bias, ct, n


def conv_sparse(x: np.ndarray, kernel: CsrKernel, bias: np.ndarray | None = None,
                plan: EnginePlan = EnginePlan()) -> np.ndarray:
    """Direct sparse convolution of an NCHW batch against a CsrKernel.

    Batches not divisible by sub_batch_size are padded up by replicating the
    last sample (the replica outputs are dropped).
    """
    xf, vals, bias, ct, n = _prep_sparse(x, kernel, bias)
    sh = kernel.shape
    sb = plan.sub_batch_size
    n_run = n
    if n % sb != 0:
        n_run = ((n + sb - 1) // sb) * sb
        log.debug("batch %d padded to %d by replication (sub_batch_size=%d)", n, n_run, sb)
        xf = np.concatenate([xf, np.repeat(xf[-1:], n_run - n, axis=0)])
    out = np.empty((n_run, sh.k, sh.e, sh.f), dtype=ct)
    _set_workers(plan.worker_count)
    _kernels.conv_sparse_kernel(xf, vals, kernel.colidx, kernel.rowptr, bias,
                                out, sh.wp, sh.stride, sb)
    return out[:n].astype(x.dtype, copy=False)


def conv_sparse_1d(x: np.ndarray, kernel: CsrKernel, bias: np.ndarray | None = None,
                   plan: EnginePlan = EnginePlan()) -> np.ndarray:
    """1D specialization: input H=1 (length-W series with C channels)."""
    sh = kernel.shape
    if sh.h != 1 or sh.r != 1:
        raise ShapeError("conv_sparse_1d requires H=1 and R=1")
    xf, vals, bias, ct, n = _prep_sparse(x, kernel, bias)
    sb = plan.sub_batch_size
    n_run = n
    if n % sb != 0:
        n_run = ((n + sb - 1) // sb) * sb
        xf = np.concatenate([xf, np.repeat(xf[-1:], n_run - n, axis=0)])
    out = np.empty((n_run, sh.k, 1, sh.f), dtype=ct)
    _set_workers(plan.worker_count)
    _kernels.conv_sparse1d_kernel(xf, vals, kernel.colidx, kernel.rowptr, bias,
                                  out, sh.stride, sb)
    return out[:n].astype(x.dtype, copy=False)


def conv_sparse_reference(x: np.ndarray, kernel: CsrKernel,
                          bias: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Slow instrumented path: plain numpy gather per channel.

    Returns (output, exact multiply-accumulate count). Independent of the
    compiled kernel; used to cross-check results and the MAC-count formula.
    """
    xf, vals, bias, ct, n = _prep_sparse(x, kernel, bias)
    sh = kernel.shape
    base = (np.arange(sh.e)[:, None] * sh.stride * sh.wp
            + np.arange(sh.f)[None, :] * sh.stride).ravel()
    out = np.empty((n, sh.k, sh.e * sh.f), dtype=ct)
    macs = 0
    for k in range(sh.k):
        seg = slice(kernel.rowptr[k], kernel.rowptr[k + 1])
        idx = kernel.colidx[seg].astype(np.int64)[:, None] + base[None, :]
        gathered = xf[:, idx]                       # (n, L, EF)
        out[:, k] = np.einsum("l,nlf->nf", vals[seg], gathered) + bias[k]
        macs += n * (kernel.rowptr[k + 1] - kernel.rowptr[k]) * sh.e * sh.f
    return out.reshape(n, sh.k, sh.e, sh.f).astype(x.dtype, copy=False), macs


def sparse_mac_count(kernel: CsrKernel, batch: int) -> int:
    """Analytic MAC count: N * K * E * F * sparse_level for unified kernels."""
    sh = kernel.shape
    if kernel.unified:
        return batch * sh.k * sh.e * sh.f * kernel.sparse_level
    return batch * sh.e * sh.f * int(kernel.nnz)


def dense_mac_count(shape, batch: int) -> int:
    return batch * shape.k * shape.e * shape.f * shape.kernel_volume


def tune_sub_batch(x: np.ndarray, kernel: CsrKernel, bias: np.ndarray | None = None,
                   candidates=SUB_BATCH_CANDIDATES, worker_count: int = 1,
                   repetitions: int = 5, warmups: int = 2) -> tuple[int, dict[int, float]]:
    """Pick the fastest sub_batch_size by timed trials.

    Runs `warmups` discarded calls then `repetitions` timed calls per
    candidate and returns (argmin-median candidate, {candidate: median_s});
    ties go to the smaller sub_batch_size.
    """
    if not candidates:
        raise ShapeError("candidate set must be non-empty")
    timings: dict[int, float] = {}
    for sb in sorted(candidates):
        plan = EnginePlan(sub_batch_size=sb, worker_count=worker_count)
        for _ in range(warmups):
            conv_sparse(x, kernel, bias, plan)
        samples = []
        for _ in range(max(repetitions, 1)):
            t0 = time.perf_counter()
            conv_sparse(x, kernel, bias, plan)
            samples.append(time.perf_counter() - t0)
        timings[sb] = float(np.median(samples))
    best = min(timings, key=lambda sb: (timings[sb], sb))
    return best, timings
