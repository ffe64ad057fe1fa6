import numpy as np
import pytest

from sparseconv import _kernels


@pytest.fixture(scope="session", autouse=True)
def _warm_kernels():
    """Compile the jit kernels once so timings inside tests are stable."""
    _kernels.warmup()


def conv_oracle(x, w, bias=None, stride=1, padding=0):
    """Independent f64 convolution reference: explicit padding, per-output
    window sum. Deliberately written differently from the library kernels."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    k, _, r, s = w.shape
    b = np.zeros(k) if bias is None else np.asarray(bias, dtype=np.float64)
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    e = (h + 2 * padding - r) // stride + 1
    f = (wd + 2 * padding - s) // stride + 1
    out = np.empty((n, k, e, f))
    for ni in range(n):
        for ki in range(k):
            for i in range(e):
                for j in range(f):
                    window = xp[ni, :, i * stride:i * stride + r,
                                j * stride:j * stride + s]
                    out[ni, ki, i, j] = np.sum(window * w[ki]) + b[ki]
    return out


def random_sparse_weights(rng, k, c, r, s, sparsity, dtype=np.float32):
    w = rng.standard_normal((k, c, r, s)).astype(dtype)
    mask = rng.random((k, c, r, s)) < sparsity
    w[mask] = 0
    return w
