"""Post-training quantization: signed fixed-point, affine/symmetric integer
mapping with histogram saturation calibration, and nonlinear codebook
quantization via k-means clustering.

All schemes with a zero origin map 0.0 to exactly 0.0, so CSR sparsity
structure survives quantization unchanged.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from ._cluster import kmeans
from .errors import ShapeError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# fixed point
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FixedPointParams:
    total_bits: int
    int_bits: int
    mu: float = 0.0

    def __post_init__(self):
        if self.int_bits < 0 or self.frac_bits < 0:
            raise ShapeError(f"invalid bit split: int={self.int_bits} of {self.total_bits}")

    @property
    def frac_bits(self) -> int:
        # signed representation: one bit is the sign
        return self.total_bits - self.int_bits - 1

    @property
    def sigma(self) -> float:
        return 2.0 ** (-self.frac_bits)


def fit_fixed_point(x, total_bits: int) -> FixedPointParams:
    """Derive the int/frac bit split from the data's magnitude (mu = 0).

    int_bits = ceil(log2(max|x|)), clamped at 0 for sub-unit distributions so
    frac_bits absorbs the slack; all-zero data also yields int_bits = 0.
    """
    x = np.asarray(x)
    if x.size == 0:
        raise ShapeError("cannot fit fixed-point parameters on empty data")
    if not np.all(np.isfinite(x)):
        raise ShapeError("data contains non-finite values")
    m = float(np.max(np.abs(x)))
    int_bits = 0 if m == 0 else max(0, math.ceil(math.log2(m)))
    return FixedPointParams(total_bits=total_bits, int_bits=int_bits)


def quantize_fixed(x, p: FixedPointParams):
    """Round to the fixed-point grid and saturate to the signed range
    [-2^int_bits, 2^int_bits - sigma]."""
    x = np.asarray(x, dtype=np.float64)
    q = p.mu + p.sigma * np.round((x - p.mu) / p.sigma)
    lo = -(2.0 ** p.int_bits)
    hi = 2.0 ** p.int_bits - p.sigma
    return np.clip(q, lo, hi)


def fixed_saturation_count(x, p: FixedPointParams) -> int:
    """Number of inputs clipped by the representable range."""
    x = np.asarray(x, dtype=np.float64)
    q = p.mu + p.sigma * np.round((x - p.mu) / p.sigma)
    return int(np.sum((q < -(2.0 ** p.int_bits)) | (q > 2.0 ** p.int_bits - p.sigma)))


# ---------------------------------------------------------------------------
# affine / symmetric integer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineIntParams:
    bits: int
    mode: str                   # "asymmetric" | "symmetric"
    mu: float
    vmin: float
    vmax: float
    step: float

    @property
    def zero_point(self) -> int:
        return int(round((0.0 - self.mu) / self.step))


def fit_affine_int(x, bits: int, mode: str = "asymmetric",
                   clip: tuple[float, float] | None = None) -> AffineIntParams:
    """Fit integer-mapping parameters on a calibration set.

    Asymmetric: mu = min(X), codes span [0, 2^bits - 1]. Symmetric: mu = 0,
    signed code range. A degenerate range (max = min) gets step 1.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ShapeError("cannot fit affine parameters on empty data")
    vmin = float(x.min()) if clip is None else clip[0]
    vmax = float(x.max()) if clip is None else clip[1]
    if mode == "asymmetric":
        mu = vmin
        step = (vmax - vmin) / (2 ** bits - 1)
    elif mode == "symmetric":
        mu = 0.0
        step = max(abs(vmin), abs(vmax)) / (2 ** (bits - 1) - 1)
    else:
        raise ShapeError(f"unknown affine mode {mode!r}")
    if step == 0:
        step = 1.0
    return AffineIntParams(bits=bits, mode=mode, mu=mu, vmin=vmin, vmax=vmax, step=step)


def quantize_affine_int(x, p: AffineIntParams, literal_ceil: bool = False):
    """Map reals to integer codes (round-to-nearest; ceil compatibility mode
    behind the flag)."""
    x = np.asarray(x, dtype=np.float64)
    raw = (x - p.mu) / p.step
    codes = np.ceil(raw) if literal_ceil else np.round(raw)
    if p.mode == "asymmetric":
        lo, hi = 0, 2 ** p.bits - 1
    else:
        lo, hi = -(2 ** (p.bits - 1) - 1), 2 ** (p.bits - 1) - 1
    return np.clip(codes, lo, hi).astype(np.int64)


def dequantize_affine_int(codes, p: AffineIntParams):
    return p.mu + np.asarray(codes, dtype=np.float64) * p.step


# ---------------------------------------------------------------------------
# histogram saturation calibration
# ---------------------------------------------------------------------------

@dataclass
class SaturationPolicy:
    histogram: np.ndarray
    bin_edges: np.ndarray
    clip_lo: float
    clip_hi: float
    coverage: float
    mse: float


def calibrate_saturation(samples, coverage_targets=(0.999, 0.9999, 1.0),
                         bits: int = 8, mode: str = "asymmetric") -> SaturationPolicy:
    """Histogram outlier analysis: try clip bounds at several coverage levels
    and keep the one minimizing quantization MSE on the samples.

    The no-clip policy (coverage 1.0) is always a candidate, so the chosen
    policy's MSE never exceeds the unclipped MSE.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ShapeError("empty calibration sample set")
    hist, edges = np.histogram(samples, bins=2048)
    cum = np.cumsum(hist) / hist.sum()
    best = None
    for cov in sorted(set(tuple(coverage_targets) + (1.0,))):
        if cov >= 1.0:
            lo, hi = float(samples.min()), float(samples.max())
        else:
            tail = (1.0 - cov) / 2
            lo_i = int(np.searchsorted(cum, tail))
            hi_i = int(np.searchsorted(cum, 1.0 - tail))
            lo = float(edges[min(lo_i, len(edges) - 2)])
            hi = float(edges[min(hi_i + 1, len(edges) - 1)])
            if hi <= lo:
                continue
        p = fit_affine_int(samples, bits, mode=mode, clip=(lo, hi))
        recon = dequantize_affine_int(quantize_affine_int(np.clip(samples, lo, hi), p), p)
        mse = float(np.mean((samples - recon) ** 2))
        inside = float(np.mean((samples >= lo) & (samples <= hi)))
        policy = SaturationPolicy(hist, edges, lo, hi, inside, mse)
        if best is None or mse < best.mse:
            best = policy
    return best


# ---------------------------------------------------------------------------
# codebook (nonlinear) quantization
# ---------------------------------------------------------------------------

@dataclass
class Codebook:
    """k-means centroid table (binary16 storage) plus per-weight indices."""

    centroids: np.ndarray       # float16, shape (k,)
    assignments: np.ndarray     # int, shape of the flattened weights

    @property
    def n_centroids(self) -> int:
        return len(self.centroids)

    @property
    def index_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.n_centroids)))

    def decode(self, dtype=np.float32) -> np.ndarray:
        return self.centroids[self.assignments].astype(dtype)

    def payload_bits(self) -> int:
        """Stored size: one index per weight plus the 16-bit centroid table."""
        return self.assignments.size * self.index_bits + 16 * self.n_centroids


def build_codebook(w, k: int, seed: int = 0, pin_zero: bool = False) -> Codebook:
    """Cluster scalar weights into k centroids (k-means++ init, seeded).

    pin_zero reserves one centroid at exactly 0.0 and assigns all zero
    weights to it, so pruned positions stay zero after decoding.
    """
    flat = np.asarray(w, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ShapeError("cannot build a codebook from empty weights")
    n_distinct = len(np.unique(flat))
    if k > n_distinct:
        log.info("reducing codebook size %d to %d distinct values", k, n_distinct)
        k = n_distinct
    rng = np.random.default_rng(seed)
    if pin_zero and np.any(flat == 0):
        nz = flat[flat != 0]
        assignments = np.zeros(flat.size, dtype=np.int64)
        if len(nz) and k > 1:
            centers, labels, _ = kmeans(nz, k - 1, rng)
            centroids = np.concatenate([[0.0], centers.ravel()])
            assignments[flat != 0] = labels + 1
        else:
            centroids = np.zeros(1)
    else:
        centers, labels, _ = kmeans(flat, k, rng)
        centroids = centers.ravel()
        assignments = labels
    cb = Codebook(centroids=centroids.astype(np.float16),
                  assignments=assignments.reshape(np.asarray(w).shape))
    return cb


# ---------------------------------------------------------------------------
# model-level application
# ---------------------------------------------------------------------------

def parse_scheme(spec: str) -> tuple[str, int]:
    """Parse 'fixed:8' | 'affine:8' | 'codebook:16' into (kind, parameter)."""
    try:
        kind, num = spec.split(":")
        num = int(num)
    except ValueError:
        raise ShapeError(f"bad scheme spec {spec!r}; expected kind:number")
    if kind not in ("fixed", "affine", "codebook"):
        raise ShapeError(f"unknown quantization scheme {kind!r}")
    return kind, num


def quantize_weights_array(arr: np.ndarray, kind: str, num: int,
                           seed: int = 0) -> tuple[np.ndarray, dict, Codebook | None]:
    """Quantize one weight array in simulated (quantize-dequantize) form.

    Returns (new values, metadata, codebook-or-None). Zeros are preserved
    exactly in every scheme.
    """
    dtype = arr.dtype
    if kind == "fixed":
        p = fit_fixed_point(arr, num)
        out = quantize_fixed(arr, p).astype(dtype)
        meta = {"scheme": "fixed", "bits": num, "int_bits": p.int_bits,
                "frac_bits": p.frac_bits}
        return out, meta, None
    if kind == "affine":
        p = fit_affine_int(arr, num, mode="symmetric")
        out = dequantize_affine_int(quantize_affine_int(arr, p), p).astype(dtype)
        meta = {"scheme": "affine", "bits": num, "mode": "symmetric", "step": p.step}
        return out, meta, None
    cb = build_codebook(arr, num, seed=seed, pin_zero=bool(np.any(arr == 0)))
    out = cb.decode(dtype)
    meta = {"scheme": "codebook", "centroids": cb.n_centroids,
            "index_bits": cb.index_bits}
    return out, meta, cb


def apply_quantization(model, scheme: str, targets=("weights",),
                       calib_data=None, activation_bits: int | None = None,
                       seed: int = 0):
    """Quantize a stored model in place: weights (dense, CSR values or dense
    classifier) and optionally activations (simulated quantize-dequantize
    around each conv layer, calibrated by histogram saturation).
    """
    kind, num = parse_scheme(scheme)
    targets = tuple(targets)
    unknown = set(targets) - {"weights", "activations"}
    if unknown:
        raise ShapeError(f"unknown quantization targets {sorted(unknown)}")
    if "activations" in targets and kind == "codebook":
        raise ShapeError("codebook quantization of activations is unsupported")

    qmeta = {"scheme": scheme, "targets": list(targets), "layers": {}}
    if "weights" in targets:
        for layer in model.all_layers():
            arr = layer.weight_values()
            new, meta, cb = quantize_weights_array(arr, kind, num, seed=seed)
            layer.set_weight_values(new)
            layer.codebook = cb
            qmeta["layers"][layer.name] = meta

    if "activations" in targets:
        if calib_data is None:
            raise ShapeError("activation quantization requires calibration data")
        bits = activation_bits or num
        acts = model.collect_activations(calib_data)
        for layer in model.conv_layers:
            samples = acts[layer.name]
            policy = calibrate_saturation(samples, bits=bits)
            p = fit_affine_int(samples, bits, clip=(policy.clip_lo, policy.clip_hi))
            layer.act_quant = {"bits": bits, "clip_lo": policy.clip_lo,
                               "clip_hi": policy.clip_hi, "mu": p.mu,
                               "step": p.step, "mode": p.mode}
            qmeta["layers"].setdefault(layer.name, {})["activations"] = layer.act_quant
    model.meta["quantization"] = qmeta
    return model


def fake_quant_activation(a: np.ndarray, aq: dict) -> np.ndarray:
    """Simulated activation quantization used during inference."""
    p = AffineIntParams(bits=aq["bits"], mode=aq.get("mode", "asymmetric"),
                        mu=aq["mu"], vmin=aq["clip_lo"], vmax=aq["clip_hi"],
                        step=aq["step"])
    clipped = np.clip(a, aq["clip_lo"], aq["clip_hi"])
    return dequantize_affine_int(quantize_affine_int(clipped, p), p).astype(a.dtype)


# ---------------------------------------------------------------------------
# sklearn-style transformers
# ---------------------------------------------------------------------------

class _SimulatedQuantizer(TransformerMixin, BaseEstimator):
    """Base: fit() learns parameters on X, transform() returns the
    quantize-dequantize simulation of X."""

    def _check_fitted(self):
        if not hasattr(self, "params_") and not hasattr(self, "codebook_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted")


class FixedPointQuantizer(_SimulatedQuantizer):
    def __init__(self, total_bits=8):
        self.total_bits = total_bits

    def fit(self, X, y=None):
        self.params_ = fit_fixed_point(np.asarray(X), self.total_bits)
        return self

    def transform(self, X):
        self._check_fitted()
        X = np.asarray(X)
        self.saturation_count_ = fixed_saturation_count(X, self.params_)
        return quantize_fixed(X, self.params_).astype(X.dtype)


class AffineQuantizer(_SimulatedQuantizer):
    def __init__(self, bits=8, mode="asymmetric"):
        self.bits = bits
        self.mode = mode

    def fit(self, X, y=None):
        self.params_ = fit_affine_int(np.asarray(X), self.bits, mode=self.mode)
        return self

    def transform(self, X):
        self._check_fitted()
        X = np.asarray(X)
        codes = quantize_affine_int(X, self.params_)
        return dequantize_affine_int(codes, self.params_).astype(X.dtype)


class CodebookQuantizer(_SimulatedQuantizer):
    def __init__(self, n_centroids=16, pin_zero=False, random_state=0):
        self.n_centroids = n_centroids
        self.pin_zero = pin_zero
        self.random_state = random_state

    def fit(self, X, y=None):
        self.codebook_ = build_codebook(np.asarray(X), self.n_centroids,
                                        seed=self.random_state, pin_zero=self.pin_zero)
        return self

    def transform(self, X):
        self._check_fitted()
        X = np.asarray(X)
        flat = X.ravel()[:, None]
        cents = self.codebook_.centroids.astype(np.float64)
        labels = np.abs(flat - cents[None, :]).argmin(axis=1)
        return cents[labels].reshape(X.shape).astype(X.dtype)
