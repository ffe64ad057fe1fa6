"""Layer benchmarking and network configuration.

Times each convolution layer under the sparse-direct kernel and two dense
baselines (direct and im2col+GEMM) across dtype profiles, estimates the
sparsity crossover where sparse becomes faster, and emits a per-layer
execution plan. Every timed configuration's output is cross-checked against
the dense-direct reference before its timing is accepted.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .csr import build_csr
from .dense import ConvLayerDense, conv_dense_direct, conv_dense_gemm
from .engine import (EnginePlan, conv_sparse, conv_sparse_1d, dense_mac_count,
                     sparse_mac_count, tune_sub_batch)
from .errors import IntegrityError, ShapeError
from .shapes import ConvShape

log = logging.getLogger(__name__)

DEFAULT_BATCH = 128
_SUB_BATCH_CHOICES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class LayerSpec:
    """One benchmark subject: a conv geometry plus a target weight sparsity."""

    name: str
    shape: ConvShape            # batch dimension is replaced at bench time
    sparsity: float
    source: str = "table-preset"

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ShapeError(f"sparsity must be in [0,1], got {self.sparsity}")


@dataclass
class BenchRecord:
    layer: str
    algorithm: str              # sparse-direct | dense-direct | dense-gemm
    dtype: str                  # f32 | f16
    sub_batch_size: int | None
    median_ms: float
    iqr_ms: float
    mean_ms: float
    repetitions: int
    mac_count: int
    sparsity: float


def _shape(c, h, w, k, r, s, stride=1, padding=0):
    return ConvShape(n=1, c=c, h=h, w=w, k=k, r=r, s=s,
                     stride=stride, padding=padding)


def _vgg(c, hw, k):
    return _shape(c, hw, hw, k, 3, 3, padding=1)


# Layer lists follow the published per-model timing tables; the 1x1 DenseNet
# bottleneck geometries are reconstructed from the cited architecture since
# only layer names are given. "vgg16-mini" is a reduced-spatial 3x3 stand-in
# sized for single-machine sweeps.
PRESETS: dict[str, list[LayerSpec]] = {
    "vgg16": [
        LayerSpec(f"{c}x{hw}x{hw}x{k}", _vgg(c, hw, k), 0.90)
        for c, hw, k in [(3, 224, 64), (64, 224, 64), (64, 112, 128),
                         (128, 112, 128), (128, 56, 256), (256, 56, 256),
                         (256, 28, 512), (512, 28, 512), (512, 14, 512)]
    ],
    "vgg16-mini": [
        LayerSpec("64x28x28x64", _vgg(64, 28, 64), 0.90),
    ],
    "resnet-1x1": [
        LayerSpec("256-filters-1x1x64", _shape(64, 56, 56, 256, 1, 1), 0.90),
        LayerSpec("64-filters-1x1x256", _shape(256, 56, 56, 64, 1, 1), 0.90),
    ],
    "densenet-1x1": [
        LayerSpec("densenet121-block3-layer24", _shape(992, 14, 14, 128, 1, 1), 0.875),
        LayerSpec("densenet121-block3-layer24-r91", _shape(992, 14, 14, 128, 1, 1), 0.91),
        LayerSpec("densenet161-block4-layer16", _shape(1776, 7, 7, 192, 1, 1), 0.91),
        LayerSpec("densenet161-block3-layer16", _shape(1104, 14, 14, 192, 1, 1), 0.93),
    ],
    "cnn-non-static": [
        LayerSpec("300x64-kernel2-s77", _shape(64, 1, 300, 100, 1, 2), 0.77),
        LayerSpec("300x64-kernel2-s83", _shape(64, 1, 300, 100, 1, 2), 0.83),
        LayerSpec("300x64-kernel2-s87.5", _shape(64, 1, 300, 100, 1, 2), 0.875),
        LayerSpec("300x64-kernel3-s77", _shape(64, 1, 300, 100, 1, 3), 0.77),
        LayerSpec("300x64-kernel3-s83", _shape(64, 1, 300, 100, 1, 3), 0.83),
        LayerSpec("300x64-kernel3-s87.5", _shape(64, 1, 300, 100, 1, 3), 0.875),
    ],
}


def make_layer_weights(spec: LayerSpec, seed: int = 0) -> np.ndarray:
    """Seeded KCRS weights at the spec's sparsity, uniform across channels:
    every output channel carries the same non-zero count at random positions."""
    sh = spec.shape
    rng = np.random.default_rng(seed)
    vol = sh.c * sh.r * sh.s
    nnz = vol - int(round(spec.sparsity * vol))
    w = np.zeros((sh.k, vol), dtype=np.float32)
    for k in range(sh.k):
        pos = rng.choice(vol, size=nnz, replace=False)
        w[k, pos] = rng.standard_normal(nnz)
    return w.reshape(sh.k, sh.c, sh.r, sh.s)


def estimate_bytes(shape: ConvShape, batch: int) -> int:
    """Rough peak working set: padded input + output + im2col columns (f32)."""
    inp = batch * shape.c * shape.hp * shape.wp
    out = batch * shape.k * shape.e * shape.f
    cols = batch * shape.c * shape.r * shape.s * shape.e * shape.f
    return 4 * (inp + out + cols)


def _time_ms(fn, repetitions: int, warmups: int) -> tuple[float, float, float]:
    for _ in range(warmups):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return float(med), float(q3 - q1), float(np.mean(samples))


def _check(out, ref, dtype: str, layer: str, algorithm: str) -> None:
    tol = 1e-4 if dtype == "f32" else 1e-2
    ref64 = ref.astype(np.float64)
    err = np.abs(out.astype(np.float64) - ref64)
    bound = tol * (np.abs(ref64) + 1.0)
    if np.any(err > bound):
        raise IntegrityError(
            f"{layer}/{algorithm}/{dtype}: output disagrees with dense-direct "
            f"reference (max rel err {float((err / bound).max()) * tol:.3g})")


ALGORITHMS = ("sparse-direct", "dense-direct", "dense-gemm")


def bench_layer(spec: LayerSpec, batch: int = DEFAULT_BATCH,
                profiles=("f32", "f16"), repetitions: int = 5, warmups: int = 2,
                seed: int = 0, worker_count: int = 1,
                memory_budget: int = 4 * 1024**3,
                weights: np.ndarray | None = None,
                algorithms=ALGORITHMS, tune: bool = True,
                sub_batch_size: int = 8) -> list[BenchRecord]:
    """Time sparse-direct (tuned sub-batch) and the dense baselines.

    Returns one record per (algorithm, dtype). A layer whose working set
    exceeds the memory budget is skipped (empty list, warning logged). Any
    algorithm whose output disagrees with the dense-direct reference raises
    IntegrityError instead of reporting a fast-but-wrong time. `tune=False`
    skips the sub-batch search and uses `sub_batch_size` directly (sweeps
    re-timing one shape many times use this).
    """
    sh = spec.shape.with_batch(batch)
    if estimate_bytes(sh, batch) > memory_budget:
        log.warning("skipping %s: working set above memory budget", spec.name)
        return []
    if weights is None:
        weights = make_layer_weights(spec, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x32 = rng.standard_normal((batch, sh.c, sh.h, sh.w)).astype(np.float32)
    bias32 = rng.standard_normal(sh.k).astype(np.float32)
    ref = conv_dense_direct(x32, ConvLayerDense(weights, bias32, sh.stride, sh.padding))
    one_d = sh.h == 1 and sh.r == 1
    sparse_fn = conv_sparse_1d if one_d else conv_sparse

    records = []
    for dtype in profiles:
        if dtype == "f32":
            x, w, b = x32, weights, bias32
        elif dtype == "f16":
            x, w, b = (x32.astype(np.float16), weights.astype(np.float16),
                       bias32.astype(np.float16))
        else:
            raise ShapeError(f"unknown dtype profile {dtype!r}")
        kernel = build_csr(w, sh, unify=True)
        if tune:
            best_sb, _ = tune_sub_batch(x, kernel, b, candidates=_SUB_BATCH_CHOICES,
                                        worker_count=worker_count)
        else:
            best_sb = sub_batch_size
        plan = EnginePlan(sub_batch_size=best_sb, worker_count=worker_count)
        layer = ConvLayerDense(w, b, sh.stride, sh.padding)
        candidates = [
            ("sparse-direct", best_sb, lambda: sparse_fn(x, kernel, b, plan),
             sparse_mac_count(kernel, batch)),
            ("dense-direct", None, lambda: conv_dense_direct(x, layer),
             dense_mac_count(sh, batch)),
            ("dense-gemm", None, lambda: conv_dense_gemm(x, layer),
             dense_mac_count(sh, batch)),
        ]
        candidates = [c for c in candidates if c[0] in algorithms]
        for algorithm, sb, fn, macs in candidates:
            _check(fn(), ref, dtype, spec.name, algorithm)
            med, iqr, mean = _time_ms(fn, repetitions, warmups)
            records.append(BenchRecord(
                layer=spec.name, algorithm=algorithm, dtype=dtype,
                sub_batch_size=sb, median_ms=med, iqr_ms=iqr, mean_ms=mean,
                repetitions=repetitions, mac_count=macs, sparsity=spec.sparsity))
    return records


# ---------------------------------------------------------------------------
# sparsity sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    layer: str
    sparsities: list[float]
    sparse_ms: list[float]
    dense_ms: float             # best dense baseline (constant in sparsity)
    crossover: float | None     # None means "never"

    @property
    def crossover_label(self) -> str:
        return "never" if self.crossover is None else f"{self.crossover:.3f}"


def sparsity_sweep(spec: LayerSpec, sparsities, batch: int = 32,
                   repetitions: int = 5, warmups: int = 2, seed: int = 0,
                   worker_count: int = 1, dense_algorithms=("dense-gemm",),
                   tune: bool = False, sub_batch_size: int = 8) -> SweepResult:
    """Time sparse-direct across sparsity levels and interpolate the sparsity
    where it matches the best dense baseline ("never" if it stays slower).

    The dense baseline is timed once (its cost does not depend on sparsity);
    dense-direct is excluded by default since dense-gemm dominates it on
    every shape this harness covers.
    """
    sparsities = sorted(sparsities)
    if len(sparsities) < 3:
        raise ShapeError("sparsity sweep needs at least 3 points")
    sparse_ms = []
    dense_ms = math.inf
    for i, s in enumerate(sparsities):
        algos = ("sparse-direct",) + (tuple(dense_algorithms) if i == 0 else ())
        recs = bench_layer(LayerSpec(spec.name, spec.shape, s, spec.source),
                           batch=batch, profiles=("f32",),
                           repetitions=repetitions, warmups=warmups, seed=seed,
                           worker_count=worker_count, algorithms=algos,
                           tune=tune, sub_batch_size=sub_batch_size)
        by_algo = {r.algorithm: r.median_ms for r in recs}
        sparse_ms.append(by_algo["sparse-direct"])
        dense_ms = min([dense_ms] + [by_algo[a] for a in dense_algorithms
                                     if a in by_algo])

    crossover = None
    if sparse_ms[0] <= dense_ms:
        crossover = sparsities[0]
    else:
        for i in range(1, len(sparsities)):
            if sparse_ms[i] <= dense_ms:
                s0, s1 = sparsities[i - 1], sparsities[i]
                t0, t1 = sparse_ms[i - 1], sparse_ms[i]
                frac = (t0 - dense_ms) / (t0 - t1) if t0 != t1 else 1.0
                crossover = s0 + frac * (s1 - s0)
                break
    return SweepResult(spec.name, list(sparsities), sparse_ms, dense_ms, crossover)


# ---------------------------------------------------------------------------
# network configuration
# ---------------------------------------------------------------------------

@dataclass
class NetworkConfig:
    """Per-layer execution plan: chosen algorithm = argmin measured median,
    ties broken toward dense."""

    batch: int
    choices: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"batch": self.batch, "choices": self.choices},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        doc = json.loads(text)
        return cls(batch=doc["batch"], choices=doc["choices"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "NetworkConfig":
        return cls.from_json(Path(path).read_text())


def configure_network(model, batch: int = 32, repetitions: int = 5,
                      warmups: int = 2, seed: int = 0, worker_count: int = 1,
                      memory_budget: int = 4 * 1024**3) -> NetworkConfig:
    """Bench every conv layer of a stored model at its real sparsity and pick
    the fastest algorithm per layer. Unmeasurable layers fall back to
    dense-direct with a warning."""
    config = NetworkConfig(batch=batch)
    x = model._probe_input()
    for layer in model.conv_layers:
        shape = layer.conv_shape(x)
        spec = LayerSpec(layer.name, shape, layer.sparsity(), source="model-file")
        records = bench_layer(spec, batch=batch, profiles=("f32",),
                              repetitions=repetitions, warmups=warmups,
                              seed=seed, worker_count=worker_count,
                              memory_budget=memory_budget,
                              weights=layer.dense_weights().astype(np.float32))
        if not records:
            log.warning("layer %s unmeasurable; defaulting to dense-direct",
                        layer.name)
            config.choices[layer.name] = {"algorithm": "dense-direct",
                                          "sub_batch_size": None,
                                          "median_ms": {}}
        else:
            medians = {r.algorithm: r.median_ms for r in records}
            best_dense = min(("dense-direct", "dense-gemm"), key=medians.get)
            chosen = best_dense
            if medians["sparse-direct"] < medians[best_dense]:
                chosen = "sparse-direct"
            sb = next(r.sub_batch_size for r in records
                      if r.algorithm == "sparse-direct")
            config.choices[layer.name] = {
                "algorithm": chosen,
                "sub_batch_size": sb if chosen == "sparse-direct" else None,
                "median_ms": medians,
            }
        x = np.zeros((1, shape.k, shape.e, shape.f), dtype=np.float32)
    return config


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("layer", "sparsity", "subBatchSize",
                  "sparse-f32", "dense-f32", "sparse-f16", "dense-f16")


def _pivot(records: list[BenchRecord]) -> list[dict]:
    """One row per (layer, sparsity); dense columns take the faster dense
    baseline, mirroring a library that picks its own algorithm."""
    rows: dict[tuple, dict] = {}
    for r in records:
        key = (r.layer, r.sparsity)
        row = rows.setdefault(key, {c: "" for c in REPORT_COLUMNS})
        # sparsity rendered as percent, matching the preset definitions
        row["layer"], row["sparsity"] = r.layer, float(f"{r.sparsity * 100:g}")
        if r.algorithm == "sparse-direct":
            row[f"sparse-{r.dtype}"] = round(r.median_ms, 4)
            if r.dtype == "f32":
                row["subBatchSize"] = r.sub_batch_size
        else:
            col = f"dense-{r.dtype}"
            prev = row[col]
            val = round(r.median_ms, 4)
            row[col] = val if prev == "" else min(prev, val)
    return [rows[k] for k in sorted(rows, key=lambda k: (str(k[0]), k[1]))]


def emit_report(records: list[BenchRecord], fmt: str, path) -> None:
    """Write the pivoted report as csv, json, or a markdown table."""
    rows = _pivot(records)
    path = Path(path)
    if fmt == "csv":
        import csv
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    elif fmt == "json":
        path.write_text(json.dumps(rows, indent=2))
    elif fmt == "markdown":
        lines = ["| " + " | ".join(REPORT_COLUMNS) + " |",
                 "|" + "---|" * len(REPORT_COLUMNS)]
        for row in rows:
            lines.append("| " + " | ".join(str(row[c]) for c in REPORT_COLUMNS) + " |")
        path.write_text("\n".join(lines) + "\n")
    else:
        raise ShapeError(f"unknown report format {fmt!r}")


def records_to_json(records: list[BenchRecord]) -> str:
    return json.dumps([asdict(r) for r in records], indent=2)
