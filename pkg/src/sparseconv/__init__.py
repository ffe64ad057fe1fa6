"""CPU toolkit for compressing CNNs and running them with direct sparse
convolution: evolutionary pruning with retraining, linear and codebook
quantization, a unified-sparsity CSR weight format, and a benchmark-driven
per-layer algorithm configurator.
"""
from .bench import (LayerSpec, NetworkConfig, PRESETS, BenchRecord,
                    bench_layer, configure_network, emit_report,
                    sparsity_sweep)
from .csr import (CsrKernel, SparsityReport, analyze_sparsity, build_csr,
                  decompress)
from .dense import ConvLayerDense, conv_dense_direct, conv_dense_gemm
from .engine import (EnginePlan, conv_sparse, conv_sparse_1d,
                     conv_sparse_reference, dense_mac_count, sparse_mac_count,
                     tune_sub_batch)
from .errors import (FormatError, IntegrityError, ShapeError, SparseConvError,
                     TrainingError)
from .pruning import EvolutionaryPruner, PruneConfig, Solution, prune_run
from .quantize import (AffineQuantizer, Codebook, CodebookQuantizer,
                       FixedPointQuantizer, apply_quantization,
                       build_codebook, calibrate_saturation, fit_affine_int,
                       fit_fixed_point, quantize_affine_int, quantize_fixed)
from .shapes import ConvShape, output_shape
from .store import Model, load_model, save_model
from .toynet import ToyNet, train_batches

__version__ = "0.1.0"

__all__ = [
    "AffineQuantizer", "BenchRecord", "Codebook", "CodebookQuantizer",
    "ConvLayerDense", "ConvShape", "CsrKernel", "EnginePlan",
    "EvolutionaryPruner", "FixedPointQuantizer", "FormatError",
    "IntegrityError", "LayerSpec", "Model", "NetworkConfig", "PRESETS",
    "PruneConfig", "ShapeError", "Solution", "SparseConvError",
    "SparsityReport", "ToyNet", "TrainingError", "analyze_sparsity",
    "apply_quantization", "bench_layer", "build_codebook", "build_csr",
    "calibrate_saturation", "configure_network", "conv_dense_direct",
    "conv_dense_gemm", "conv_sparse", "conv_sparse_1d",
    "conv_sparse_reference", "decompress", "dense_mac_count", "emit_report",
    "fit_affine_int", "fit_fixed_point", "load_model", "output_shape",
    "prune_run", "quantize_affine_int", "quantize_fixed", "save_model",
    "sparse_mac_count", "sparsity_sweep", "train_batches", "tune_sub_batch",
]
