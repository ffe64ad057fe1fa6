"""Command-line surface for the prune → quantize → build-csr → configure →
infer pipeline.

Exit codes: 0 success, 2 invalid arguments (argparse), 3 file-format error,
4 invariant violation (shape, integrity, or training failure).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .bench import (LayerSpec, NetworkConfig, PRESETS, bench_layer,
                    configure_network, emit_report)
from .datasets import load_dataset_npz, synthetic_blobs, split_train_val
from .errors import FormatError, SparseConvError
from .pruning import PruneConfig, prune_run
from .quantize import apply_quantization
from .store import Model, load_model, save_model
from .toynet import ToyNet

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FORMAT = 3
EXIT_INVARIANT = 4

# Toy-preset defaults: a seeded synthetic task plus a pruning schedule that
# reaches >=0.8 weighted sparsity on it within minutes on one core.
DEFAULT_PRUNE_DOC = {
    "dataset": {"type": "synthetic", "n_samples": 800, "num_classes": 4,
                "image_size": 12, "channels": 1, "noise": 0.35, "seed": 3},
    "network": {"conv_channels": [8, 8], "kernel_size": 3, "seed": 0},
    "prune": {"iter_nr": 250, "batch_nr": 40, "pool_size": 4,
              "target_sparsity": 0.8, "initial_sparsity_range": [0.2, 0.4],
              "mask_increment": 0.05, "acc_threshold": 0.02, "seed": 0},
}


def _env_workers(args) -> int:
    if args.workers is not None:
        return args.workers
    return int(os.environ.get("SPARSECONV_WORKERS", "1"))


def _load_dataset(doc: dict):
    if doc.get("type", "synthetic") == "synthetic":
        keys = ("n_samples", "num_classes", "image_size", "channels",
                "noise", "seed")
        kwargs = {k: doc[k] for k in keys if k in doc}
        return synthetic_blobs(**kwargs)
    if doc["type"] == "npz":
        return load_dataset_npz(doc["path"])
    raise FormatError(f"unknown dataset type {doc.get('type')!r}")


def _merge(base: dict, override: dict) -> dict:
    out = {k: dict(v) for k, v in base.items()}
    for section, values in override.items():
        if section not in out:
            raise FormatError(f"unknown config section {section!r}")
        out[section].update(values)
    return out


def cmd_prune(args) -> int:
    doc = DEFAULT_PRUNE_DOC
    if args.config:
        doc = _merge(doc, json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        doc["prune"]["seed"] = args.seed
    x, y = _load_dataset(doc["dataset"])
    net_doc = doc["network"]
    net = ToyNet(in_channels=x.shape[1], image_size=x.shape[2],
                 conv_channels=tuple(net_doc["conv_channels"]),
                 kernel_size=net_doc["kernel_size"],
                 num_classes=int(y.max()) + 1, seed=net_doc["seed"])
    pcfg = doc["prune"]
    if "initial_sparsity_range" in pcfg:
        pcfg = dict(pcfg)
        pcfg["initial_sparsity_range"] = tuple(pcfg["initial_sparsity_range"])
    config = PruneConfig(**pcfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    best, history = prune_run(config, net, (x, y),
                              log_path=args.log or out_dir / "prune_log.jsonl")
    net.set_weights(best.weights)
    model = Model.from_toynet(net, meta={
        "pruning": {
            "weighted_sparsity": best.weighted_sparsity(),
            "validation_accuracy": best.accuracy,
            "layer_sparsities": {k: float(v) for k, v in best.sparsities.items()},
            "iterations": len(history),
        }})
    save_model(model, out_dir)
    # echo the fully resolved configuration for reproducibility
    resolved = {"dataset": doc["dataset"], "network": doc["network"],
                "prune": asdict(config)}
    (out_dir / "prune_config.json").write_text(json.dumps(resolved, indent=2))
    print(f"pruned model: weighted sparsity {best.weighted_sparsity():.3f}, "
          f"validation accuracy {best.accuracy:.3f} -> {out_dir}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = load_model(args.model)
    targets = tuple(t.strip() for t in args.targets.split(","))
    calib = None
    if "activations" in targets:
        if args.calib:
            calib, _ = load_dataset_npz(args.calib)
        else:
            calib, _ = _load_dataset(DEFAULT_PRUNE_DOC["dataset"])
        calib = calib[:64]
    apply_quantization(model, args.scheme, targets=targets, calib_data=calib,
                       seed=args.seed or 0)
    save_model(model, args.out or args.model)
    print(f"quantized with {args.scheme} on {','.join(targets)} "
          f"-> {args.out or args.model}")
    return EXIT_OK


def cmd_build_csr(args) -> int:
    model = load_model(args.model)
    reports = model.build_csr_all(unify=not args.no_unify)
    for name, rep in reports.items():
        print(f"{name}: sparsity {rep.layer_sparsity:.3f}, "
              f"unified nnz/channel {rep.unified_nnz}, "
              f"padding zeros {rep.padded_zero_count}")
    save_model(model, args.out or args.model)
    return EXIT_OK


def cmd_bench(args) -> int:
    worker_count = _env_workers(args)
    profiles = tuple(d.strip() for d in args.dtypes.split(","))
    if args.preset:
        if args.preset not in PRESETS:
            raise FormatError(f"unknown preset {args.preset!r}; "
                              f"choose from {sorted(PRESETS)}")
        specs = PRESETS[args.preset]
    else:
        model = load_model(args.model)
        x = model._probe_input()
        specs = []
        for layer in model.conv_layers:
            shape = layer.conv_shape(x)
            specs.append(LayerSpec(layer.name, shape.with_batch(1),
                                   layer.sparsity(), source="model-file"))
            x = np.zeros((1, shape.k, shape.e, shape.f), dtype=np.float32)
    records = []
    for spec in specs:
        records.extend(bench_layer(spec, batch=args.batch, profiles=profiles,
                                   repetitions=args.repetitions,
                                   seed=args.seed or 0,
                                   worker_count=worker_count,
                                   memory_budget=args.memory_budget))
    report_path = Path(args.report)
    if report_dir := os.environ.get("SPARSECONV_REPORT_DIR"):
        report_path = Path(report_dir) / report_path.name
    fmt = {".csv": "csv", ".json": "json", ".md": "markdown"}.get(
        report_path.suffix, "csv")
    emit_report(records, fmt, report_path)
    for row in bench_mod._pivot(records):
        print("  ".join(f"{c}={row[c]}" for c in bench_mod.REPORT_COLUMNS))
    print(f"report written to {report_path}")
    return EXIT_OK


def cmd_configure(args) -> int:
    model = load_model(args.model)
    config = configure_network(model, batch=args.batch,
                               repetitions=args.repetitions,
                               seed=args.seed or 0,
                               worker_count=_env_workers(args))
    config.save(args.out)
    for name, choice in config.choices.items():
        print(f"{name}: {choice['algorithm']}"
              + (f" (sub-batch {choice['sub_batch_size']})"
                 if choice["sub_batch_size"] else ""))
    print(f"network configuration written to {args.out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = load_model(args.model)
    config = NetworkConfig.load(args.config) if args.config else None
    with np.load(args.input) as data:
        if "x" not in data:
            raise FormatError("input file must contain array 'x'")
        x = data["x"].astype(np.float32)
        y = data["y"] if "y" in data else None
    preds = model.predict(x, config)
    if args.out:
        np.save(args.out, preds)
        print(f"predictions written to {args.out}")
    else:
        print(" ".join(map(str, preds.tolist())))
    if y is not None:
        print(f"accuracy: {float(np.mean(preds == y)):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseconv",
        description="Prune, quantize, compress, benchmark, and run CNNs with "
                    "direct sparse convolution.")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None,
                       help="engine worker count (env: SPARSECONV_WORKERS)")

    p = sub.add_parser("prune", help="evolutionary pruning with retraining")
    p.add_argument("--config", help="JSON config (defaults: toy preset)")
    p.add_argument("--out", required=True, help="output model directory")
    p.add_argument("--log", help="JSONL training log path")
    common(p)
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("quantize", help="post-training quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--scheme", required=True,
                   help="fixed:<bits> | affine:<bits> | codebook:<centroids>")
    p.add_argument("--targets", default="weights",
                   help="comma list of weights,activations")
    p.add_argument("--calib", help="npz calibration data for activations")
    p.add_argument("--out", help="output directory (default: in place)")
    common(p)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("build-csr", help="compress conv layers to CSR")
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="output directory (default: in place)")
    p.add_argument("--no-unify", action="store_true",
                   help="skip per-channel nnz unification")
    common(p)
    p.set_defaults(fn=cmd_build_csr)

    p = sub.add_parser("bench", help="time sparse vs dense per layer")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", help="|".join(sorted(PRESETS)))
    group.add_argument("--model")
    p.add_argument("--batch", type=int, default=bench_mod.DEFAULT_BATCH)
    p.add_argument("--dtypes", default="f32,f16")
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--report", default="bench_report.csv",
                   help="output file; .csv/.json/.md picks the format "
                        "(env: SPARSECONV_REPORT_DIR)")
    p.add_argument("--memory-budget", type=int, default=4 * 1024**3)
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("configure", help="choose per-layer algorithms by timing")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="network config JSON path")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--repetitions", type=int, default=5)
    common(p)
    p.set_defaults(fn=cmd_configure)

    p = sub.add_parser("infer", help="run a stored model on an input tensor")
    p.add_argument("--model", required=True)
    p.add_argument("--config", help="network config JSON from `configure`")
    p.add_argument("--input", required=True, help="npz with array 'x'")
    p.add_argument("--out", help="write predictions to this .npy file")
    common(p)
    p.set_defaults(fn=cmd_infer)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except SparseConvError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
