"""Acceptance suite: eight end-to-end criteria, one printed verdict line each.

Each test prints `ACCEPTANCE <n>: PASS/FAIL - <detail>` on the terminal
(bypassing capture) so the suite doubles as a checklist run.
"""
import json
import os
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from sparseconv.bench import (PRESETS, LayerSpec, NetworkConfig, bench_layer,
                              sparsity_sweep)
from sparseconv.cli import main as cli_main
from sparseconv.csr import analyze_sparsity, build_csr, decompress
from sparseconv.dense import ConvLayerDense, conv_dense_direct, conv_dense_gemm
from sparseconv.datasets import split_train_val, synthetic_blobs
from sparseconv.engine import EnginePlan, conv_sparse
from sparseconv.pruning import PruneConfig, prune_run
from sparseconv.quantize import (apply_quantization, fit_fixed_point,
                                 quantize_fixed)
from sparseconv.shapes import ConvShape
from sparseconv.store import Model, load_model
from sparseconv.toynet import ToyNet, train_batches

from conftest import random_sparse_weights


def report(capsys, number, passed, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")
    assert passed, f"acceptance criterion {number} failed: {detail}"


def rel_ok(out, ref, tol):
    out64, ref64 = out.astype(np.float64), ref.astype(np.float64)
    return bool(np.all(np.abs(out64 - ref64) <= tol * (np.abs(ref64) + 1.0)))


def random_config(rng):
    """One valid layer configuration inside the criterion-1 envelope."""
    while True:
        n = int(rng.integers(1, 5))
        c = int(rng.integers(1, 33))
        k = int(rng.integers(1, 33))
        r = int(rng.choice([1, 2, 3, 5]))
        s = int(rng.choice([1, 2, 3, 5]))
        h = int(rng.integers(1, 33))
        w = int(rng.integers(1, 33))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        sparsity = float(rng.choice([0.0, 0.5, 0.77, 0.9, 0.95, 1.0]))
        try:
            shape = ConvShape(n=n, c=c, h=h, w=w, k=k, r=r, s=s,
                              stride=stride, padding=padding)
        except Exception:
            continue
        return shape, sparsity


class TestCriterion1:
    def test_oracle_equivalence(self, capsys):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        n_configs = 200
        worst = 0.0
        for i in range(n_configs):
            shape, sparsity = random_config(rng)
            x = rng.standard_normal(
                (shape.n, shape.c, shape.h, shape.w)).astype(np.float32)
            w = random_sparse_weights(rng, shape.k, shape.c, shape.r, shape.s,
                                      sparsity)
            bias = rng.standard_normal(shape.k).astype(np.float32)
            layer = ConvLayerDense(w, bias, shape.stride, shape.padding)
            ref = conv_dense_direct(x, layer)
            kern = build_csr(w, shape)
            assert rel_ok(conv_sparse(x, kern, bias), ref, 1e-4)
            assert rel_ok(conv_dense_gemm(x, layer), ref, 1e-4)
            if i % 5 == 0:  # f16 storage profile subset
                x16, w16, b16 = (x.astype(np.float16), w.astype(np.float16),
                                 bias.astype(np.float16))
                l16 = ConvLayerDense(w16, b16, shape.stride, shape.padding)
                ref16 = conv_dense_direct(x16, l16)
                k16 = build_csr(w16, shape)
                assert rel_ok(conv_sparse(x16, k16, b16), ref16, 1e-2)
                assert rel_ok(conv_dense_gemm(x16, l16), ref16, 1e-2)
        elapsed = time.perf_counter() - t0
        report(capsys, 1, elapsed < 120,
               f"{n_configs} random configs agree within 1e-4 (f32) / "
               f"1e-2 (f16 subset) in {elapsed:.1f}s (< 120s)")


class TestCriterion2:
    def test_csr_invariants(self, capsys):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        n_cases = 10_000
        for i in range(n_cases):
            k = int(rng.integers(1, 5))
            c = int(rng.integers(1, 5))
            r = int(rng.integers(1, 4))
            s = int(rng.integers(1, 4))
            sparsity = float(rng.random())
            w = random_sparse_weights(rng, k, c, r, s, sparsity)
            shape = ConvShape(n=1, c=c, h=max(r, 3), w=max(s, 3), k=k, r=r, s=s)
            kern = build_csr(w, shape)
            kern.validate()
            assert np.all(np.diff(kern.rowptr) == kern.sparse_level)
            for ki in range(k):
                seg = kern.colidx[kern.rowptr[ki]:kern.rowptr[ki + 1]]
                assert np.all(np.diff(seg) > 0)
            assert np.array_equal(decompress(kern), w)
            if i % 200 == 0:  # padding-neutral: promoted zeros change nothing
                x = rng.standard_normal(
                    (1, c, shape.h, shape.w)).astype(np.float32)
                bias = np.zeros(k, np.float32)
                ref = conv_dense_direct(x, ConvLayerDense(w, bias))
                assert rel_ok(conv_sparse(x, kern, bias), ref, 1e-4)
        elapsed = time.perf_counter() - t0
        report(capsys, 2, elapsed < 60,
               f"{n_cases} random CSR cases hold all invariants in "
               f"{elapsed:.1f}s (< 60s)")


class TestCriterion3:
    def test_plan_worker_determinism(self, capsys):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((4, 8, 16, 16)).astype(np.float32)
        w = random_sparse_weights(rng, 16, 8, 3, 3, 0.9)
        bias = rng.standard_normal(16).astype(np.float32)
        shape = ConvShape(n=4, c=8, h=16, w=16, k=16, r=3, s=3, padding=1)
        kern = build_csr(w, shape)
        max_workers = os.cpu_count() or 1
        outputs = []
        for sb in (1, 2, 4, 8, 16):
            for wc in (1, 2, max_workers):
                outputs.append(conv_sparse(
                    x, kern, bias, EnginePlan(sub_batch_size=sb, worker_count=wc)))
        identical = all(np.array_equal(outputs[0], o) for o in outputs[1:])
        report(capsys, 3, identical,
               f"bit-identical across sub-batch {{1,2,4,8,16}} x workers "
               f"{{1,2,{max_workers}}} ({len(outputs)} runs)")


class TestCriterion4:
    def test_gradient_correctness(self, capsys):
        net = ToyNet(conv_channels=(3, 3), num_classes=3, image_size=8,
                     dtype=np.float64, seed=4)
        rng = np.random.default_rng(5)
        x = rng.standard_normal((4, 1, 8, 8))
        y = rng.integers(0, 3, size=4)
        _, grads = net.loss_and_grads(x, y)
        eps = 1e-6
        worst = 0.0
        for name, p in net.params.items():
            flat = p.ravel()
            idxs = rng.choice(flat.size, size=min(12, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                lp, _ = net.loss_and_grads(x, y)
                flat[i] = orig - eps
                lm, _ = net.loss_and_grads(x, y)
                flat[i] = orig
                numeric = (lp - lm) / (2 * eps)
                analytic = grads[name].ravel()[i]
                rel = abs(numeric - analytic) / max(abs(numeric),
                                                    abs(analytic), 1e-8)
                worst = max(worst, rel)
        report(capsys, 4, worst < 1e-4,
               f"2-conv + dense net: worst finite-difference rel error "
               f"{worst:.2e} (< 1e-4)")


@pytest.fixture(scope="module")
def pruned():
    """Shared by criteria 5 and 6: prune the toy task and keep the context."""
    x, y = synthetic_blobs(800, seed=3)
    config = PruneConfig(iter_nr=250, batch_nr=40, pool_size=4,
                         target_sparsity=0.8, initial_sparsity_range=(0.2, 0.4),
                         mask_increment=0.05, acc_threshold=0.02, seed=0)
    x_tr, y_tr, x_val, y_val = split_train_val(x, y, config.val_fraction,
                                               config.seed)
    # dense baseline: same architecture and data, no pruning
    dense_net = ToyNet(seed=0)
    train_batches(dense_net, x_tr, y_tr, steps=1000, lr=config.lr,
                  batch_size=config.batch_size, masks=None,
                  rng=np.random.default_rng(0))
    dense_acc = dense_net.accuracy(x_val, y_val)

    net = ToyNet(seed=0)
    t0 = time.perf_counter()
    best, history = prune_run(config, net, (x, y))
    elapsed = time.perf_counter() - t0
    model = Model.from_toynet(net)
    return {"best": best, "elapsed": elapsed, "dense_acc": dense_acc,
            "model": model, "val": (x_val, y_val)}


class TestCriterion5:
    def test_pruning_efficacy(self, capsys, pruned):
        best, dense_acc = pruned["best"], pruned["dense_acc"]
        ws = best.weighted_sparsity()
        ok = (ws >= 0.8 and best.accuracy >= dense_acc - 0.02
              and pruned["elapsed"] < 600)
        report(capsys, 5, ok,
               f"weighted sparsity {ws:.3f} (>= 0.8), accuracy "
               f"{best.accuracy:.3f} vs dense {dense_acc:.3f} (drop <= 2 pts), "
               f"{pruned['elapsed']:.0f}s (< 600s)")


class TestCriterion6:
    def test_quantization_fidelity(self, capsys, pruned):
        import copy
        # The 160-sample validation split quantizes accuracy in 0.00625 steps,
        # coarser than the 0.005 tolerance; a larger held-out draw from the
        # same task (fixed class templates, fresh noise) gives 0.0005 steps.
        x_val, y_val = synthetic_blobs(2000, seed=13)
        base_acc = pruned["model"].accuracy(x_val, y_val)
        deltas = {}
        for scheme in ("affine:16", "codebook:16"):
            m = copy.deepcopy(pruned["model"])
            apply_quantization(m, scheme)
            deltas[scheme] = abs(m.accuracy(x_val, y_val) - base_acc)
        # exhaustive fixed-point round trip on a 10^5-point grid
        p = fit_fixed_point([1.9], 16)
        hi = 2.0 ** p.int_bits - p.sigma
        grid = np.linspace(-(2.0 ** p.int_bits), hi, 100_000)
        max_err = float(np.max(np.abs(quantize_fixed(grid, p) - grid)))
        ok = all(d < 0.005 for d in deltas.values()) and max_err <= p.sigma / 2
        report(capsys, 6, ok,
               f"accuracy delta affine:16 {deltas['affine:16']:.4f}, "
               f"codebook:16 {deltas['codebook:16']:.4f} (< 0.005); "
               f"fixed-point max err {max_err:.2e} <= sigma/2 "
               f"({p.sigma / 2:.2e}) on 1e5 grid")


class TestCriterion7:
    def test_monotone_in_sparsity(self, capsys):
        spec = PRESETS["cnn-non-static"][0]
        levels = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
        res = sparsity_sweep(spec, levels, batch=32, repetitions=5, warmups=2)
        rho = float(spearmanr(levels, res.sparse_ms).statistic)
        report(capsys, "7a", rho <= -0.9,
               f"sparse-direct time vs sparsity over {len(levels)} points: "
               f"Spearman rho {rho:.3f} (<= -0.9)")

    def test_sparse_beats_dense_at_95(self, capsys):
        verdicts = []
        for preset, idx in (("resnet-1x1", 0), ("cnn-non-static", 0)):
            base = PRESETS[preset][idx]
            spec = LayerSpec(base.name, base.shape, 0.95, base.source)
            recs = bench_layer(spec, batch=32, profiles=("f32",),
                               repetitions=9, warmups=2,
                               algorithms=("sparse-direct", "dense-gemm"),
                               tune=False, sub_batch_size=8)
            med = {r.algorithm: r.median_ms for r in recs}
            verdicts.append((preset, med["sparse-direct"], med["dense-gemm"]))
        ok = all(s < d for _, s, d in verdicts)
        detail = "; ".join(f"{p}: sparse {s:.2f}ms < dense-gemm {d:.2f}ms"
                           for p, s, d in verdicts)
        report(capsys, "7b", ok, f"95% sparsity, median of 9 runs - {detail}")

    def test_crossover_ordering(self, capsys):
        one_d = sparsity_sweep(PRESETS["cnn-non-static"][0],
                               [0.8, 0.85, 0.9, 0.925, 0.95, 0.975],
                               batch=32, repetitions=5, warmups=1)
        vgg = sparsity_sweep(PRESETS["vgg16"][-1],
                             [0.90, 0.95, 0.975, 0.99],
                             batch=32, repetitions=5, warmups=1)
        ok = (one_d.crossover is not None and vgg.crossover is not None
              and one_d.crossover < vgg.crossover)
        report(capsys, "7c", ok,
               f"1D crossover {one_d.crossover_label} < VGG 3x3 crossover "
               f"{vgg.crossover_label} (matches the low-vs-high ordering)")


class TestCriterion8:
    def test_pipeline_integration(self, capsys, tmp_path):
        cfg = tmp_path / "prune.json"
        cfg.write_text(json.dumps({
            "dataset": {"n_samples": 200},
            "prune": {"iter_nr": 30, "batch_nr": 10, "pool_size": 3},
        }))
        model_dir = tmp_path / "model"
        codes = [cli_main(["prune", "--config", str(cfg),
                           "--out", str(model_dir)])]
        codes.append(cli_main(["quantize", "--model", str(model_dir),
                               "--scheme", "codebook:16"]))
        codes.append(cli_main(["build-csr", "--model", str(model_dir)]))
        net_cfg = tmp_path / "net.json"
        codes.append(cli_main(["configure", "--model", str(model_dir),
                               "--out", str(net_cfg),
                               "--batch", "8", "--repetitions", "3"]))
        x, y = synthetic_blobs(32, seed=11)
        npz = tmp_path / "in.npz"
        np.savez(npz, x=x, y=y)
        codes.append(cli_main(["infer", "--model", str(model_dir),
                               "--config", str(net_cfg), "--input", str(npz),
                               "--out", str(tmp_path / "p.npy")]))
        model = load_model(model_dir)
        configured = model.forward(x, NetworkConfig.load(net_cfg))
        all_dense = model.forward(
            x, {l.name: {"algorithm": "dense-gemm"} for l in model.conv_layers})
        agree = rel_ok(configured, all_dense, 1e-3)
        ok = all(c == 0 for c in codes) and agree
        report(capsys, 8, ok,
               f"prune/quantize/build-csr/configure/infer exit codes {codes}; "
               f"configured inference matches all-dense within 1e-3: {agree}")
