import json

import numpy as np
import pytest

from sparseconv.cli import EXIT_FORMAT, EXIT_OK, main
from sparseconv.datasets import synthetic_blobs
from sparseconv.store import load_model

SHORT_PRUNE = {
    "dataset": {"n_samples": 64},
    "network": {"conv_channels": [4]},
    "prune": {"iter_nr": 2, "batch_nr": 2, "pool_size": 2,
              "initial_sparsity_range": [0.3, 0.5]},
}


@pytest.fixture()
def pruned_model_dir(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SHORT_PRUNE))
    out = tmp_path / "model"
    assert main(["prune", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return out


class TestArguments:
    def test_no_command_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["bench", "--preset", "vgg16", "--frobnicate"])
        assert exc.value.code == 2

    def test_unknown_preset_exits_3(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPARSECONV_REPORT_DIR", str(tmp_path))
        assert main(["bench", "--preset", "nonesuch"]) == EXIT_FORMAT

    def test_unknown_config_section_exits_3(self, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"nonsense": {}}))
        assert main(["prune", "--config", str(cfg),
                     "--out", str(tmp_path / "m")]) == EXIT_FORMAT


class TestPrune:
    def test_outputs_are_loadable(self, pruned_model_dir):
        model = load_model(pruned_model_dir)
        assert len(model.conv_layers) == 1
        assert "pruning" in model.meta
        assert (pruned_model_dir / "prune_config.json").exists()
        assert (pruned_model_dir / "prune_log.jsonl").exists()
        resolved = json.loads(
            (pruned_model_dir / "prune_config.json").read_text())
        assert resolved["prune"]["iter_nr"] == 2

    def test_zero_iterations(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        doc = json.loads(json.dumps(SHORT_PRUNE))
        doc["prune"]["iter_nr"] = 0
        cfg.write_text(json.dumps(doc))
        out = tmp_path / "model"
        assert main(["prune", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
        model = load_model(out)
        w = model.conv_layers[0].weight_values()
        assert np.mean(w == 0) >= 0.25  # initial sparsity range applied


class TestPipeline:
    def test_quantize_build_csr_configure_infer(self, tmp_path, pruned_model_dir):
        m = str(pruned_model_dir)
        assert main(["quantize", "--model", m, "--scheme", "codebook:16"]) == EXIT_OK
        assert main(["build-csr", "--model", m]) == EXIT_OK
        model = load_model(pruned_model_dir)
        assert model.conv_layers[0].storage == "csr"

        cfg_path = tmp_path / "net.json"
        assert main(["configure", "--model", m, "--out", str(cfg_path),
                     "--batch", "4", "--repetitions", "2"]) == EXIT_OK
        assert json.loads(cfg_path.read_text())["choices"]

        x, y = synthetic_blobs(16, seed=9)
        npz = tmp_path / "in.npz"
        np.savez(npz, x=x, y=y)
        preds_path = tmp_path / "preds.npy"
        assert main(["infer", "--model", m, "--config", str(cfg_path),
                     "--input", str(npz), "--out", str(preds_path)]) == EXIT_OK
        preds = np.load(preds_path)
        assert preds.shape == (16,)
        # configured inference matches unconfigured inference
        assert main(["infer", "--model", m, "--input", str(npz),
                     "--out", str(tmp_path / "p2.npy")]) == EXIT_OK
        assert np.array_equal(preds, np.load(tmp_path / "p2.npy"))

    def test_infer_missing_x_exits_3(self, tmp_path, pruned_model_dir):
        npz = tmp_path / "bad.npz"
        np.savez(npz, z=np.zeros(3))
        assert main(["infer", "--model", str(pruned_model_dir),
                     "--input", str(npz)]) == EXIT_FORMAT


class TestBench:
    def test_preset_report(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SPARSECONV_REPORT_DIR", str(tmp_path))
        assert main(["bench", "--preset", "cnn-non-static", "--batch", "4",
                     "--repetitions", "2", "--dtypes", "f32",
                     "--report", "r.csv"]) == EXIT_OK
        text = (tmp_path / "r.csv").read_text()
        for s in ("77", "83", "87.5"):
            assert s in text
        out = capsys.readouterr().out
        assert "report written" in out

    def test_model_bench_markdown(self, tmp_path, monkeypatch, pruned_model_dir):
        monkeypatch.setenv("SPARSECONV_REPORT_DIR", str(tmp_path))
        assert main(["bench", "--model", str(pruned_model_dir), "--batch", "4",
                     "--repetitions", "2", "--dtypes", "f32",
                     "--report", "r.md"]) == EXIT_OK
        assert (tmp_path / "r.md").read_text().startswith("| layer |")


class TestCorruptModel:
    def test_corrupt_model_exits_3(self, tmp_path, pruned_model_dir):
        blob = next(pruned_model_dir.glob("*.bin"))
        data = bytearray(blob.read_bytes())
        data[-1] ^= 0xFF
        blob.write_bytes(bytes(data))
        assert main(["build-csr", "--model", str(pruned_model_dir)]) == EXIT_FORMAT
