import json

import numpy as np
import pytest

from sparseconv.datasets import synthetic_blobs
from sparseconv.errors import FormatError
from sparseconv.quantize import apply_quantization
from sparseconv.store import (Model, fnv1a64, load_model, read_blob,
                              save_model, write_blob)
from sparseconv.toynet import ToyNet


@pytest.fixture()
def toy_model():
    net = ToyNet(conv_channels=(4, 4), seed=0)
    rng = np.random.default_rng(0)
    for n in net.weight_names:  # prune so CSR storage is meaningful
        p = net.params[n]
        p[rng.random(p.shape) < 0.6] = 0
    return Model.from_toynet(net)


def models_equal(a: Model, b: Model) -> bool:
    for la, lb in zip(a.all_layers(), b.all_layers()):
        if la.name != lb.name:
            return False
        if not np.array_equal(la.weight_values(), lb.weight_values()):
            return False
        if not np.array_equal(la.bias, lb.bias):
            return False
    return True


class TestFnv1a:
    def test_known_vectors(self):
        # published FNV-1a 64-bit test vectors
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_single_bit_changes_hash(self):
        assert fnv1a64(b"\x00" * 64) != fnv1a64(b"\x00" * 63 + b"\x01")


class TestBlobs:
    @pytest.mark.parametrize("dtype", [np.float32, np.float16, np.float64,
                                       np.int32, np.int64, np.uint8])
    def test_round_trip_bit_identical(self, tmp_path, dtype):
        arr = (np.random.default_rng(0).standard_normal((3, 4)) * 10).astype(dtype)
        entry = write_blob(tmp_path / "a.bin", arr)
        back = read_blob(tmp_path / "a.bin", entry)
        assert back.dtype == np.dtype(dtype)
        assert np.array_equal(back.view(np.uint8) if dtype != np.uint8 else back,
                              arr.view(np.uint8) if dtype != np.uint8 else arr)

    def test_packed_codes_round_trip_odd_count(self, tmp_path):
        codes = np.array([0, 15, 7, 3, 9], dtype=np.int64)  # odd length
        entry = write_blob(tmp_path / "c.bin", codes, packed_codes=True)
        assert entry["dtype"] == "u8-packed-codes"
        back = read_blob(tmp_path / "c.bin", entry)
        assert np.array_equal(back, codes)

    def test_packed_codes_reject_large_values(self, tmp_path):
        with pytest.raises(FormatError):
            write_blob(tmp_path / "c.bin", np.array([16]), packed_codes=True)

    def test_truncated_blob_rejected(self, tmp_path):
        arr = np.arange(8, dtype=np.float32)
        entry = write_blob(tmp_path / "t.bin", arr)
        data = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-4])
        with pytest.raises(FormatError):
            read_blob(tmp_path / "t.bin", entry)

    def test_flipped_byte_rejected(self, tmp_path):
        arr = np.arange(8, dtype=np.float32)
        entry = write_blob(tmp_path / "f.bin", arr)
        data = bytearray((tmp_path / "f.bin").read_bytes())
        data[70] ^= 0xFF
        (tmp_path / "f.bin").write_bytes(bytes(data))
        with pytest.raises(FormatError):
            read_blob(tmp_path / "f.bin", entry)

    def test_too_many_dims_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            write_blob(tmp_path / "d.bin", np.zeros((1, 1, 1, 1, 1)))


class TestModelRoundTrip:
    def test_dense_storage(self, tmp_path, toy_model):
        save_model(toy_model, tmp_path / "m")
        back = load_model(tmp_path / "m")
        assert models_equal(toy_model, back)
        assert back.meta["architecture"] == toy_model.meta["architecture"]

    def test_csr_storage(self, tmp_path, toy_model):
        toy_model.build_csr_all()
        save_model(toy_model, tmp_path / "m")
        back = load_model(tmp_path / "m")
        assert models_equal(toy_model, back)
        for la, lb in zip(toy_model.conv_layers, back.conv_layers):
            assert lb.storage == "csr"
            assert np.array_equal(la.kernel.colidx, lb.kernel.colidx)
            assert np.array_equal(la.kernel.rowptr, lb.kernel.rowptr)
            assert la.kernel.sparse_level == lb.kernel.sparse_level

    def test_codebook_and_act_quant(self, tmp_path, toy_model):
        x, _ = synthetic_blobs(16, seed=1)
        apply_quantization(toy_model, "codebook:8")
        apply_quantization(toy_model, "affine:8", targets=("activations",),
                           calib_data=x)
        save_model(toy_model, tmp_path / "m")
        back = load_model(tmp_path / "m")
        assert models_equal(toy_model, back)
        for la, lb in zip(toy_model.all_layers(), back.all_layers()):
            assert np.array_equal(la.codebook.centroids, lb.codebook.centroids)
            assert np.array_equal(la.codebook.assignments, lb.codebook.assignments)
        for la, lb in zip(toy_model.conv_layers, back.conv_layers):
            assert la.act_quant == lb.act_quant
        assert back.meta["quantization"]["scheme"] == "affine:8"

    def test_forward_identical_after_round_trip(self, tmp_path, toy_model):
        x, _ = synthetic_blobs(8, seed=2)
        toy_model.build_csr_all()
        save_model(toy_model, tmp_path / "m")
        back = load_model(tmp_path / "m")
        assert np.array_equal(toy_model.forward(x), back.forward(x))


class TestLoadRejections:
    def save(self, tmp_path, toy_model, csr=False):
        if csr:
            toy_model.build_csr_all()
        save_model(toy_model, tmp_path / "m")
        return tmp_path / "m"

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "empty").mkdir()
        with pytest.raises(FormatError):
            load_model(tmp_path / "empty")

    def test_future_format_version(self, tmp_path, toy_model):
        p = self.save(tmp_path, toy_model)
        manifest = json.loads((p / "manifest.json").read_text())
        manifest["format_version"] = 99
        (p / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_model(p)

    def test_missing_blob_file(self, tmp_path, toy_model):
        p = self.save(tmp_path, toy_model)
        (p / "conv0.bias.bin").unlink()
        with pytest.raises(FormatError):
            load_model(p)

    def test_corrupt_stored_csr_rejected(self, tmp_path, toy_model):
        p = self.save(tmp_path, toy_model, csr=True)
        entry = json.loads((p / "manifest.json").read_text())["blobs"]["conv0.colidx"]
        colidx = read_blob(p / "conv0.colidx.bin", entry)
        colidx[0] = 10 ** 6  # out of the padded-plane range
        new_entry = write_blob(p / "conv0.colidx.bin", colidx)
        manifest = json.loads((p / "manifest.json").read_text())
        manifest["blobs"]["conv0.colidx"] = new_entry
        (p / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(FormatError):
            load_model(p)


class TestForwardConfig:
    def test_algorithm_choices_agree(self, toy_model):
        x, _ = synthetic_blobs(8, seed=3)
        baseline = toy_model.forward(x)  # dense-gemm everywhere
        toy_model.build_csr_all()
        names = [l.name for l in toy_model.conv_layers]
        for algo in ("dense-direct", "dense-gemm", "sparse-direct"):
            cfg = {n: {"algorithm": algo} for n in names}
            out = toy_model.forward(x, cfg)
            assert np.allclose(out, baseline, rtol=1e-4, atol=1e-5)

    def test_unknown_algorithm_rejected(self, toy_model):
        from sparseconv.errors import ShapeError
        x, _ = synthetic_blobs(4, seed=4)
        with pytest.raises(ShapeError):
            toy_model.forward(x, {"conv0": {"algorithm": "magic"}})
