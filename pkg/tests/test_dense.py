import numpy as np
import pytest

from sparseconv.dense import ConvLayerDense, conv_dense_direct, conv_dense_gemm
from sparseconv.errors import ShapeError
from sparseconv.shapes import output_shape

from conftest import conv_oracle


def rel_close(a, b, tol):
    a64, b64 = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.all(np.abs(a64 - b64) <= tol * (np.abs(b64) + 1.0))


@pytest.fixture(params=[conv_dense_direct, conv_dense_gemm],
                ids=["direct", "gemm"])
def conv_fn(request):
    return request.param


class TestDenseBaselines:
    def test_identity_1x1_kernel(self, conv_fn):
        x = np.random.default_rng(0).standard_normal((2, 1, 5, 5)).astype(np.float32)
        layer = ConvLayerDense(np.ones((1, 1, 1, 1), np.float32),
                               np.zeros(1, np.float32))
        assert np.array_equal(conv_fn(x, layer), x)

    def test_zero_weights_constant_bias(self, conv_fn):
        x = np.random.default_rng(1).standard_normal((2, 3, 6, 6)).astype(np.float32)
        layer = ConvLayerDense(np.zeros((4, 3, 3, 3), np.float32),
                               np.full(4, 2.5, np.float32), padding=1)
        out = conv_fn(x, layer)
        assert np.all(out == np.float32(2.5))

    def test_against_f64_oracle(self, conv_fn):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
        b = rng.standard_normal(4).astype(np.float32)
        out = conv_fn(x, ConvLayerDense(w, b, padding=1))
        assert rel_close(out, conv_oracle(x, w, b, padding=1), 1e-5)

    def test_strided_against_oracle(self, conv_fn):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 2, 7, 7)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        out = conv_fn(x, ConvLayerDense(w, np.zeros(3, np.float32), stride=2))
        assert rel_close(out, conv_oracle(x, w, stride=2), 1e-5)

    def test_pointwise_conv_cross_check(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((2, 64, 7, 7)).astype(np.float32)
        w = rng.standard_normal((256, 64, 1, 1)).astype(np.float32)
        layer = ConvLayerDense(w, np.zeros(256, np.float32))
        assert rel_close(conv_dense_gemm(x, layer),
                         conv_dense_direct(x, layer), 1e-4)

    def test_linearity_zero_bias(self, conv_fn):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        w = rng.standard_normal((2, 2, 3, 3)).astype(np.float32)
        layer = ConvLayerDense(w, np.zeros(2, np.float32))
        assert rel_close(conv_fn(3.0 * x, layer), 3.0 * conv_fn(x, layer), 1e-5)

    def test_output_extents(self, conv_fn):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 3, 9, 11)).astype(np.float32)
        w = rng.standard_normal((5, 3, 3, 3)).astype(np.float32)
        layer = ConvLayerDense(w, np.zeros(5, np.float32), stride=2, padding=1)
        out = conv_fn(x, layer)
        assert out.shape[2:] == output_shape(layer.conv_shape(x))

    def test_f16_storage_profile(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float16)
        w = rng.standard_normal((4, 3, 3, 3)).astype(np.float16)
        layer = ConvLayerDense(w, np.zeros(4, np.float16), padding=1)
        out_d = conv_dense_direct(x, layer)
        out_g = conv_dense_gemm(x, layer)
        assert out_d.dtype == np.float16
        assert rel_close(out_d, conv_oracle(x, w, padding=1), 1e-2)
        assert rel_close(out_g, conv_oracle(x, w, padding=1), 1e-2)

    def test_shape_mismatch_rejected(self, conv_fn):
        x = np.zeros((1, 2, 5, 5), np.float32)
        layer = ConvLayerDense(np.zeros((1, 3, 3, 3), np.float32),
                               np.zeros(1, np.float32))
        with pytest.raises(ShapeError):
            conv_fn(x, layer)
