import numpy as np
import pytest
from numpy.testing import assert_array_equal

from sparsekit.experiments import make_task
from sparsekit.formats import decompress, sparsity_of
from sparsekit.model import TinyModel, TinyModelConfig
from sparsekit.pruning import magnitude_prune
from sparsekit.quant import dequantize, quantize_int8, quantize_model, quantized_eval, sparse_quant_compress
from sparsekit.tensor import make_rng, random_matrix


class TestQuantize:
    def test_zero_matrix(self):
        qm = quantize_int8(np.zeros((3, 5)))
        assert_array_equal(qm.q, 0)
        assert_array_equal(qm.scales, 0)

    def test_scale_definition(self):
        qm = quantize_int8(np.array([[12.7, -6.35, 0.0], [0.0, 0.0, -1.27]], dtype=np.float32))
        assert qm.scales[0] == pytest.approx(0.1)
        assert qm.scales[1] == pytest.approx(0.01)
        assert qm.q[0, 0] == 127 and qm.q[1, 2] == -127
        assert qm.q[0, 1] in (-63, -64)

    def test_half_rounds_away(self):
        qm = quantize_int8(np.array([[127.0, 0.5, -0.5, 1.5]], dtype=np.float32))
        assert_array_equal(qm.q, [[127, 1, -1, 2]])

    def test_error_bound(self, rng):
        for _ in range(100):
            W = random_matrix(32, 32, rng)
            qm = quantize_int8(W)
            err = np.abs(dequantize(qm) - W)
            assert np.all(err <= qm.scales[:, np.newaxis] / 2 * (1 + 1e-5) + 1e-7)

    def test_subnormal_rows_keep_error_bound(self):
        W = np.array([[1e-40, -5e-41, 0.0], [1e-37, 3.3e-38, -2e-38]], dtype=np.float32)
        qm = quantize_int8(W)
        assert np.all(qm.scales >= np.finfo(np.float32).tiny)
        err = np.abs(dequantize(qm) - W)
        assert np.all(err <= qm.scales[:, np.newaxis] / 2 * (1 + 1e-5))
        assert_array_equal(qm.q[:, 2] == 0, [True, False])

    def test_idempotent(self, rng):
        first = quantize_int8(random_matrix(8, 16, rng))
        second = quantize_int8(dequantize(first))
        assert_array_equal(second.q, first.q)

    def test_zero_rows_stay_zero(self, rng):
        W = random_matrix(4, 8, rng)
        W[2] = 0
        qm = quantize_int8(W)
        assert qm.scales[2] == 0
        assert_array_equal(dequantize(qm)[2], 0)

    def test_exact_zeros_preserved(self, rng):
        W, _ = magnitude_prune(random_matrix(16, 16, rng), 0.8)
        qm = quantize_int8(W)
        assert_array_equal(qm.q[W == 0], 0)


class TestSparseQuant:
    def test_sparsity_and_storage(self, rng):
        W, _ = magnitude_prune(random_matrix(10, 100, rng), 0.8)
        c = sparse_quant_compress(W)
        assert c.value_width == "int8"
        stats = sparsity_of(c, value_width="int8", dense_bits=32)
        assert stats.sparsity == pytest.approx(0.8)
        assert stats.bits_per_weight == pytest.approx(2.6)

    def test_matches_dense_quantization(self, rng):
        W, _ = magnitude_prune(random_matrix(6, 40, rng), 0.5)
        assert_array_equal(decompress(sparse_quant_compress(W)), dequantize(quantize_int8(W)))


class TestModelQuantization:
    CONFIG = TinyModelConfig(vocab=8, d_model=8, blocks=1, seq=6)

    def test_only_linear_weights_change(self):
        model = TinyModel.init(self.CONFIG, seed=0)
        quantized = quantize_model(model)
        assert_array_equal(quantized.params["embed"], model.params["embed"])
        assert not np.array_equal(quantized.params["block0.w1"], model.params["block0.w1"])

    def test_representable_weights_have_zero_delta(self):
        model = TinyModel.init(self.CONFIG, seed=0)
        rng = make_rng(5)
        for name in model.linear_names():
            W = rng.integers(-127, 128, size=model.params[name].shape).astype(np.float32)
            W[:, 0] = 127
            model.params[name] = W
        quantized = quantize_model(model)
        for name in model.params:
            assert_array_equal(quantized.params[name], model.params[name])
        task = make_task(seed=0, vocab=8, seq=6, train_size=1, val_size=1, test_size=32)
        result = quantized_eval(model, task.test)
        assert result.delta == 0.0
        assert result.int8_accuracy == result.fp32_accuracy
