import unittest
import tempfile
from pathlib import Path

import numpy as np
from scipy import stats

from noisy_quant.numerics import (
    Rng,
    Tensor2D,
    derive_seed,
    gelu,
    histogram,
    histogram_edges,
    layernorm,
    load_tensor,
    matmul,
    save_tensor,
    softmax_rows,
    uniform_vector,
)
from noisy_quant.tests.test_assert_functions import (
    assert_histogram_series,
    assert_tensor_equal,
)
from utils.exceptions import (
    InvalidArgumentError,
    NonFiniteValueError,
    ShapeMismatchError,
    TensorFormatError,
)


class TestTensor2D(unittest.TestCase):
    def test_values_are_float32_and_read_only(self):
        tensor = Tensor2D([[1, 2], [3, 4]])

        self.assertEqual(tensor.values.dtype, np.float32)
        self.assertEqual(tensor.shape, (2, 2))
        self.assertFalse(tensor.values.flags.writeable)

    def test_rejects_one_dimensional_values(self):
        self.assertRaises(ShapeMismatchError, Tensor2D, np.ones(3))

    def test_rejects_non_finite_values(self):
        self.assertRaises(NonFiniteValueError, Tensor2D, [[1.0, np.nan]])
        self.assertRaises(NonFiniteValueError, Tensor2D, [[np.inf]])

    def test_column(self):
        column = Tensor2D.column([1.0, -1.0, 2.0])
        self.assertEqual(column.shape, (3, 1))

    def test_equals_is_bitwise(self):
        self.assertTrue(Tensor2D([[0.0]]).equals(Tensor2D([[0.0]])))
        self.assertFalse(Tensor2D([[0.0]]).equals(Tensor2D([[-0.0]])))


class TestSeeds(unittest.TestCase):
    def test_derive_seed_is_deterministic(self):
        self.assertEqual(derive_seed(7, 3, "noisy-bias"), derive_seed(7, 3, "noisy-bias"))

    def test_derive_seed_separates_tags(self):
        seeds = {
            derive_seed(7, 3, "noisy-bias"),
            derive_seed(7, 4, "noisy-bias"),
            derive_seed(8, 3, "noisy-bias"),
            derive_seed(7, 3, "snapshot"),
        }
        self.assertEqual(len(seeds), 4)

    def test_derive_seed_range(self):
        seed = derive_seed(123, "a", 1)
        self.assertGreaterEqual(seed, 0)
        self.assertLess(seed, 2**64)

    def test_rng_draws_are_reproducible(self):
        first = uniform_vector(Rng(5), 100, -1.0, 1.0)
        second = uniform_vector(Rng(5), 100, -1.0, 1.0)
        assert_tensor_equal(first, second)

    def test_child_streams_differ(self):
        first = uniform_vector(Rng(5).child(0), 100, -1.0, 1.0)
        second = uniform_vector(Rng(5).child(1), 100, -1.0, 1.0)
        self.assertFalse(first.equals(second))


class TestUniformVector(unittest.TestCase):
    def test_bounds(self):
        values = uniform_vector(Rng(0), 100_000, -0.3, 0.3).values

        self.assertEqual(values.shape, (100_000, 1))
        self.assertTrue(np.all(values >= np.float32(-0.3)))
        self.assertTrue(np.all(values < np.float32(0.3)))

    def test_empty_interval(self):
        self.assertRaises(InvalidArgumentError, uniform_vector, Rng(0), 3, 1.0, 1.0)

    def test_million_samples_are_uniform(self):
        values = uniform_vector(Rng(42), 1_000_000, -1.0, 1.0).to_numpy().reshape(-1)
        result = stats.kstest(values, stats.uniform(loc=-1.0, scale=2.0).cdf)

        self.assertLess(result.statistic, 0.01)
        self.assertAlmostEqual(float(values.mean()), 0.0, delta=0.004)


class TestArithmetic(unittest.TestCase):
    def test_matmul(self):
        result = matmul(Tensor2D([[1, 2], [3, 4]]), Tensor2D([[1], [-1]]))
        assert_tensor_equal(result, Tensor2D([[-1], [-1]]))

    def test_matmul_shape_mismatch(self):
        self.assertRaises(
            ShapeMismatchError, matmul, Tensor2D(np.ones((2, 3))), Tensor2D(np.ones((2, 3)))
        )

    def test_gelu_lower_bound(self):
        values = gelu(np.linspace(-8, 8, 10_001).reshape(1, -1)).values

        self.assertEqual(float(gelu(np.zeros((1, 1))).values[0, 0]), 0.0)
        self.assertGreaterEqual(values.min(), -0.1701)
        self.assertLess(values.min(), -0.1699)

    def test_gelu_is_monotone_past_minimum(self):
        grid = np.linspace(-0.75, 12.0, 20_001).reshape(1, -1)
        values = gelu(grid).to_numpy().reshape(-1)

        self.assertTrue(np.all(np.diff(values) >= 0))
        self.assertGreaterEqual(values.min(), -0.1701)

    def test_softmax_rows_sum_to_one(self):
        scores = Rng(1).generator().normal(0, 5, size=(16, 16))
        probabilities = softmax_rows(scores)

        np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, atol=1e-6)
        self.assertTrue(np.all(probabilities >= 0))

    def test_layernorm_moments(self):
        activations = Rng(2).generator().normal(3.0, 2.0, size=(64, 16))
        normalized = layernorm(activations)

        np.testing.assert_allclose(normalized.mean(axis=0), 0.0, atol=1e-6)
        np.testing.assert_allclose(normalized.var(axis=0), 1.0, atol=1e-4)


class TestHistogram(unittest.TestCase):
    def test_counts_and_out_of_range(self):
        edges = histogram_edges(0.0, 1.0, bins=2)
        result = histogram(np.array([[-1.0, 0.1, 0.2, 0.6, 1.0, 2.0, 3.0]]), edges)

        assert_histogram_series(result, {(0.0, 0.5): 2, (0.5, 1.0): 2})
        self.assertEqual(result.underflow, 1)
        self.assertEqual(result.overflow, 2)
        self.assertEqual(result.total, 7)

    def test_degenerate_range(self):
        edges = histogram_edges(2.0, 2.0, bins=4)
        self.assertEqual(len(edges), 5)
        self.assertLess(edges[0], 2.0)
        self.assertGreater(edges[-1], 2.0)

    def test_records_include_overflow_rows(self):
        result = histogram(np.array([[0.5]]), histogram_edges(0.0, 1.0, bins=4))
        records = result.to_records("input")

        self.assertEqual(len(records), 6)
        self.assertEqual(records[0]["bin_left"], -np.inf)
        self.assertEqual(records[-1]["bin_right"], np.inf)


class TestTensorFile(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.path = Path(self.directory.name) / "tensor.t2d"

    def tearDown(self):
        self.directory.cleanup()

    def test_save_and_load(self):
        tensor = Tensor2D(Rng(3).generator().normal(size=(5, 7)))
        save_tensor(self.path, tensor)

        assert_tensor_equal(load_tensor(self.path), tensor)

    def test_header_layout(self):
        save_tensor(self.path, Tensor2D([[1.0, 2.0]]))
        raw = self.path.read_bytes()
        header, payload = raw.split(b"\n", 1)

        self.assertEqual(
            header, b'{"dtype":"f32","rows":1,"cols":2,"byte_order":"little-endian"}'
        )
        self.assertEqual(payload, np.array([1.0, 2.0], dtype="<f4").tobytes())

    def test_truncated_payload(self):
        save_tensor(self.path, Tensor2D(np.ones((2, 2))))
        self.path.write_bytes(self.path.read_bytes()[:-1])

        self.assertRaises(TensorFormatError, load_tensor, self.path)

    def test_malformed_header(self):
        self.path.write_bytes(b"not json\n" + bytes(4))
        self.assertRaises(TensorFormatError, load_tensor, self.path)

    def test_missing_header_line(self):
        self.path.write_bytes(b'{"dtype":"f32"}')
        self.assertRaises(TensorFormatError, load_tensor, self.path)

    def test_boolean_shape(self):
        header = b'{"dtype":"f32","rows":true,"cols":1,"byte_order":"little-endian"}\n'
        self.path.write_bytes(header + np.array([1.0], dtype="<f4").tobytes())

        self.assertRaises(TensorFormatError, load_tensor, self.path)

    def test_non_finite_payload(self):
        header = b'{"dtype":"f32","rows":1,"cols":1,"byte_order":"little-endian"}\n'
        self.path.write_bytes(header + np.array([np.nan], dtype="<f4").tobytes())

        self.assertRaises(NonFiniteValueError, load_tensor, self.path)
