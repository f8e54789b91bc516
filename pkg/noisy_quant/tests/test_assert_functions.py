import unittest

import numpy as np
import pandas as pd

from noisy_quant.numerics import Histogram, Tensor2D


def assert_tensor_equal(test_tensor: Tensor2D, expected_tensor: Tensor2D):
    """
    Assert that two tensors are bitwise equal.

    Parameters
    ----------
    - test_tensor (Tensor2D): The tensor under test.
    - expected_tensor (Tensor2D): The expected tensor.
    """
    assert test_tensor.shape == expected_tensor.shape, (
        f"shape {test_tensor.shape} != {expected_tensor.shape}"
    )
    np.testing.assert_array_equal(
        test_tensor.values.view(np.uint32),
        expected_tensor.values.view(np.uint32),
    )


def assert_histogram_series(
    test_histogram: Histogram,
    expected_count: dict[tuple[float, float], int],
):
    """
    Compare the in-range counts of a histogram with a dictionary keyed
    by (bin_left, bin_right).

    Parameters
    ----------
    - test_histogram (Histogram): The histogram under test.
    - expected_count (dict[tuple[float, float], int]): The expected
    counts per bin.
    """
    test_count = pd.Series(
        test_histogram.counts,
        index=pd.MultiIndex.from_arrays(
            [test_histogram.edges[:-1], test_histogram.edges[1:]]
        ),
        dtype="int64",
    )
    expected_count_series = pd.Series(
        list(expected_count.values()),
        index=pd.MultiIndex.from_tuples(list(expected_count.keys())),
        dtype="int64",
    )
    pd.testing.assert_series_equal(test_count, expected_count_series)


class TestAssertTensor(unittest.TestCase):
    def setUp(self) -> None:
        self.tensor = Tensor2D(np.array([[1.0, -2.5], [0.0, 3.25]]))

    def test_assert_tensor_equal(self):
        assert_tensor_equal(self.tensor, Tensor2D(self.tensor.values.copy()))

    def test_assert_tensor_equal_detects_sign_of_zero(self):
        negative_zero = Tensor2D(np.array([[1.0, -2.5], [-0.0, 3.25]]))
        self.assertRaises(
            AssertionError, assert_tensor_equal, self.tensor, negative_zero
        )

    def test_assert_tensor_equal_detects_shape(self):
        self.assertRaises(
            AssertionError,
            assert_tensor_equal,
            self.tensor,
            Tensor2D(self.tensor.values.reshape(1, 4)),
        )


class TestAssertHistogram(unittest.TestCase):
    def setUp(self) -> None:
        self.histogram = Histogram(
            edges=np.array([0.0, 0.5, 1.0]),
            counts=np.array([3, 1]),
            underflow=2,
            overflow=0,
        )

    def test_assert_histogram_series(self):
        assert_histogram_series(self.histogram, {(0.0, 0.5): 3, (0.5, 1.0): 1})

    def test_assert_histogram_series_wrong_count(self):
        self.assertRaises(
            AssertionError,
            assert_histogram_series,
            self.histogram,
            {(0.0, 0.5): 2, (0.5, 1.0): 1},
        )
