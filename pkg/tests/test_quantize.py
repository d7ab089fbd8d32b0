"""Tests for blockwise 4-bit quantization."""

import dataclasses

import numpy as np
import pytest

from src.errors import NumericsError, QuantizationError
from src.numerics import Tensor
from src.quantize import (
    QUANT_BLOCK_SIZE,
    QUANT_LEVELS,
    QuantizedWeights,
    dequantize,
    max_block_error,
    quantize_4bit,
)


class TestQuantize:
    """Tests for quantize_4bit."""

    def test_reference_block(self):
        """Test codes of a hand-quantized block, including a tie rounded away from zero."""
        q = quantize_4bit(np.array([4.0, -2.0, 1.0, 0.5]))
        assert q.codes.shape == (1, QUANT_BLOCK_SIZE)
        assert list(q.codes[0, :4]) == [7, -4, 2, 1]
        assert np.all(q.codes[0, 4:] == 0)
        assert q.scales[0] == 4.0
        assert q.shape == (4,)

    def test_zero_block(self):
        """Test that an all-zero block keeps scale 0 and zero codes."""
        q = quantize_4bit(np.zeros(QUANT_BLOCK_SIZE))
        assert q.scales[0] == 0.0
        assert not q.codes.any()
        assert np.array_equal(dequantize(q).data, np.zeros(QUANT_BLOCK_SIZE))

    def test_blocks_are_row_major(self):
        """Test that consecutive values fill blocks in order, with the last one padded."""
        values = np.concatenate([np.full(QUANT_BLOCK_SIZE, 2.0), [8.0]])
        q = quantize_4bit(values)
        assert q.codes.shape == (2, QUANT_BLOCK_SIZE)
        assert list(q.scales) == [2.0, 8.0]
        assert q.size == QUANT_BLOCK_SIZE + 1

    def test_codes_in_range(self):
        """Test the code range on random weights."""
        q = quantize_4bit(np.random.default_rng(0).normal(size=(32, 48)))
        assert q.codes.dtype == np.int8
        assert q.codes.min() >= -QUANT_LEVELS
        assert q.codes.max() <= QUANT_LEVELS

    def test_accepts_tensor(self):
        """Test that a Tensor quantizes like its array."""
        values = np.random.default_rng(1).normal(size=(4, 16))
        assert np.array_equal(quantize_4bit(Tensor(values)).codes, quantize_4bit(values).codes)

    def test_rejects_non_finite(self):
        """Test that non-finite weights cannot be quantized."""
        with pytest.raises(NumericsError):
            quantize_4bit(np.array([1.0, np.inf]))


class TestDequantize:
    """Tests for dequantize and the round-trip error bound."""

    def test_absmax_round_trip(self):
        """Test that code 7 with scale 4 dequantizes to 4."""
        codes = np.zeros((1, QUANT_BLOCK_SIZE), dtype=np.int8)
        codes[0, 0] = 7
        q = QuantizedWeights(codes=codes, scales=np.array([4.0]), shape=(1,))
        assert np.array_equal(dequantize(q).data, [4.0])

    def test_restores_shape(self):
        """Test that the original shape comes back."""
        q = quantize_4bit(np.random.default_rng(2).normal(size=(5, 7)))
        assert dequantize(q).shape == (5, 7)

    def test_error_bound(self):
        """Test per-element error <= absmax/7 in every block."""
        values = np.random.default_rng(3).normal(size=(40, 50))
        q = quantize_4bit(values)
        errors = max_block_error(values, q)
        assert errors.shape == q.scales.shape
        assert np.all(errors <= q.scales / QUANT_LEVELS + 1e-15)

    def test_corrupted_code(self):
        """Test that a code outside [-7, 7] is detected."""
        q = quantize_4bit(np.ones(8))
        codes = q.codes.copy()
        codes[0, 0] = 9
        with pytest.raises(QuantizationError):
            dequantize(dataclasses.replace(q, codes=codes))

    def test_mismatched_scales(self):
        """Test that codes and scales must agree on the block count."""
        q = quantize_4bit(np.ones(8))
        with pytest.raises(QuantizationError):
            dequantize(dataclasses.replace(q, scales=np.array([1.0, 1.0])))
