"""Symmetric blockwise 4-bit quantization of frozen weights.

Each block of 64 consecutive values (row-major) is scaled by its absolute maximum and
rounded to an integer code in [-7, 7], ties away from zero. A block of zeros keeps
scale 0 and all-zero codes. Dequantized values are code * absmax / 7, so every element
is within absmax/7 of its original value.
"""

from dataclasses import dataclass

import numpy as np

from src.errors import NumericsError, QuantizationError
from src.numerics import Tensor

QUANT_BLOCK_SIZE = 64
QUANT_LEVELS = 7


@dataclass(frozen=True)
class QuantizedWeights:
    """4-bit codes for one weight matrix.

    Attributes:
        codes: int8 array of shape (n_blocks, block_size); the last block is zero padded.
        scales: Per-block absmax, float64, shape (n_blocks,).
        shape: Shape of the original weight.
        block_size: Number of values per block.
    """

    codes: np.ndarray
    scales: np.ndarray
    shape: tuple[int, ...]
    block_size: int = QUANT_BLOCK_SIZE

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def quantize_4bit(
    weights: Tensor | np.ndarray, block_size: int = QUANT_BLOCK_SIZE
) -> QuantizedWeights:
    """Quantize a weight array blockwise to signed 4-bit codes.

    Args:
        weights: Finite weight values of any shape.
        block_size: Values per block.

    Returns:
        QuantizedWeights holding codes, per-block absmax scales and the original shape.
    """
    if isinstance(weights, Tensor):
        values = weights.data
    else:
        values = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise NumericsError("cannot quantize non-finite weights")
    if block_size < 1:
        raise ValueError(f"block_size must be positive, got {block_size}")

    flat = values.reshape(-1)
    n_blocks = -(-flat.size // block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[: flat.size] = flat
    blocks = padded.reshape(n_blocks, block_size)

    absmax = np.abs(blocks).max(axis=1)
    divisor = np.where(absmax > 0, absmax, 1.0)
    scaled = blocks / divisor[:, None] * QUANT_LEVELS
    # np.round rounds half to even; codes round half away from zero
    codes = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    codes = np.clip(codes, -QUANT_LEVELS, QUANT_LEVELS).astype(np.int8)

    return QuantizedWeights(
        codes=codes,
        scales=absmax.astype(np.float64),
        shape=tuple(values.shape),
        block_size=block_size,
    )


def dequantize(q: QuantizedWeights) -> Tensor:
    """Expand codes back to a float64 tensor of the original shape.

    Raises:
        QuantizationError: If any code lies outside [-7, 7] or the arrays disagree.
    """
    codes = np.asarray(q.codes)
    if codes.ndim != 2 or codes.shape[1] != q.block_size or codes.shape[0] != q.scales.shape[0]:
        raise QuantizationError(
            f"codes {codes.shape} / scales {q.scales.shape} do not match block size {q.block_size}"
        )
    if codes.size and (codes.min() < -QUANT_LEVELS or codes.max() > QUANT_LEVELS):
        raise QuantizationError(f"quantized code outside [-{QUANT_LEVELS}, {QUANT_LEVELS}]")
    if codes.size < q.size:
        raise QuantizationError(f"{codes.size} codes cannot fill shape {q.shape}")
    values = codes.astype(np.float64) * q.scales[:, None] / QUANT_LEVELS
    return Tensor(values.reshape(-1)[: q.size].reshape(q.shape))


def max_block_error(original: np.ndarray, q: QuantizedWeights) -> np.ndarray:
    """Per-block maximum absolute round-trip error, aligned with q.scales."""
    restored = dequantize(q).data.reshape(-1)
    diff = np.zeros(q.codes.size)
    diff[: q.size] = np.abs(np.asarray(original, dtype=np.float64).reshape(-1) - restored)
    return diff.reshape(-1, q.block_size).max(axis=1)
