"""Minimal decoder-only transformer exposing every block's output.

The model is a stand-in backbone: byte-level tokens, learned positions and a stack of
pre-norm blocks

    h = h + W_o · attn(LN1(h))
    h = h + FFN(LN2(h)),     FFN(z) = W_out · relu(W_in · z + b_in) + b_out

with causal multi-head self-attention in which pad keys are masked out. The output of
block i (after its second residual add) is hidden state i. All base parameters are
frozen leaves; the only trainable tensors are adapter factors attached later.

A batch of B sequences of length S is processed as one (B·S × d_model) matrix. Heads
are split by reshaping to (B·H, S, d_head) so each sequence only attends to itself.
"""

import hashlib
import logging
import math
import unicodedata
from dataclasses import dataclass, field

import numpy as np

from src.adapters import Adapter, AdapterConfig, Projection, project_rows
from src.errors import ConfigError, DataError, LayerIndexError, ShapeError
from src.numerics import (
    Tensor,
    add,
    add_bias,
    layer_norm,
    matmul,
    permute,
    relu,
    reshape,
    scale,
    softmax_rows,
    take_rows,
    transpose,
)
from src.quantize import QuantizedWeights, dequantize, quantize_4bit

logger = logging.getLogger(__name__)

PAD_ID = 0
INIT_STD = 0.02

# Block matrices in a fixed order; used for seeding, checksums and checkpoints
BLOCK_MATRICES = ("query", "key", "value", "output", "ff_in", "ff_out")
BLOCK_VECTORS = ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "ff_in_bias", "ff_out_bias")


@dataclass(frozen=True)
class ModelConfig:
    """Shape and seed of the backbone.

    The default of 12 blocks makes layer indices -1, -7, -9 and -11 all addressable.
    """

    n_layers: int = 12
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq_len: int = 128
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"model.d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"model.seed must be an unsigned 64-bit integer, got {self.seed}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class Block:
    """One pre-norm transformer block.

    Matrices are stored as (d_out × d_in). When the model is quantized, `quantized`
    keeps the 4-bit codes and the matrices hold their dequantized values.
    """

    query: Tensor
    key: Tensor
    value: Tensor
    output: Tensor
    ff_in: Tensor
    ff_out: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_in_bias: Tensor
    ff_out_bias: Tensor
    quantized: dict[str, QuantizedWeights] = field(default_factory=dict)
    adapters: dict[Projection, Adapter] = field(default_factory=dict)

    def weight(self, projection: Projection) -> Tensor:
        return getattr(self, projection.value)

    def adapter(self, projection: Projection) -> Adapter | None:
        return self.adapters.get(projection)


@dataclass
class TransformerModel:
    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    blocks: list[Block]
    quantized: dict[str, QuantizedWeights] = field(default_factory=dict)
    adapter_config: AdapterConfig | None = None

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def is_quantized(self) -> bool:
        return bool(self.quantized) or any(block.quantized for block in self.blocks)

    def named_base_parameters(self) -> list[tuple[str, Tensor]]:
        """Every frozen tensor with a stable dotted name."""
        named = [
            ("token_embedding", self.token_embedding),
            ("position_embedding", self.position_embedding),
        ]
        for i, block in enumerate(self.blocks):
            for name in BLOCK_MATRICES + BLOCK_VECTORS:
                named.append((f"blocks.{i}.{name}", getattr(block, name)))
        return named

    def named_quantized(self) -> list[tuple[str, QuantizedWeights]]:
        named = sorted(self.quantized.items())
        for i, block in enumerate(self.blocks):
            named.extend((f"blocks.{i}.{name}", q) for name, q in sorted(block.quantized.items()))
        return named


@dataclass(frozen=True)
class TokenizedText:
    """Token ids and pad mask (True = real token) of length max_seq_len."""

    ids: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return int(self.mask.sum())


@dataclass
class HiddenStates:
    """Output of every block for a batch.

    Attributes:
        per_layer: n_layers tensors of shape (batch·seq_len × d_model); entry i is the
            output of block i.
        attention_mask: (batch × seq_len) boolean pad mask, True for real tokens.
    """

    per_layer: list[Tensor]
    attention_mask: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.per_layer)

    @property
    def batch_size(self) -> int:
        return int(self.attention_mask.shape[0])

    @property
    def seq_len(self) -> int:
        return int(self.attention_mask.shape[1])


# ============================================================================
# Construction
# ============================================================================


def _frozen(array: np.ndarray) -> Tensor:
    return Tensor(array, requires_grad=False)


def _maybe_quantize(
    array: np.ndarray, name: str, store: dict[str, QuantizedWeights], enabled: bool
) -> Tensor:
    if not enabled:
        return _frozen(array)
    q = quantize_4bit(array)
    store[name] = q
    return dequantize(q)


def init_model(config: ModelConfig, quantize: bool = False) -> TransformerModel:
    """Build a model whose every parameter is determined by config.seed.

    Token embeddings are unit normal so byte identity survives into the residual
    stream; positions and projections use std 0.02; norm gains are 1 and biases 0.

    Args:
        config: Validated model configuration.
        quantize: Store every 2-D frozen matrix as 4-bit codes and compute with the
            dequantized values.
    """
    rng = np.random.default_rng(config.seed)
    d, d_ff = config.d_model, config.d_ff
    model_quantized: dict[str, QuantizedWeights] = {}
    token_embedding = _maybe_quantize(
        rng.normal(0.0, 1.0, size=(config.vocab_size, d)),
        "token_embedding",
        model_quantized,
        quantize,
    )
    position_embedding = _maybe_quantize(
        rng.normal(0.0, INIT_STD, size=(config.max_seq_len, d)),
        "position_embedding",
        model_quantized,
        quantize,
    )

    shapes = {
        "query": (d, d),
        "key": (d, d),
        "value": (d, d),
        "output": (d, d),
        "ff_in": (d_ff, d),
        "ff_out": (d, d_ff),
    }
    blocks = []
    for _ in range(config.n_layers):
        block_quantized: dict[str, QuantizedWeights] = {}
        matrices = {
            name: _maybe_quantize(
                rng.normal(0.0, INIT_STD, size=shapes[name]), name, block_quantized, quantize
            )
            for name in BLOCK_MATRICES
        }
        blocks.append(
            Block(
                **matrices,
                ln1_gain=_frozen(np.ones(d)),
                ln1_bias=_frozen(np.zeros(d)),
                ln2_gain=_frozen(np.ones(d)),
                ln2_bias=_frozen(np.zeros(d)),
                ff_in_bias=_frozen(np.zeros(d_ff)),
                ff_out_bias=_frozen(np.zeros(d)),
                quantized=block_quantized,
            )
        )
    logger.debug(
        "initialised %d-layer model (d_model=%d, heads=%d, seed=%d, quantized=%s)",
        config.n_layers,
        d,
        config.n_heads,
        config.seed,
        quantize,
    )
    return TransformerModel(
        config=config,
        token_embedding=token_embedding,
        position_embedding=position_embedding,
        blocks=blocks,
        quantized=model_quantized,
    )


def base_checksum(model: TransformerModel) -> str:
    """SHA-256 over every frozen array and every quantized code/scale array."""
    digest = hashlib.sha256()
    for name, tensor in model.named_base_parameters():
        digest.update(name.encode())
        digest.update(tensor.data.tobytes())
    for name, q in model.named_quantized():
        digest.update(f"{name}.codes".encode())
        digest.update(np.ascontiguousarray(q.codes).tobytes())
        digest.update(np.ascontiguousarray(q.scales).tobytes())
    return digest.hexdigest()


# ============================================================================
# Tokenization
# ============================================================================


def normalize_text(text: str) -> str:
    return unicodedata.normalize("NFC", text).strip()


def tokenize(text: str, vocab_size: int, max_seq_len: int) -> TokenizedText:
    """Byte-level tokens (UTF-8 byte value mod vocab_size), truncated or padded.

    Raises:
        DataError: If the text is empty after NFC normalization and stripping.
    """
    normalized = normalize_text(text)
    if not normalized:
        raise DataError("cannot tokenize empty text")
    raw = normalized.encode("utf-8")[:max_seq_len]
    ids = np.full(max_seq_len, PAD_ID, dtype=np.int64)
    ids[: len(raw)] = np.frombuffer(raw, dtype=np.uint8).astype(np.int64) % vocab_size
    mask = np.zeros(max_seq_len, dtype=bool)
    mask[: len(raw)] = True
    return TokenizedText(ids=ids, mask=mask)


def stack_tokens(items: list[TokenizedText]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into (B × S) ids and mask, cut to the longest real length.

    Cutting shared pad columns never changes the states of real tokens, since pad
    keys are masked out of attention.
    """
    if not items:
        raise DataError("cannot stack an empty token batch")
    width = max(item.length for item in items)
    ids = np.stack([item.ids[:width] for item in items])
    mask = np.stack([item.mask[:width] for item in items])
    return ids, mask


# ============================================================================
# Forward pass
# ============================================================================


def _attention_mask(mask: np.ndarray, n_heads: int) -> np.ndarray:
    """(B·H × S × S) boolean mask: causal and restricted to real keys."""
    _, seq_len = mask.shape
    causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    allowed = causal[None, :, :] & mask[:, None, :]
    # A query with no visible key attends to itself; only possible at pad positions
    empty = ~allowed.any(axis=-1)
    if empty.any():
        rows, cols = np.nonzero(empty)
        allowed[rows, cols, cols] = True
    return np.repeat(allowed, n_heads, axis=0)


def _split_heads(x: Tensor, batch: int, seq_len: int, config: ModelConfig) -> Tensor:
    heads = reshape(x, (batch, seq_len, config.n_heads, config.d_head))
    return reshape(permute(heads, (0, 2, 1, 3)), (batch * config.n_heads, seq_len, config.d_head))


def _merge_heads(x: Tensor, batch: int, seq_len: int, config: ModelConfig) -> Tensor:
    heads = reshape(x, (batch, config.n_heads, seq_len, config.d_head))
    return reshape(permute(heads, (0, 2, 1, 3)), (batch * seq_len, config.d_model))


def _block_forward(
    block: Block, h: Tensor, head_mask: np.ndarray, batch: int, seq_len: int, config: ModelConfig
) -> Tensor:
    normed = layer_norm(h, block.ln1_gain, block.ln1_bias)
    q, k, v = (
        _split_heads(
            project_rows(block.weight(p), block.adapter(p), normed), batch, seq_len, config
        )
        for p in (Projection.QUERY, Projection.KEY, Projection.VALUE)
    )
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(config.d_head))
    context = _merge_heads(matmul(softmax_rows(scores, mask=head_mask), v), batch, seq_len, config)
    h = add(h, project_rows(block.output, block.adapter(Projection.OUTPUT), context))

    normed = layer_norm(h, block.ln2_gain, block.ln2_bias)
    hidden = relu(add_bias(project_rows(block.ff_in, None, normed), block.ff_in_bias))
    return add(h, add_bias(project_rows(block.ff_out, None, hidden), block.ff_out_bias))


def _run_blocks(
    model: TransformerModel, tokens: np.ndarray, mask: np.ndarray, n_blocks: int
) -> tuple[list[Tensor], np.ndarray]:
    config = model.config
    ids = np.atleast_2d(np.asarray(tokens))
    pad_mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    if ids.shape != pad_mask.shape or ids.ndim != 2:
        raise ShapeError(f"tokens {ids.shape} and mask {pad_mask.shape} must match")
    if not np.issubdtype(ids.dtype, np.integer):
        raise DataError(f"token ids must be integers, got dtype {ids.dtype}")
    batch, seq_len = ids.shape
    if seq_len > config.max_seq_len:
        raise ShapeError(f"sequence length {seq_len} exceeds max_seq_len {config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise DataError(f"token id outside [0, {config.vocab_size})")

    positions = np.tile(np.arange(seq_len), batch)
    h = add(
        take_rows(model.token_embedding, ids.reshape(-1)),
        take_rows(model.position_embedding, positions),
    )
    head_mask = _attention_mask(pad_mask, config.n_heads)

    outputs = []
    for block in model.blocks[:n_blocks]:
        h = _block_forward(block, h, head_mask, batch, seq_len, config)
        outputs.append(h)
    return outputs, pad_mask


def forward_with_hidden_states(
    model: TransformerModel, tokens: np.ndarray, mask: np.ndarray
) -> HiddenStates:
    """Run the decoder and return the output of every block.

    Args:
        model: The backbone (with or without adapters).
        tokens: Token ids, shape (S,) or (B × S).
        mask: Boolean pad mask of the same shape, True for real tokens.

    Returns:
        HiddenStates with one (B·S × d_model) tensor per block.

    Raises:
        DataError: If a token id is outside [0, vocab_size).
        ShapeError: If tokens and mask disagree or S exceeds max_seq_len.
    """
    per_layer, pad_mask = _run_blocks(model, tokens, mask, model.n_layers)
    return HiddenStates(per_layer=per_layer, attention_mask=pad_mask)


def resolve_layer_index(n_layers: int, index: int) -> int:
    """Map a possibly negative layer index to a 0-based block number.

    Raises:
        LayerIndexError: Unless -n_layers <= index < n_layers.
    """
    if not -n_layers <= index < n_layers:
        raise LayerIndexError(f"layer index {index} out of range for {n_layers} layer(s)")
    return index + n_layers if index < 0 else index


def select_layer(states: HiddenStates, index: int) -> Tensor:
    """Hidden state of block `index`; -1 is the final block."""
    return states.per_layer[resolve_layer_index(states.n_layers, index)]


def forward_to_layer(
    model: TransformerModel, tokens: np.ndarray, mask: np.ndarray, index: int
) -> Tensor:
    """Output of block `index`, running no block above it.

    Equal to select_layer(forward_with_hidden_states(...), index); training and
    scoring at a lower layer skip the blocks they never read.

    Raises:
        LayerIndexError: If index does not address a block.
    """
    block = resolve_layer_index(model.n_layers, index)
    outputs, _ = _run_blocks(model, tokens, mask, block + 1)
    return outputs[block]
