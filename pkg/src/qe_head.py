"""Regression head, pooling and the MSE training loop.

A source/translation pair is joined with a separator, run through the backbone, and
the hidden state of one block is pooled to a vector per sequence. A two-layer ReLU
head maps that vector to a scalar. Only adapter factors and head parameters are
optimised; the backbone checksum is verified after every training run.

Scores are trained either on DA/100 with a sigmoid output (unit_interval) or on the
raw 0-100 scale with a clamp at prediction time (raw_0_100).
"""

import csv
import json
import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from src.adapters import (
    AdapterConfig,
    adapter_parameters,
    attach_adapters,
    has_merged_adapters,
)
from src.data import SCORE_MAX, SCORE_MIN, QeRecord
from src.errors import ConfigError, DataError, NumericsError, TrainingError
from src.numerics import (
    Tensor,
    add_bias,
    backward,
    matmul,
    mse_loss,
    no_grad,
    relu,
    reshape,
    sigmoid,
    transpose,
)
from src.transformer import (
    TokenizedText,
    TransformerModel,
    base_checksum,
    forward_to_layer,
    normalize_text,
    resolve_layer_index,
    stack_tokens,
    tokenize,
)

logger = logging.getLogger(__name__)

DEFAULT_SEPARATOR = " [SEP] "
HEAD_INIT_STD = 0.02


class PoolingStrategy(str, Enum):
    MEAN = "mean"
    LAST = "last"


class ScoreScale(str, Enum):
    RAW = "raw_0_100"
    UNIT = "unit_interval"


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines one training run besides the model and data."""

    layer_index: int = -1
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    epochs: int = 200
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    score_scale: ScoreScale = ScoreScale.UNIT
    pooling: PoolingStrategy = PoolingStrategy.MEAN
    separator: str = DEFAULT_SEPARATOR
    d_hidden: int | None = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"train.learning_rate must be positive, got {self.learning_rate}")
        if self.d_hidden is not None and self.d_hidden < 1:
            raise ConfigError(f"train.d_hidden must be >= 1, got {self.d_hidden}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"train.seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class RegressionHead:
    """Two affine layers with one ReLU between: (B × d_model) -> (B,)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def initialise(cls, d_model: int, d_hidden: int, rng: np.random.Generator) -> "RegressionHead":
        """Normal(0, 0.02) weights, zero biases."""
        return cls(
            w1=Tensor(rng.normal(0.0, HEAD_INIT_STD, (d_hidden, d_model)), requires_grad=True),
            b1=Tensor(np.zeros(d_hidden), requires_grad=True),
            w2=Tensor(rng.normal(0.0, HEAD_INIT_STD, (1, d_hidden)), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )

    @classmethod
    def zeros(cls, d_model: int, d_hidden: int) -> "RegressionHead":
        return cls(
            w1=Tensor(np.zeros((d_hidden, d_model)), requires_grad=True),
            b1=Tensor(np.zeros(d_hidden), requires_grad=True),
            w2=Tensor(np.zeros((1, d_hidden)), requires_grad=True),
            b2=Tensor(np.zeros(1), requires_grad=True),
        )

    @property
    def d_hidden(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, pooled: Tensor) -> Tensor:
        hidden = relu(add_bias(matmul(pooled, transpose(self.w1)), self.b1))
        out = add_bias(matmul(hidden, transpose(self.w2)), self.b2)
        return reshape(out, (pooled.shape[0],))


def pool(
    states: Tensor, mask: np.ndarray, strategy: PoolingStrategy = PoolingStrategy.MEAN
) -> Tensor:
    """Reduce (B·S × d) states to one (B × d) row per sequence.

    Pooling is a product with a constant (B × B·S) weight matrix, so pad positions
    receive weight exactly zero.

    Raises:
        DataError: If a sequence has no real token.
    """
    pad_mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    batch, seq_len = pad_mask.shape
    if states.ndim != 2 or states.shape[0] != batch * seq_len:
        raise DataError(f"states {states.shape} do not match mask {pad_mask.shape}")
    counts = pad_mask.sum(axis=1)
    if np.any(counts == 0):
        raise DataError("cannot pool a sequence with no real token")

    weights = np.zeros((batch, batch * seq_len))
    for b in range(batch):
        row = weights[b, b * seq_len : (b + 1) * seq_len]
        if strategy is PoolingStrategy.MEAN:
            row[pad_mask[b]] = 1.0 / counts[b]
        else:
            row[np.flatnonzero(pad_mask[b])[-1]] = 1.0
    return matmul(Tensor(weights), states)


@dataclass
class TrainedQeModel:
    """Backbone with adapters, head, the layer it reads and the loss trace."""

    model: TransformerModel
    head: RegressionHead
    layer_index: int
    config: TrainConfig
    loss_trace: list[float] = field(default_factory=list)
    base_checksum: str = ""


@dataclass(frozen=True)
class Prediction:
    record_id: str
    prediction: float
    gold: float


class Adam:
    """Adam over a fixed parameter list, updating tensors in place."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v, strict=True):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.data -= self.lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise TrainingError(f"parameter update produced non-finite values at step {self.t}")


# ============================================================================
# Scoring
# ============================================================================


def encode_pair(
    model: TransformerModel, source: str, translation: str, separator: str = DEFAULT_SEPARATOR
) -> TokenizedText:
    """Tokenize `source + separator + translation`.

    Raises:
        DataError: If either side is empty after normalization.
    """
    src, tgt = normalize_text(source), normalize_text(translation)
    if not src or not tgt:
        raise DataError("source and translation must both be non-empty")
    config = model.config
    return tokenize(f"{src}{separator}{tgt}", config.vocab_size, config.max_seq_len)


def _head_outputs(
    model: TransformerModel,
    head: RegressionHead,
    items: Sequence[TokenizedText],
    layer_index: int,
    cfg: TrainConfig,
) -> Tensor:
    ids, mask = stack_tokens(list(items))
    pooled = pool(forward_to_layer(model, ids, mask, layer_index), mask, cfg.pooling)
    out = head.forward(pooled)
    return sigmoid(out) if cfg.score_scale is ScoreScale.UNIT else out


def _to_da(values: np.ndarray, score_scale: ScoreScale) -> np.ndarray:
    scaled = values * SCORE_MAX if score_scale is ScoreScale.UNIT else values
    return np.clip(scaled, SCORE_MIN, SCORE_MAX)


def _targets(records: Sequence[QeRecord], score_scale: ScoreScale) -> np.ndarray:
    gold = np.array([r.da_score for r in records], dtype=np.float64)
    return gold / SCORE_MAX if score_scale is ScoreScale.UNIT else gold


def predict_batch(m: TrainedQeModel, pairs: Sequence[tuple[str, str]]) -> list[float]:
    """DA predictions in [0, 100] for (source, translation) pairs, without recording."""
    items = [encode_pair(m.model, src, tgt, m.config.separator) for src, tgt in pairs]
    with no_grad():
        out = _head_outputs(m.model, m.head, items, m.layer_index, m.config)
    return [float(v) for v in _to_da(out.data, m.config.score_scale)]


def predict_da(m: TrainedQeModel, source: str, translation: str) -> float:
    """Predicted DA score in [0, 100] for one pair."""
    return predict_batch(m, [(source, translation)])[0]


# ============================================================================
# Training and evaluation
# ============================================================================


def train(
    model: TransformerModel, dataset: Sequence[QeRecord], cfg: TrainConfig
) -> TrainedQeModel:
    """Fit adapters and a fresh head with mini-batch Adam on MSE.

    Adapters from cfg.adapter are attached when the model has none. Shuffling and
    head initialisation draw from generators derived from cfg.seed, so two runs with
    the same inputs produce identical loss traces.

    Raises:
        TrainingError: On an empty dataset, merged adapters, a non-finite loss, or a
            changed backbone.
        LayerIndexError: If cfg.layer_index does not address a block.
    """
    if not dataset:
        raise TrainingError("cannot train on an empty dataset")
    resolve_layer_index(model.n_layers, cfg.layer_index)
    if has_merged_adapters(model):
        raise TrainingError("cannot train adapters that are merged into the backbone")
    if model.adapter_config is None:
        attach_adapters(model, cfg.adapter, seed=cfg.seed)
    elif model.adapter_config != cfg.adapter:
        logger.warning("model already carries adapters %s; keeping them", model.adapter_config)

    checksum = base_checksum(model)
    rng = np.random.default_rng([cfg.seed, 2])
    d_model = model.config.d_model
    head = RegressionHead.initialise(d_model, cfg.d_hidden or d_model, rng)
    optimizer = Adam(adapter_parameters(model) + head.parameters(), lr=cfg.learning_rate)

    items = [encode_pair(model, r.source, r.translation, cfg.separator) for r in dataset]
    targets = _targets(dataset, cfg.score_scale)
    n = len(items)
    trace: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                optimizer.zero_grad()
                pred = _head_outputs(model, head, [items[i] for i in batch], cfg.layer_index, cfg)
                loss = mse_loss(pred, Tensor(targets[batch]))
                backward(loss)
                optimizer.step()
                total += loss.item() * len(batch)
        except NumericsError as exc:
            raise TrainingError(f"training diverged in epoch {epoch}: {exc}") from exc
        mean_mse = total / n
        if not np.isfinite(mean_mse):
            raise TrainingError(f"non-finite mean loss in epoch {epoch}")
        trace.append(mean_mse)
        logger.info("epoch %d/%d mean_mse=%.6g", epoch, cfg.epochs, mean_mse)
    optimizer.zero_grad()

    if base_checksum(model) != checksum:
        raise TrainingError("backbone weights changed during training")
    return TrainedQeModel(
        model=model,
        head=head,
        layer_index=cfg.layer_index,
        config=cfg,
        loss_trace=trace,
        base_checksum=checksum,
    )


def evaluate(
    m: TrainedQeModel, dataset: Sequence[QeRecord], workers: int = 1, chunk_size: int = 32
) -> list[Prediction]:
    """Predict every record; results follow input order whatever the worker count.

    Raises:
        DataError: On an empty dataset.
    """
    if not dataset:
        raise DataError("cannot evaluate an empty dataset")
    records = list(dataset)
    chunks = [records[i : i + chunk_size] for i in range(0, len(records), chunk_size)]

    def score_chunk(chunk: list[QeRecord]) -> list[float]:
        return predict_batch(m, [(r.source, r.translation) for r in chunk])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool_executor:
            scored = list(pool_executor.map(score_chunk, chunks))
    else:
        scored = [score_chunk(chunk) for chunk in chunks]

    values = [v for chunk_values in scored for v in chunk_values]
    return [
        Prediction(record_id=r.id, prediction=v, gold=r.da_score)
        for r, v in zip(records, values, strict=True)
    ]


def write_loss_csv(path: str | Path, trace: Sequence[float]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "mean_mse"])
        for epoch, value in enumerate(trace, start=1):
            writer.writerow([epoch, repr(float(value))])
    return out


def write_predictions_jsonl(path: str | Path, predictions: Sequence[Prediction]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as handle:
        for p in predictions:
            row = {"id": p.record_id, "prediction": p.prediction, "gold": p.gold}
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    return out
