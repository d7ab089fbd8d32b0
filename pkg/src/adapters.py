"""Low-rank adapters over frozen linear projections.

Two adapter kinds share the same factor shapes for B (d_out × R) and differ in
where the rank-R update enters:

    LoRA   (additive):        y = W x + s · B (A x)          A: R × d_in
    LoRMA  (multiplicative):  y = W x + s · B (A (W x))      A: R × d_out

with s = alpha / rank. LoRMA is therefore (I + s·BA) W x, a left modulation of the
frozen weight. B starts at zero for both kinds so a freshly attached adapter adds an
exact zero and leaves every output bitwise unchanged.

Vectors x of shape (d_in,) are treated as columns; matrices of shape (n, d_in) hold
one input per row and are projected as x @ Mᵀ.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np

from src.errors import AdapterError, ConfigError, ShapeError
from src.numerics import Tensor, add, matmul, scale, transpose

if TYPE_CHECKING:
    from src.transformer import TransformerModel

logger = logging.getLogger(__name__)

ADAPTER_INIT_STD = 0.02

# (rank, alpha) pairings used by the layer-wise sweeps
RANK_ALPHA_GRID: tuple[tuple[int, float], ...] = ((32, 16.0), (64, 32.0), (128, 32.0))


class Projection(str, Enum):
    """Attention projections an adapter can target."""

    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    OUTPUT = "output"


class AdapterKind(str, Enum):
    LORA = "lora"
    LORMA = "lorma"


@dataclass(frozen=True)
class AdapterConfig:
    """Adapter kind, rank, alpha and the projections it is attached to.

    Attributes:
        kind: Additive (lora) or multiplicative (lorma).
        rank: R >= 1.
        alpha: Positive scaling numerator; the update is scaled by alpha / rank.
        target_projections: Projections receiving an adapter in every block.
    """

    kind: AdapterKind = AdapterKind.LORA
    rank: int = 8
    alpha: float = 16.0
    target_projections: frozenset[Projection] = field(
        default_factory=lambda: frozenset({Projection.QUERY, Projection.VALUE})
    )

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ConfigError(f"adapter rank must be >= 1, got {self.rank}")
        if not self.alpha > 0:
            raise ConfigError(f"adapter alpha must be positive, got {self.alpha}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def targets_in_order(self) -> list[Projection]:
        """Targets in declaration order of Projection (stable for seeding and files)."""
        return [p for p in Projection if p in self.target_projections]


@dataclass
class LoraAdapter:
    """Additive update s·BA with A: R × d_in and B: d_out × R."""

    a: Tensor
    b: Tensor
    scale: float
    merged: bool = False

    kind = AdapterKind.LORA

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.a, self.b]

    def parameter_count(self) -> int:
        return self.a.size + self.b.size


@dataclass
class LormaAdapter:
    """Multiplicative modulation (I + s·BA) W with A: R × d_out and B: d_out × R."""

    a: Tensor
    b: Tensor
    scale: float
    merged: bool = False

    kind = AdapterKind.LORMA

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.a, self.b]

    def parameter_count(self) -> int:
        return self.a.size + self.b.size


Adapter = LoraAdapter | LormaAdapter


def new_adapter(
    config: AdapterConfig, d_out: int, d_in: int, rng: np.random.Generator
) -> Adapter:
    """Create one trainable adapter for a d_out × d_in projection, B zero-initialised."""
    rank = config.rank
    if config.kind is AdapterKind.LORA:
        a = Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, d_in)), requires_grad=True)
        b = Tensor(np.zeros((d_out, rank)), requires_grad=True)
        return LoraAdapter(a=a, b=b, scale=config.scale)
    a = Tensor(rng.normal(0.0, ADAPTER_INIT_STD, size=(rank, d_out)), requires_grad=True)
    b = Tensor(np.zeros((d_out, rank)), requires_grad=True)
    return LormaAdapter(a=a, b=b, scale=config.scale)


# ============================================================================
# Forward passes
# ============================================================================


def _apply(m: Tensor, x: Tensor) -> Tensor:
    """m · x for a column vector, or x · mᵀ for a row batch."""
    if x.ndim == 1:
        return matmul(m, x)
    if x.ndim == 2:
        return matmul(x, transpose(m))
    raise ShapeError(f"adapter input must be 1-D or 2-D, got shape {x.shape}")


def _check_shapes(w: Tensor, adapter: Adapter, x: Tensor) -> None:
    d_out, d_in = w.shape
    width = x.shape[-1]
    if width != d_in:
        raise ShapeError(f"input width {width} does not match weight {w.shape}")
    a_cols = d_in if isinstance(adapter, LoraAdapter) else d_out
    if adapter.a.shape[1] != a_cols or adapter.b.shape != (d_out, adapter.rank):
        raise ShapeError(
            f"{adapter.kind.value} factors A {adapter.a.shape}, B {adapter.b.shape} "
            f"do not fit weight {w.shape}"
        )


def adapter_delta(w: Tensor, adapter: Adapter, x: Tensor) -> Tensor:
    """The scaled low-rank term alone, i.e. adapted output minus W x."""
    _check_shapes(w, adapter, x)
    inner = _apply(w, x) if isinstance(adapter, LormaAdapter) else x
    return scale(_apply(adapter.b, _apply(adapter.a, inner)), adapter.scale)


def lora_forward(w: Tensor, adapter: LoraAdapter, x: Tensor) -> Tensor:
    """W x + s·B(A x), computed factored; BA is never materialised.

    Raises:
        ShapeError: If W, the factors and x do not agree.
    """
    _check_shapes(w, adapter, x)
    return add(_apply(w, x), scale(_apply(adapter.b, _apply(adapter.a, x)), adapter.scale))


def lorma_forward(w: Tensor, adapter: LormaAdapter, x: Tensor) -> Tensor:
    """(I + s·BA) W x, computed as W x + s·B(A(W x))."""
    _check_shapes(w, adapter, x)
    wx = _apply(w, x)
    return add(wx, scale(_apply(adapter.b, _apply(adapter.a, wx)), adapter.scale))


def project_rows(w: Tensor, adapter: Adapter | None, x: Tensor) -> Tensor:
    """Project a row batch through W, adapted when an unmerged adapter is present."""
    if adapter is None or adapter.merged:
        return _apply(w, x)
    if isinstance(adapter, LoraAdapter):
        return lora_forward(w, adapter, x)
    return lorma_forward(w, adapter, x)


def merge(adapter: Adapter, w: Tensor) -> Tensor:
    """The dense weight an adapter is equivalent to.

    LoRA gives W + s·BA, LoRMA gives (I + s·BA) W. A zero-initialised adapter returns
    a weight equal to W bitwise. Neither the adapter nor W is modified; use
    merge_adapters to fold every adapter of a model in place.

    Raises:
        AdapterError: If the adapter was already merged.
    """
    if adapter.merged:
        raise AdapterError(f"{adapter.kind.value} adapter is already merged")
    ba = adapter.b.data @ adapter.a.data
    if isinstance(adapter, LoraAdapter):
        if ba.shape != w.shape:
            raise ShapeError(f"BA {ba.shape} does not match weight {w.shape}")
        merged = w.data + adapter.scale * ba
    else:
        if ba.shape != (w.shape[0], w.shape[0]):
            raise ShapeError(f"BA {ba.shape} cannot modulate weight {w.shape}")
        merged = w.data + adapter.scale * (ba @ w.data)
    return Tensor(merged)


def merge_adapters(model: "TransformerModel") -> "TransformerModel":
    """Replace every adapted weight by its merged form and mark the adapters merged.

    Outputs are unchanged up to rounding, but the backbone no longer matches its
    checksum and merged adapters cannot be trained further. Quantized codes of a
    replaced weight are dropped, since they no longer describe it.

    Raises:
        AdapterError: If the model has no adapters or they are already merged.
    """
    if model.adapter_config is None:
        raise AdapterError("model has no adapters to merge")
    count = 0
    for block in model.blocks:
        for projection, adapter in block.adapters.items():
            merged = merge(adapter, block.weight(projection))
            setattr(block, projection.value, merged)
            block.quantized.pop(projection.value, None)
            adapter.merged = True
            count += 1
    logger.info("merged %d %s adapter(s) into the backbone", count, model.adapter_config.kind.value)
    return model


def has_merged_adapters(model: "TransformerModel") -> bool:
    return any(a.merged for block in model.blocks for a in block.adapters.values())


# ============================================================================
# Model attachment
# ============================================================================


def attach_adapters(
    model: "TransformerModel", config: AdapterConfig, seed: int | None = None
) -> "TransformerModel":
    """Fill one adapter slot per targeted projection in every block.

    Adapter A factors are drawn from a generator derived from the model seed (or the
    seed given), so attachment is deterministic.

    Raises:
        AdapterError: If the target set is empty or adapters are already attached.
    """
    if not config.target_projections:
        raise AdapterError("adapter config targets no projection: nothing to train")
    if model.adapter_config is not None:
        raise AdapterError("model already has adapters attached")

    rng = np.random.default_rng([model.config.seed if seed is None else seed, 1])
    for block in model.blocks:
        for projection in config.targets_in_order():
            d_out, d_in = block.weight(projection).shape
            block.adapters[projection] = new_adapter(config, d_out, d_in, rng)
    model.adapter_config = config
    logger.debug(
        "attached %s adapters (R=%d, alpha=%g) to %s in %d block(s): %d trainable parameters",
        config.kind.value,
        config.rank,
        config.alpha,
        ",".join(p.value for p in config.targets_in_order()),
        len(model.blocks),
        trainable_parameter_count(model),
    )
    return model


def adapter_parameters(model: "TransformerModel") -> list[Tensor]:
    params: list[Tensor] = []
    for block in model.blocks:
        for projection in Projection:
            adapter = block.adapters.get(projection)
            if adapter is not None:
                params.extend(adapter.parameters())
    return params


def trainable_parameter_count(model: "TransformerModel") -> int:
    """Σ R·(d_in + d_out) over attached LoRA adapters (R·2·d_out for LoRMA)."""
    return sum(p.size for p in adapter_parameters(model))
