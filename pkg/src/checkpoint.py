"""Versioned JSON checkpoints for trained QE models.

Float arrays are stored base64-encoded with dtype and shape, so a save/load cycle is
bit-exact. Quantized matrices are stored as their 4-bit codes and scales only; the
dequantized values are rebuilt on load. The backbone checksum recorded at training
time is verified after loading.
"""

import base64
import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from src.adapters import (
    AdapterConfig,
    AdapterKind,
    LoraAdapter,
    LormaAdapter,
    Projection,
    has_merged_adapters,
)
from src.config import from_jsonable, to_jsonable
from src.errors import CheckpointError, ConfigError
from src.numerics import Tensor
from src.qe_head import RegressionHead, TrainConfig, TrainedQeModel
from src.quantize import QuantizedWeights, dequantize
from src.transformer import ModelConfig, TransformerModel, base_checksum, init_model

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qe-lab-checkpoint/1"
HEAD_PARAMETERS = ("w1", "b1", "w2", "b2")


def encode_array(array: np.ndarray) -> dict[str, Any]:
    array = np.ascontiguousarray(array)
    return {
        "dtype": array.dtype.str,
        "shape": list(array.shape),
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def decode_array(payload: dict[str, Any]) -> np.ndarray:
    try:
        raw = base64.b64decode(payload["data"], validate=True)
        array = np.frombuffer(raw, dtype=np.dtype(payload["dtype"]))
        return array.reshape(tuple(payload["shape"])).copy()
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed array entry: {e}") from e


def _owner(model: TransformerModel, name: str) -> tuple[Any, str, dict[str, QuantizedWeights]]:
    """Object holding a named base parameter, its attribute name and quantized store."""
    if not name.startswith("blocks."):
        return model, name, model.quantized
    _, index, attr = name.split(".", 2)
    block = model.blocks[int(index)]
    return block, attr, block.quantized


def save_checkpoint(trained: TrainedQeModel, path: str | Path) -> Path:
    """Write a trained model, its adapters, head and training metadata to JSON.

    Raises:
        CheckpointError: If the adapters have been merged into the backbone.
    """
    model = trained.model
    if has_merged_adapters(model):
        raise CheckpointError("cannot checkpoint a model whose adapters are merged")
    quantized = dict(model.named_quantized())
    adapters = {}
    for i, block in enumerate(model.blocks):
        for projection, adapter in block.adapters.items():
            adapters[f"blocks.{i}.{projection.value}"] = {
                "a": encode_array(adapter.a.data),
                "b": encode_array(adapter.b.data),
            }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model_config": to_jsonable(model.config),
        "quantized": model.is_quantized,
        "base": {
            name: encode_array(tensor.data)
            for name, tensor in model.named_base_parameters()
            if name not in quantized
        },
        "quantized_weights": {
            name: {
                "codes": encode_array(q.codes),
                "scales": encode_array(q.scales),
                "shape": list(q.shape),
                "block_size": q.block_size,
            }
            for name, q in quantized.items()
        },
        "adapter_config": to_jsonable(model.adapter_config),
        "adapters": adapters,
        "head": {name: encode_array(getattr(trained.head, name).data) for name in HEAD_PARAMETERS},
        "layer_index": trained.layer_index,
        "train_config": to_jsonable(trained.config),
        "loss_trace": list(trained.loss_trace),
        "base_checksum": trained.base_checksum,
    }
    path = Path(path)
    path.write_text(json.dumps(payload), encoding="utf-8")
    logger.info("saved checkpoint %s (%d adapters)", path, len(adapters))
    return path


def _restore_base(model: TransformerModel, payload: dict[str, Any]) -> None:
    base = payload["base"]
    stored_quantized = payload["quantized_weights"]
    for name, tensor in model.named_base_parameters():
        owner, attr, store = _owner(model, name)
        if name in stored_quantized:
            entry = stored_quantized[name]
            q = QuantizedWeights(
                codes=decode_array(entry["codes"]),
                scales=decode_array(entry["scales"]),
                shape=tuple(entry["shape"]),
                block_size=int(entry["block_size"]),
            )
            store[attr] = q
            setattr(owner, attr, dequantize(q))
        elif name in base:
            values = decode_array(base[name])
            if values.shape != tensor.shape:
                raise CheckpointError(
                    f"{name}: stored shape {values.shape} does not match {tensor.shape}"
                )
            setattr(owner, attr, Tensor(values, requires_grad=False))
        else:
            raise CheckpointError(f"checkpoint lacks base parameter {name}")


def _restore_adapters(model: TransformerModel, payload: dict[str, Any]) -> None:
    if payload["adapter_config"] is None:
        return
    config = from_jsonable(AdapterConfig, payload["adapter_config"], "adapter_config")
    adapter_cls = LoraAdapter if config.kind is AdapterKind.LORA else LormaAdapter
    for key, entry in payload["adapters"].items():
        _, index, projection = key.split(".")
        model.blocks[int(index)].adapters[Projection(projection)] = adapter_cls(
            a=Tensor(decode_array(entry["a"]), requires_grad=True),
            b=Tensor(decode_array(entry["b"]), requires_grad=True),
            scale=config.scale,
        )
    model.adapter_config = config


def load_checkpoint(path: str | Path) -> TrainedQeModel:
    """Rebuild a TrainedQeModel from a checkpoint written by save_checkpoint.

    Raises:
        CheckpointError: Unreadable file, wrong format, missing entries, or a backbone
            whose checksum differs from the one recorded at training time.
    """
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path} is not a JSON checkpoint: {e.msg}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        found = payload.get("format") if isinstance(payload, dict) else None
        raise CheckpointError(f"{path}: expected format {CHECKPOINT_FORMAT!r}, found {found!r}")

    try:
        model_config = from_jsonable(ModelConfig, payload["model_config"], "model_config")
        train_config = from_jsonable(TrainConfig, payload["train_config"], "train_config")
        model = init_model(model_config, quantize=False)
        _restore_base(model, payload)
        _restore_adapters(model, payload)
        head = RegressionHead(
            **{
                name: Tensor(decode_array(payload["head"][name]), requires_grad=True)
                for name in HEAD_PARAMETERS
            }
        )
        layer_index = int(payload["layer_index"])
        loss_trace = [float(v) for v in payload["loss_trace"]]
        checksum = str(payload["base_checksum"])
    except (KeyError, IndexError, TypeError, ValueError, ConfigError) as e:
        raise CheckpointError(f"{path}: incomplete or inconsistent checkpoint: {e}") from e

    if base_checksum(model) != checksum:
        raise CheckpointError(f"{path}: backbone checksum mismatch")
    logger.info("loaded checkpoint %s", path)
    return TrainedQeModel(
        model=model,
        head=head,
        layer_index=layer_index,
        config=train_config,
        loss_trace=loss_trace,
        base_checksum=checksum,
    )
