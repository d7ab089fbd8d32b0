"""Experiment configuration: defaults, JSON files, command-line overrides, run directories.

Values are resolved with the precedence command line > file > defaults. The resolved
configuration is written into every run directory as resolved_config.json; loading
that file reproduces the run.
"""

import hashlib
import json
import logging
import types
import typing
from collections.abc import Sequence
from dataclasses import dataclass, field, fields, is_dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar, get_args, get_origin, get_type_hints

from src.adapters import RANK_ALPHA_GRID, AdapterKind
from src.data import Domain, FileFormat, LangPair
from src.errors import ConfigError
from src.metrics import SWEEP_LAYERS
from src.prompting import DEFAULT_CONCURRENCY, PromptKind
from src.qe_head import TrainConfig
from src.transformer import ModelConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.json"
SCORER_CLIENTS = ("fixed", "echo", "hash", "http")

C = TypeVar("C")


@dataclass(frozen=True)
class SweepGrid:
    """Cells trained by `sweep`: every kind × (rank, alpha) pairing × layer."""

    rank_alpha: tuple[tuple[int, float], ...] = RANK_ALPHA_GRID
    layers: tuple[int, ...] = SWEEP_LAYERS
    kinds: tuple[AdapterKind, ...] = (AdapterKind.LORA,)
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.rank_alpha or not self.layers or not self.kinds:
            raise ConfigError("grid.rank_alpha, grid.layers and grid.kinds must be non-empty")
        if self.workers < 1:
            raise ConfigError(f"grid.workers must be >= 1, got {self.workers}")


@dataclass(frozen=True)
class DataConfig:
    """A dataset directory, or a synthetic dataset when `path` is unset."""

    path: str | None = None
    format: FileFormat | None = None
    strict: bool = True
    synthetic_n: int = 200
    noise_std: float = 2.0
    domain: Domain = Domain.GENERAL
    lang_pairs: tuple[LangPair, ...] = (LangPair.EN_HI,)

    def __post_init__(self) -> None:
        if self.synthetic_n < 2:
            raise ConfigError(f"data.synthetic_n must be >= 2, got {self.synthetic_n}")
        if not self.lang_pairs:
            raise ConfigError("data.lang_pairs must not be empty")


@dataclass(frozen=True)
class PromptConfig:
    kind: PromptKind = PromptKind.ZERO_SHOT
    k: int = 3
    client: str = "hash"
    fixed_response: str = "Score: 50"
    endpoint: str = ""
    model: str = ""
    template_dir: str | None = None
    concurrency: int = DEFAULT_CONCURRENCY
    retry_attempts: int = 3
    temperature: float = 0.0
    max_tokens: int = 16

    def __post_init__(self) -> None:
        if self.client not in SCORER_CLIENTS:
            raise ConfigError(
                f"prompt.client must be one of {', '.join(SCORER_CLIENTS)}, got {self.client!r}"
            )
        if self.concurrency < 1 or self.retry_attempts < 1:
            raise ConfigError("prompt.concurrency and prompt.retry_attempts must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one command needs. `seed` drives synthetic data and exemplar choice."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: SweepGrid = field(default_factory=SweepGrid)
    data: DataConfig = field(default_factory=DataConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    output_dir: str = "runs"
    seed: int = 0
    quantize: bool = False


# ============================================================================
# JSON conversion
# ============================================================================


def to_jsonable(value: Any) -> Any:
    """Plain JSON value for a (nested) config dataclass."""
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: to_jsonable(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (set, frozenset)):
        return sorted(to_jsonable(v) for v in value)
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    return value


def _convert(tp: Any, value: Any, path: str) -> Any:
    origin = get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _convert(arg, value, path)
            except ConfigError as e:
                errors.append(str(e))
        raise ConfigError("; ".join(errors) or f"{path}: invalid value {value!r}")
    if isinstance(tp, type) and is_dataclass(tp):
        return from_jsonable(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            choices = ", ".join(str(m.value) for m in tp)
            raise ConfigError(f"{path}: {value!r} is not one of {choices}") from None
    if origin in (tuple, list, frozenset, set):
        if not isinstance(value, list | tuple):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        args = get_args(tp)
        if origin is tuple and args and args[-1] is not Ellipsis:
            if len(args) != len(value):
                raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
            pairs = enumerate(zip(args, value, strict=True))
            return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in pairs)
        item_type = args[0] if args else Any
        items = [_convert(item_type, v, f"{path}[{i}]") for i, v in enumerate(value)]
        return origin(items)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true or false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_jsonable(cls: type[C], payload: Any, path: str = "") -> C:
    """Build a config dataclass from JSON; absent keys keep their defaults.

    Raises:
        ConfigError: Unknown keys, wrong value types, or values the dataclass rejects.
    """
    name = path or cls.__name__
    if not isinstance(payload, dict):
        raise ConfigError(f"{name}: expected an object, got {payload!r}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(payload) - known)
    if unknown:
        prefix = f"{path}." if path else ""
        raise ConfigError(f"unknown configuration key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {
        key: _convert(hints[key], value, f"{path}.{key}" if path else key)
        for key, value in payload.items()
    }
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{name}: {e}") from e


# ============================================================================
# Loading and overrides
# ============================================================================


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(override: str) -> tuple[list[str], Any]:
    """Split `dotted.key=value`; the value is JSON when it parses, else a string."""
    key, sep, raw = override.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {override!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(payload: dict, overrides: Sequence[str]) -> dict:
    result = json.loads(json.dumps(payload))
    for override in overrides:
        keys, value = parse_override(override)
        node = result
        for depth, key in enumerate(keys[:-1]):
            child = node.get(key)
            if not isinstance(child, dict):
                raise ConfigError(f"unknown configuration key: {'.'.join(keys[: depth + 1])}")
            node = child
        if keys[-1] not in node:
            raise ConfigError(f"unknown configuration key: {'.'.join(keys)}")
        node[keys[-1]] = value
    return result


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Defaults, then the JSON file (if any), then `key=value` overrides.

    Raises:
        ConfigError: Unreadable file, invalid JSON, unknown keys or invalid values.
    """
    payload = to_jsonable(ExperimentConfig())
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: the top level must be a JSON object")
        payload = _merge(payload, loaded)
    payload = apply_overrides(payload, overrides)
    return from_jsonable(ExperimentConfig, payload)


def config_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(to_jsonable(cfg), sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_resolved_config(run_dir: Path, cfg: ExperimentConfig) -> Path:
    path = run_dir / RESOLVED_CONFIG_FILE
    path.write_text(
        json.dumps(to_jsonable(cfg), indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return path


def make_run_dir(
    output_dir: str | Path, command: str, cfg: ExperimentConfig, now: datetime | None = None
) -> Path:
    """Create `<output_dir>/<command>-<UTC timestamp>-<hash8>` holding the resolved config.

    An existing directory is never reused; a numeric suffix is added instead.
    """
    stamp = (now or datetime.now(timezone.utc)).strftime("%Y%m%dT%H%M%SZ")
    base = Path(output_dir) / f"{command}-{stamp}-{config_hash(cfg)[:8]}"
    run_dir, suffix = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    write_resolved_config(run_dir, cfg)
    logger.info("run directory %s", run_dir)
    return run_dir

