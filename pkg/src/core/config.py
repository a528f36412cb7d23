"""Model and training configuration.

Both configs are frozen dataclasses. from_dict() rejects unknown keys so a
typo in a config file fails loudly instead of silently using a default.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional, Tuple

from .exceptions import ConfigurationError
from .tensor import resolve_dtype

logger = logging.getLogger(__name__)


def _from_dict(cls, data: Dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{cls.__name__} must be a JSON object", field=cls.__name__, value=data)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(
            f"Unknown {cls.__name__} keys: {unknown}", field=unknown[0], value=data[unknown[0]]
        )
    return cls(**data)


def _require_positive_int(name: str, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}", field=name, value=value)


@dataclass(frozen=True)
class ModelConfig:
    """Encoder architecture. Defaults are the ViT-L shape with 85 attributes."""

    image_height: int = 224
    image_width: int = 224
    channels: int = 3
    patch_size: int = 16
    hidden_dim: int = 1024
    num_layers: int = 24
    num_heads: int = 16
    mlp_width: int = 4096
    num_attributes: int = 85

    def __post_init__(self):
        self.validate()

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid_shape
        return rows * cols

    @property
    def seq_len(self) -> int:
        """Patches plus the class token."""
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.image_height, self.image_width, self.channels

    def validate(self) -> None:
        for name in ("image_height", "image_width", "channels", "patch_size", "hidden_dim",
                     "num_heads", "mlp_width", "num_attributes"):
            _require_positive_int(name, getattr(self, name))
        if isinstance(self.num_layers, bool) or not isinstance(self.num_layers, int) or self.num_layers < 0:
            raise ConfigurationError(
                f"num_layers must be a non-negative integer, got {self.num_layers!r}",
                field="num_layers", value=self.num_layers,
            )
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigurationError(
                f"Image {self.image_height}x{self.image_width} is not divisible by patch size {self.patch_size}",
                field="patch_size", value=self.patch_size,
            )
        if self.hidden_dim % self.num_heads:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}",
                field="num_heads", value=self.num_heads,
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return _from_dict(cls, data)

    def with_attributes(self, num_attributes: int) -> "ModelConfig":
        return replace(self, num_attributes=num_attributes)

    # === Presets ===

    @classmethod
    def vit_large(cls, num_attributes: int = 85) -> "ModelConfig":
        """ViT-L/16 at 224×224: 1024 wide, 24 layers, 16 heads, 4× MLP."""
        return cls(num_attributes=num_attributes)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Gradient-check scale."""
        return cls(
            image_height=16, image_width=16, channels=3, patch_size=8, hidden_dim=8,
            num_layers=2, num_heads=2, mlp_width=32, num_attributes=4,
        )

    @classmethod
    def synthetic(cls) -> "ModelConfig":
        """Desk-scale end-to-end experiment on generated data."""
        return cls(
            image_height=32, image_width=32, channels=3, patch_size=8, hidden_dim=64,
            num_layers=2, num_heads=4, mlp_width=256, num_attributes=10,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loop settings. Adam with a fixed learning rate, no schedule."""

    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    checkpoint_interval: int = 0  # steps; 0 writes only the final checkpoint
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            raise ConfigurationError(
                f"learning_rate must be > 0, got {self.learning_rate!r}",
                field="learning_rate", value=self.learning_rate,
            )
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0 <= value < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1), got {value!r}", field=name, value=value)
        if not isinstance(self.adam_eps, (int, float)) or self.adam_eps <= 0:
            raise ConfigurationError(f"adam_eps must be > 0, got {self.adam_eps!r}", field="adam_eps", value=self.adam_eps)
        _require_positive_int("batch_size", self.batch_size)
        _require_positive_int("epochs", self.epochs)
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}", field="seed", value=self.seed)
        if isinstance(self.checkpoint_interval, bool) or not isinstance(self.checkpoint_interval, int) \
                or self.checkpoint_interval < 0:
            raise ConfigurationError(
                f"checkpoint_interval must be >= 0, got {self.checkpoint_interval!r}",
                field="checkpoint_interval", value=self.checkpoint_interval,
            )
        if self.max_steps is not None:
            _require_positive_int("max_steps", self.max_steps)
        try:
            resolve_dtype(self.precision)
        except Exception:
            raise ConfigurationError(
                f"precision must be 'float32' or 'float64', got {self.precision!r}",
                field="precision", value=self.precision,
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        return _from_dict(cls, data)


# === Benchmark metadata ===


@dataclass(frozen=True)
class BenchmarkPreset:
    """Shape of a public GZSL benchmark (metadata only, no images)."""

    name: str
    granularity: str
    seen_classes: int
    unseen_classes: int
    num_attributes: int
    num_images: int

    @property
    def num_classes(self) -> int:
        return self.seen_classes + self.unseen_classes

    def model_config(self) -> ModelConfig:
        return ModelConfig.vit_large(self.num_attributes)


# CUB/SUN attribute counts follow the literature (312 / 102).
BENCHMARK_PRESETS: Dict[str, BenchmarkPreset] = {
    "AWA2": BenchmarkPreset("AWA2", "coarse", 40, 10, 85, 37322),
    "CUB": BenchmarkPreset("CUB", "fine", 150, 50, 312, 11788),
    "SUN": BenchmarkPreset("SUN", "fine", 645, 72, 102, 14340),
}


def get_benchmark_preset(name: str) -> BenchmarkPreset:
    try:
        return BENCHMARK_PRESETS[name.upper()]
    except KeyError:
        raise ConfigurationError(
            f"Unknown benchmark: {name}", field="benchmark", value=name
        )
