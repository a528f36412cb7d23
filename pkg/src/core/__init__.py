"""Core modules: errors, tensors with reverse-mode autodiff, configs and the encoder."""
from .exceptions import (
    VitZslError,
    ValidationError,
    DimensionError,
    ConfigurationError,
    DatasetError,
    InductiveViolationError,
    ImageFormatError,
    CheckpointFormatError,
    SpecError,
    ProtocolError,
    ContractError,
    NumericalError,
)
from .tensor import (
    ComputationTape,
    GradCheckReport,
    Tensor,
    backward,
    default_dtype,
    get_default_dtype,
    grad_check,
    set_default_dtype,
)
from .config import BENCHMARK_PRESETS, BenchmarkPreset, ModelConfig, TrainConfig, get_benchmark_preset
from .vit import (
    EncoderTrace,
    VitWeights,
    encode,
    encode_batch,
    init_weights,
    parameter_count,
    trace_shape,
    weight_shapes,
)

__all__ = [
    # Exceptions
    "VitZslError",
    "ValidationError",
    "DimensionError",
    "ConfigurationError",
    "DatasetError",
    "InductiveViolationError",
    "ImageFormatError",
    "CheckpointFormatError",
    "SpecError",
    "ProtocolError",
    "ContractError",
    "NumericalError",
    # Tensors
    "ComputationTape",
    "GradCheckReport",
    "Tensor",
    "backward",
    "default_dtype",
    "get_default_dtype",
    "grad_check",
    "set_default_dtype",
    # Config
    "BENCHMARK_PRESETS",
    "BenchmarkPreset",
    "ModelConfig",
    "TrainConfig",
    "get_benchmark_preset",
    # Encoder
    "EncoderTrace",
    "VitWeights",
    "encode",
    "encode_batch",
    "init_weights",
    "parameter_count",
    "trace_shape",
    "weight_shapes",
]
