"""Versioned binary checkpoint format.

Layout (all integers little-endian):
    magic        8 bytes  b"VITZSLCK"
    version      u32
    header_len   u32, then header_len bytes of UTF-8 JSON
                 {model_config, train_config, step, rng_state, buffer_count}
    buffers      buffer_count times:
                   name_len u16, name (UTF-8), dtype u8 (1=float32, 2=float64),
                   ndim u8, ndim × u32 extents, raw little-endian payload

Buffer names: "weights/<param>", "adam.first/<param>", "adam.second/<param>".
"""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Optional, Union

import numpy as np

from ..core import CheckpointFormatError, ConfigurationError, DimensionError, ModelConfig, TrainConfig
from ..core.vit import weight_shapes

logger = logging.getLogger(__name__)

MAGIC = b"VITZSLCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {1: "<f4", 2: "<f8"}
_GROUPS = ("weights", "adam.first", "adam.second")


@dataclass
class Checkpoint:
    """Everything needed to resume training bit-exactly."""

    model_config: ModelConfig
    train_config: TrainConfig
    weights: Dict[str, np.ndarray]
    adam_first: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_second: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[dict] = None

    def validate(self) -> None:
        """Check every buffer against the shapes the model config implies."""
        expected = weight_shapes(self.model_config)
        for group, buffers in (("weights", self.weights), ("adam.first", self.adam_first),
                               ("adam.second", self.adam_second)):
            if group != "weights" and not buffers:
                continue
            if set(buffers) != set(expected):
                missing = sorted(set(expected) - set(buffers))[:5]
                extra = sorted(set(buffers) - set(expected))[:5]
                raise DimensionError(f"checkpoint {group}", reason=f"missing {missing}, unexpected {extra}")
            for name, shape in expected.items():
                if buffers[name].shape != shape:
                    raise DimensionError(f"checkpoint {group}/{name}", buffers[name].shape, shape)


def _write_buffer(handle: BinaryIO, name: str, array: np.ndarray) -> None:
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise CheckpointFormatError(name, f"unsupported dtype {array.dtype}")
    encoded = name.encode("utf-8")
    handle.write(struct.pack("<H", len(encoded)))
    handle.write(encoded)
    handle.write(struct.pack("<BB", code, array.ndim))
    handle.write(struct.pack(f"<{array.ndim}I", *array.shape))
    handle.write(np.ascontiguousarray(array, dtype=_CODE_DTYPES[code]).tobytes())


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffers = []
    for group, store in zip(_GROUPS, (checkpoint.weights, checkpoint.adam_first, checkpoint.adam_second)):
        buffers += [(f"{group}/{name}", array) for name, array in store.items()]

    header = json.dumps({
        "model_config": checkpoint.model_config.to_dict(),
        "train_config": checkpoint.train_config.to_dict(),
        "step": checkpoint.step,
        "rng_state": checkpoint.rng_state,
        "buffer_count": len(buffers),
    }, sort_keys=True).encode("utf-8")

    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with open(tmp_path, "wb") as handle:
            handle.write(MAGIC)
            handle.write(struct.pack("<II", FORMAT_VERSION, len(header)))
            handle.write(header)
            for name, array in buffers:
                _write_buffer(handle, name, np.asarray(array))
        os.replace(tmp_path, path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise
    logger.info(f"Checkpoint written: {path} (step {checkpoint.step}, {len(buffers)} buffers)")
    return path


class _Reader:
    def __init__(self, data: bytes, path: str):
        self._data = data
        self._pos = 0
        self._path = path

    def take(self, size: int) -> bytes:
        if self._pos + size > len(self._data):
            raise CheckpointFormatError(self._path, f"truncated at byte {self._pos} (needed {size} more)")
        chunk = self._data[self._pos:self._pos + size]
        self._pos += size
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self) -> bool:
        return self._pos == len(self._data)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint; any malformed content raises CheckpointFormatError."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointFormatError(str(path), f"cannot read ({e})")
    reader = _Reader(data, str(path))

    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(str(path), "bad magic")
    version, header_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(str(path), f"unsupported format version {version}")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
        model_config = ModelConfig.from_dict(header["model_config"])
        train_config = TrainConfig.from_dict(header["train_config"])
        buffer_count = int(header["buffer_count"])
        step = int(header["step"])
    except CheckpointFormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigurationError) as e:
        raise CheckpointFormatError(str(path), f"bad header ({e})")

    stores: Dict[str, Dict[str, np.ndarray]] = {group: {} for group in _GROUPS}
    for _ in range(buffer_count):
        (name_len,) = reader.unpack("<H")
        full_name = reader.take(name_len).decode("utf-8", errors="replace")
        code, ndim = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointFormatError(str(path), f"buffer {full_name} has unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = np.dtype(_CODE_DTYPES[code])
        payload = reader.take(int(np.prod(shape)) * dtype.itemsize)
        group, _, name = full_name.partition("/")
        if group not in stores:
            raise CheckpointFormatError(str(path), f"unknown buffer group in {full_name}")
        stores[group][name] = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(shape)
    if not reader.exhausted:
        raise CheckpointFormatError(str(path), "trailing bytes after last buffer")

    checkpoint = Checkpoint(
        model_config=model_config,
        train_config=train_config,
        weights=stores["weights"],
        adam_first=stores["adam.first"],
        adam_second=stores["adam.second"],
        step=step,
        rng_state=header.get("rng_state"),
    )
    try:
        checkpoint.validate()
    except DimensionError as e:
        raise CheckpointFormatError(str(path), f"shape mismatch ({e.message})")
    logger.info(f"Checkpoint loaded: {path} (step {step})")
    return checkpoint
