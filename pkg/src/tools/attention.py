"""Attention heatmaps from encoder traces.

Rollout averages each layer's heads, mixes in the residual path
(0.5·A + 0.5·I, rows renormalized) and multiplies the layers together.
The class-token row, without its own column, is the heatmap over patches.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from ..core import ContractError, DimensionError, EncoderTrace
from .dataset import write_image

logger = logging.getLogger(__name__)

METHODS = ("rollout", "last")
RESIDUAL_WEIGHT = 0.5
CONSTANT_LEVEL = 0.5
_FLAT_RANGE = 1e-12


@dataclass
class Heatmap:
    """Patch-grid map in [0, 1] for one image."""

    grid: np.ndarray  # (H/P, W/P)
    image_id: str
    layers: Tuple[int, int]  # inclusive layer range
    method: str = "rollout"

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape


def normalize_grid(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant grid maps to CONSTANT_LEVEL everywhere."""
    low, high = float(values.min()), float(values.max())
    if high - low <= _FLAT_RANGE:
        return np.full(values.shape, CONSTANT_LEVEL)
    return (values - low) / (high - low)


def _mix_residual(attention: np.ndarray) -> np.ndarray:
    mixed = RESIDUAL_WEIGHT * attention + (1.0 - RESIDUAL_WEIGHT) * np.eye(attention.shape[-1])
    return mixed / mixed.sum(axis=-1, keepdims=True)


def attention_rollout(
    trace: EncoderTrace,
    *,
    image_id: str = "",
    layers: Optional[Tuple[int, int]] = None,
    method: str = "rollout",
) -> Heatmap:
    """Heatmap for one trace.

    Args:
        layers: Inclusive (first, last) layer range; defaults to every layer
        method: "rollout" for the residual-mixed product, "last" for the
            head-averaged attention of the last layer in range

    Raises:
        ContractError: Trace has no layers or method is unknown
    """
    attention = np.asarray(trace.attention, dtype=np.float64)
    if attention.ndim != 4 or attention.shape[0] == 0:
        raise ContractError("attention_rollout needs a trace with at least one layer", {"shape": list(attention.shape)})
    if method not in METHODS:
        raise ContractError(f"Unknown heatmap method {method!r}; expected one of {METHODS}")
    num_layers, _, seq_len, _ = attention.shape
    rows, cols = trace.grid_shape
    if rows * cols != seq_len - 1:
        raise DimensionError("attention_rollout", attention.shape, (num_layers, -1, rows * cols + 1, rows * cols + 1))

    first, last = layers if layers is not None else (0, num_layers - 1)
    if not 0 <= first <= last < num_layers:
        raise ContractError(f"Layer range {(first, last)} outside 0..{num_layers - 1}")

    head_mean = attention.mean(axis=1)
    if method == "last":
        joint = head_mean[last]
    else:
        joint = np.eye(seq_len)
        for layer in range(first, last + 1):
            joint = _mix_residual(head_mean[layer]) @ joint

    raw = joint[0, 1:].reshape(rows, cols)
    if np.ptp(raw) <= _FLAT_RANGE:
        logger.warning(f"Constant attention grid for {image_id or 'image'}; heatmap set to {CONSTANT_LEVEL}")
    grid = normalize_grid(raw)
    return Heatmap(grid=grid, image_id=image_id, layers=(first, last), method=method)


def upsample(grid: np.ndarray, image_shape: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor upsampling of the patch grid to H×W."""
    height, width = image_shape
    rows, cols = grid.shape
    if height % rows or width % cols:
        raise DimensionError("upsample", grid.shape, (height, width), reason="image not a multiple of the grid")
    return np.kron(grid, np.ones((height // rows, width // cols)))


def export_heatmap(hm: Heatmap, path: Union[str, Path], image_shape: Tuple[int, int]) -> Path:
    """Write the upsampled heatmap as an 8-bit PGM."""
    pixels = np.rint(upsample(hm.grid, image_shape) * 255.0).astype(np.uint8)
    path = write_image(path, pixels[:, :, None])
    logger.debug(f"Heatmap written: {path}")
    return path


def blend(hm: Heatmap, image: np.ndarray) -> np.ndarray:
    """0.5·image + 0.5·red ramp of the heatmap, as H×W×3 uint8."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] not in (1, 3):
        raise DimensionError("overlay", image.shape, reason="expected H×W×1 or H×W×3")
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    heat = upsample(hm.grid, image.shape[:2])
    color = np.zeros(image.shape, dtype=np.float64)
    color[:, :, 0] = 255.0 * heat
    mixed = 0.5 * image.astype(np.float64) + 0.5 * color
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def overlay(hm: Heatmap, image: np.ndarray, path: Union[str, Path]) -> Path:
    """Write the blended overlay as an 8-bit PPM."""
    path = write_image(path, blend(hm, image))
    logger.debug(f"Overlay written: {path}")
    return path
