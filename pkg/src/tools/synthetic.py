"""Synthetic GZSL dataset generator.

Each class gets an attribute vector in [0, 1]^M. Attribute i sets the
intensity of patch cell i (row-major over the patch grid), so attributes are
visually recoverable; seeded Gaussian pixel noise is added on top. Unseen
classes get vectors away from every seen vector.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from ..core import ConfigurationError, SpecError
from .dataset import (
    ClassInfo,
    DatasetBundle,
    ManifestEntry,
    load_dataset,
    write_dataset,
    write_image,
)

logger = logging.getLogger(__name__)

_MAX_REDRAWS = 1000


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator parameters. noise is a pixel std in [0, 1] intensity units."""

    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    num_attributes: int = 10
    seen_classes: int = 8
    unseen_classes: int = 2
    samples_per_class: int = 50
    val_per_class: int = 10
    test_per_class: int = 20
    noise: float = 0.05
    min_distance: float = 0.25  # L2 distance between an unseen vector and every seen one
    seed: int = 0
    name: str = "synthetic"

    @property
    def grid_cells(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "num_attributes", "seen_classes",
                     "unseen_classes", "samples_per_class", "test_per_class"):
            value = getattr(self, name)
            if not _is_int(value) or value < 1:
                raise SpecError(f"{name} must be a positive integer, got {value!r}", {"field": name})
        if not _is_int(self.channels) or self.channels not in (1, 3):
            raise SpecError(f"channels must be 1 or 3, got {self.channels!r}", {"field": "channels"})
        if not _is_int(self.val_per_class) or self.val_per_class < 0:
            raise SpecError(f"val_per_class must be >= 0, got {self.val_per_class!r}", {"field": "val_per_class"})
        for name in ("noise", "min_distance"):
            value = getattr(self, name)
            if not _is_real(value) or value < 0:
                raise SpecError(f"{name} must be a finite number >= 0, got {value!r}", {"field": name})
        if not isinstance(self.name, str):
            raise SpecError(f"name must be a string, got {self.name!r}", {"field": "name"})
        if self.image_size % self.patch_size:
            raise SpecError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}",
                {"field": "patch_size"},
            )
        if self.grid_cells < self.num_attributes:
            raise SpecError(
                f"Patch grid has {self.grid_cells} cells but {self.num_attributes} attributes were requested",
                {"capacity": self.grid_cells, "num_attributes": self.num_attributes},
            )
        if not _is_int(self.seed) or self.seed < 0:
            raise SpecError(f"seed must be a non-negative integer, got {self.seed!r}", {"field": "seed"})

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        if not isinstance(data, dict):
            raise ConfigurationError(f"Synthetic spec must be a JSON object, got {type(data).__name__}", field="spec")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown SyntheticSpec keys: {unknown}", field=unknown[0])
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "SyntheticSpec":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read synthetic spec {path}: {e}", field="spec")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def _class_attributes(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    seen = rng.uniform(0.0, 1.0, size=(spec.seen_classes, spec.num_attributes))
    unseen = np.empty((spec.unseen_classes, spec.num_attributes))
    for i in range(spec.unseen_classes):
        for _ in range(_MAX_REDRAWS):
            candidate = rng.uniform(0.0, 1.0, size=spec.num_attributes)
            if np.linalg.norm(seen - candidate, axis=1).min() >= spec.min_distance:
                unseen[i] = candidate
                break
        else:
            raise SpecError(
                f"Could not draw unseen class {i} at distance >= {spec.min_distance} from seen classes",
                {"min_distance": spec.min_distance},
            )
    return np.concatenate([seen, unseen])


def render_pattern(attributes: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    """Noise-free H×W×C intensities in [0, 1]; cells past M stay at 0."""
    cells_per_side = spec.image_size // spec.patch_size
    grid = np.zeros(cells_per_side * cells_per_side)
    grid[: len(attributes)] = attributes
    grid = grid.reshape(cells_per_side, cells_per_side)
    image = np.kron(grid, np.ones((spec.patch_size, spec.patch_size)))
    return np.repeat(image[:, :, None], spec.channels, axis=2)


def render_image(attributes: np.ndarray, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    pattern = render_pattern(attributes, spec)
    if spec.noise > 0:
        pattern = pattern + rng.normal(0.0, spec.noise, size=pattern.shape)
    return np.rint(np.clip(pattern, 0.0, 1.0) * 255.0).astype(np.uint8)


def synth_generate(spec: SyntheticSpec, out_root: Union[str, Path]) -> DatasetBundle:
    """Write a complete bundle under out_root and return it loaded and validated."""
    spec.validate()
    out_root = Path(out_root)
    rng = np.random.default_rng(spec.seed)

    attributes = _class_attributes(spec, rng)
    total = spec.seen_classes + spec.unseen_classes
    classes = [
        ClassInfo(class_id=i, name=f"class_{i:03d}", seen=i < spec.seen_classes, attr_offset=i)
        for i in range(total)
    ]

    counts = {
        "train": lambda c: spec.samples_per_class if c.seen else 0,
        "val": lambda c: spec.val_per_class,
        "test": lambda c: spec.test_per_class,
    }
    manifests: Dict[str, List[ManifestEntry]] = {}
    for split, count in counts.items():
        entries = []
        for info in classes:
            for k in range(count(info)):
                relative = f"images/{split}/c{info.class_id:03d}_{k:04d}.ppm"
                pixels = render_image(attributes[info.attr_offset], spec, rng)
                if spec.channels == 1:
                    relative = relative[:-4] + ".pgm"
                write_image(out_root / relative, pixels)
                entries.append(ManifestEntry(relative, info.class_id))
        manifests[split] = entries

    write_dataset(
        out_root,
        name=spec.name,
        image_shape=(spec.image_size, spec.image_size, spec.channels),
        classes=classes,
        attributes=attributes,
        manifests=manifests,
    )
    logger.info(
        f"Generated synthetic bundle at {out_root}: {total} classes, "
        f"{sum(len(v) for v in manifests.values())} images"
    )
    return load_dataset(out_root)
