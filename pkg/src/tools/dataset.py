"""Dataset bundles: metadata, attribute matrix, split manifests and PPM/PGM images.

Bundle layout:
    <root>/dataset.json     {name, H, W, C, M, normalization, classes, manifests}
    <root>/attributes.f32   little-endian float32, num_classes × M, row-major
    <root>/<manifest>.csv   path,class_id (paths relative to root)
    <root>/images/...       binary PPM (P6) or PGM (P5), 8-bit

Validation is eager: load_dataset() checks every invariant and names the
offending file and row.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from ..core import DatasetError, ImageFormatError, InductiveViolationError, Tensor

logger = logging.getLogger(__name__)

METADATA_FILE = "dataset.json"
ATTRIBUTES_FILE = "attributes.f32"
SPLITS = ("train", "val", "test")
_MAGIC_BY_CHANNELS = {3: b"P6", 1: b"P5"}

PathLike = Union[str, Path]


# === Image codec ===


def read_image(path: PathLike, expected_shape: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    """Read an 8-bit binary PPM/PGM into an H×W×C uint8 array."""
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            magic = handle.read(2)
    except OSError as e:
        raise ImageFormatError(str(path), f"cannot open ({e})")
    if magic not in _MAGIC_BY_CHANNELS.values():
        raise ImageFormatError(str(path), f"unsupported magic {magic!r}, expected P6 or P5")

    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("RGB", "L"):
                raise ImageFormatError(str(path), f"unsupported mode {img.mode} (8-bit only)")
            pixels = np.array(img, dtype=np.uint8)
    except ImageFormatError:
        raise
    except (UnidentifiedImageError, OSError, ValueError, SyntaxError) as e:
        raise ImageFormatError(str(path), f"corrupt or truncated ({e})")

    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    if expected_shape is not None and pixels.shape != tuple(expected_shape):
        raise ImageFormatError(
            str(path), f"size {pixels.shape} does not match expected {tuple(expected_shape)}"
        )
    return pixels


def write_image(path: PathLike, pixels: np.ndarray) -> Path:
    """Write H×W×3 as PPM (P6) or H×W / H×W×1 as PGM (P5)."""
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ImageFormatError(str(path), f"pixels must be uint8, got {pixels.dtype}")
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    if not (pixels.ndim == 2 or (pixels.ndim == 3 and pixels.shape[2] == 3)):
        raise ImageFormatError(str(path), f"cannot encode shape {pixels.shape}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
    return path


# === Normalization ===


@dataclass(frozen=True)
class Normalization:
    """Per-channel (v − mean) / std applied to pixels scaled to [0, 1]."""

    mean: Tuple[float, ...] = (0.5, 0.5, 0.5)
    std: Tuple[float, ...] = (0.5, 0.5, 0.5)

    @classmethod
    def default(cls, channels: int) -> "Normalization":
        return cls(mean=(0.5,) * channels, std=(0.5,) * channels)

    def normalize(self, unit: np.ndarray) -> np.ndarray:
        return (unit - np.asarray(self.mean)) / np.asarray(self.std)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def load_image(
    path: PathLike,
    normalization: Normalization,
    expected_shape: Optional[Tuple[int, int, int]] = None,
) -> Tensor:
    """Decode, scale to [0, 1] and normalize per channel."""
    pixels = read_image(path, expected_shape)
    if pixels.shape[2] != len(normalization.mean):
        raise ImageFormatError(
            str(path), f"{pixels.shape[2]} channels, normalization has {len(normalization.mean)}"
        )
    return Tensor(normalization.normalize(pixels / 255.0))


# === Bundle ===


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    seen: bool
    attr_offset: int  # row index into attributes.f32


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    class_id: int


@dataclass
class DatasetBundle:
    """Validated dataset: geometry, classes, attribute matrix and split manifests."""

    root: Path
    name: str
    height: int
    width: int
    channels: int
    num_attributes: int
    normalization: Normalization
    classes: List[ClassInfo]
    attributes: np.ndarray  # num_classes × M, rows indexed by attr_offset
    manifests: Dict[str, List[ManifestEntry]] = field(default_factory=dict)

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels

    @property
    def train(self) -> List[ManifestEntry]:
        return self.manifests.get("train", [])

    @property
    def val(self) -> List[ManifestEntry]:
        return self.manifests.get("val", [])

    @property
    def test(self) -> List[ManifestEntry]:
        return self.manifests.get("test", [])

    def class_info(self, class_id: int) -> ClassInfo:
        for info in self.classes:
            if info.class_id == class_id:
                return info
        raise DatasetError(f"Unknown class id {class_id}")

    @property
    def seen_ids(self) -> List[int]:
        return sorted(c.class_id for c in self.classes if c.seen)

    @property
    def unseen_ids(self) -> List[int]:
        return sorted(c.class_id for c in self.classes if not c.seen)

    def attributes_for(self, class_id: int) -> np.ndarray:
        return self.attributes[self.class_info(class_id).attr_offset]

    def targets(self, entries: Sequence[ManifestEntry]) -> np.ndarray:
        return np.stack([self.attributes_for(e.class_id) for e in entries])

    def load_sample(self, entry: ManifestEntry) -> np.ndarray:
        """Normalized H×W×C array for one manifest entry."""
        return load_image(self.root / entry.path, self.normalization, self.image_shape).data

    def load_samples(self, entries: Sequence[ManifestEntry]) -> np.ndarray:
        return np.stack([self.load_sample(e) for e in entries])


def _read_manifest(root: Path, filename: str) -> List[Tuple[int, str, str]]:
    path = root / filename
    if not path.is_file():
        raise DatasetError("Missing manifest", path=str(path))
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        for row_number, row in enumerate(csv.reader(handle), start=1):
            if not row or (row_number == 1 and row[0].strip() == "path"):
                continue
            if len(row) != 2:
                raise DatasetError("Manifest row must be path,class_id", path=str(path), row=row_number)
            rows.append((row_number, row[0].strip(), row[1].strip()))
    return rows


def _parse_normalization(raw: Any, channels: int, meta_path: Path) -> Normalization:
    if raw is None:
        return Normalization.default(channels)
    if not isinstance(raw, dict):
        raise DatasetError(f"normalization must be an object, got {type(raw).__name__}", path=str(meta_path))
    try:
        mean = tuple(_finite(v) for v in raw.get("mean", []))
        std = tuple(_finite(v) for v in raw.get("std", []))
    except (TypeError, ValueError) as e:
        raise DatasetError(f"Bad normalization value ({e})", path=str(meta_path))
    if len(mean) != channels or len(std) != channels or min(std) <= 0:
        raise DatasetError("normalization needs C means and C positive stds", path=str(meta_path))
    return Normalization(mean=mean, std=std)


def _finite(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ValueError(f"expected a finite number, got {value!r}")
    return float(value)


def _flag(value: Any) -> bool:
    if not isinstance(value, bool):
        raise TypeError(f"'seen' must be true or false, got {value!r}")
    return value


def _parse_classes(raw: list, meta_path: Path, num_rows: int) -> List[ClassInfo]:
    classes = []
    seen_ids = set()
    seen_offsets = set()
    for index, item in enumerate(raw):
        try:
            info = ClassInfo(
                class_id=int(item["id"]),
                name=str(item["name"]),
                seen=_flag(item["seen"]),
                attr_offset=int(item["attr_offset"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetError(f"Bad class entry {index} ({e})", path=str(meta_path))
        if info.class_id in seen_ids:
            raise DatasetError(f"Duplicate class id {info.class_id}", path=str(meta_path))
        if not 0 <= info.attr_offset < num_rows or info.attr_offset in seen_offsets:
            raise DatasetError(
                f"Class {info.class_id} has invalid attr_offset {info.attr_offset}", path=str(meta_path)
            )
        seen_ids.add(info.class_id)
        seen_offsets.add(info.attr_offset)
        classes.append(info)
    return classes


def load_dataset(root: PathLike, check_images: bool = True) -> DatasetBundle:
    """Load and validate a dataset bundle.

    Raises:
        DatasetError: Missing file, malformed row, attribute-length mismatch
        InductiveViolationError: Train manifest references an unseen class
    """
    root = Path(root)
    meta_path = root / METADATA_FILE
    if not meta_path.is_file():
        raise DatasetError("Missing dataset metadata", path=str(meta_path))
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetError(f"Unreadable metadata ({e})", path=str(meta_path))

    try:
        height, width, channels, num_attrs = (int(meta[k]) for k in ("H", "W", "C", "M"))
        raw_classes = meta["classes"]
        manifest_files = meta["manifests"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetError(f"Metadata missing or bad field ({e})", path=str(meta_path))
    if min(height, width, channels, num_attrs) < 1:
        raise DatasetError("H, W, C and M must be positive", path=str(meta_path))

    if not isinstance(raw_classes, list) or not isinstance(manifest_files, dict):
        raise DatasetError("'classes' must be a list and 'manifests' an object", path=str(meta_path))

    normalization = _parse_normalization(meta.get("normalization"), channels, meta_path)

    attr_path = root / ATTRIBUTES_FILE
    if not attr_path.is_file():
        raise DatasetError("Missing attribute matrix", path=str(attr_path))
    raw_attrs = attr_path.read_bytes()
    num_classes = len(raw_classes)
    expected_bytes = num_classes * num_attrs * 4
    if len(raw_attrs) != expected_bytes:
        raise DatasetError(
            f"Attribute-length mismatch: {len(raw_attrs)} bytes, expected {expected_bytes} "
            f"({num_classes} classes × {num_attrs} attributes)",
            path=str(attr_path),
        )
    attributes = np.frombuffer(raw_attrs, dtype="<f4").astype(np.float64).reshape(num_classes, num_attrs)
    if not np.all(np.isfinite(attributes)):
        bad_row = int(np.argwhere(~np.isfinite(attributes))[0][0])
        raise DatasetError("Non-finite attribute value", path=str(attr_path), row=bad_row)

    classes = _parse_classes(raw_classes, meta_path, num_classes)
    by_id = {c.class_id: c for c in classes}

    missing_splits = [s for s in SPLITS if s not in manifest_files]
    if missing_splits:
        raise DatasetError(f"Manifests must declare {list(SPLITS)}, missing {missing_splits}", path=str(meta_path))

    manifests: Dict[str, List[ManifestEntry]] = {}
    for split in SPLITS:
        manifest_path = root / manifest_files[split]
        entries = []
        for row_number, image_path, raw_id in _read_manifest(root, manifest_files[split]):
            try:
                class_id = int(raw_id)
            except ValueError:
                raise DatasetError(f"Bad class id {raw_id!r}", path=str(manifest_path), row=row_number)
            if class_id not in by_id:
                raise DatasetError(f"Unknown class id {class_id}", path=str(manifest_path), row=row_number)
            if split == "train" and not by_id[class_id].seen:
                raise InductiveViolationError(class_id, path=str(manifest_path), row=row_number)
            if check_images and not (root / image_path).is_file():
                raise DatasetError(f"Missing image {image_path}", path=str(manifest_path), row=row_number)
            entries.append(ManifestEntry(image_path, class_id))
        manifests[split] = entries

    test_path = str(root / manifest_files["test"])
    if not manifests["test"]:
        raise DatasetError("Test manifest is empty", path=test_path)
    test_seen = {by_id[e.class_id].seen for e in manifests["test"]}
    if test_seen != {True, False}:
        raise DatasetError("Test manifest needs both seen- and unseen-class samples", path=test_path)

    bundle = DatasetBundle(
        root=root,
        name=str(meta.get("name", root.name)),
        height=height,
        width=width,
        channels=channels,
        num_attributes=num_attrs,
        normalization=normalization,
        classes=classes,
        attributes=attributes,
        manifests=manifests,
    )
    logger.info(
        f"Loaded dataset '{bundle.name}': {len(bundle.seen_ids)} seen + {len(bundle.unseen_ids)} unseen "
        f"classes, M={num_attrs}, train/val/test = "
        f"{len(bundle.train)}/{len(bundle.val)}/{len(bundle.test)}"
    )
    return bundle


def write_dataset(
    root: PathLike,
    *,
    name: str,
    image_shape: Tuple[int, int, int],
    classes: Sequence[ClassInfo],
    attributes: np.ndarray,
    manifests: Dict[str, Sequence[ManifestEntry]],
    normalization: Optional[Normalization] = None,
) -> Path:
    """Write dataset.json, attributes.f32 and the manifest CSVs (images are written by the caller)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    height, width, channels = image_shape
    normalization = normalization or Normalization.default(channels)
    meta = {
        "name": name,
        "H": height,
        "W": width,
        "C": channels,
        "M": int(attributes.shape[1]),
        "normalization": normalization.to_dict(),
        "classes": [
            {"id": c.class_id, "name": c.name, "seen": bool(c.seen), "attr_offset": c.attr_offset}
            for c in classes
        ],
        "manifests": {split: f"{split}.csv" for split in SPLITS},
    }
    (root / METADATA_FILE).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (root / ATTRIBUTES_FILE).write_bytes(np.asarray(attributes, dtype="<f4").tobytes())
    for split in SPLITS:
        with open(root / f"{split}.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["path", "class_id"])
            for entry in manifests.get(split, ()):
                writer.writerow([entry.path, entry.class_id])
    return root
