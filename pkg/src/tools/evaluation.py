"""Zero-shot classification and the GZSL evaluation protocol.

Predicted attribute vectors are compared to class attribute vectors by
cosine similarity. In the generalized setting every seen-class score is
lowered by a calibration factor γ chosen on the validation split.
Accuracy is averaged per class, then S, U and their harmonic mean H are
reported in percent.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core import ContractError, DimensionError, ProtocolError, Tensor, VitWeights
from ..core.tensor import recording_paused
from .dataset import DatasetBundle, ManifestEntry
from .training import predict_attributes_batch

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DEFAULT_GRID_SIZE = 101
_ZERO_NORM = 0.0


# === Class embeddings ===


@dataclass(frozen=True)
class ClassEmbeddings:
    """Class attribute vectors sorted by class id, with the seen flag per class."""

    ids: Tuple[int, ...]
    matrix: np.ndarray  # num_classes × M
    seen: Tuple[bool, ...]

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids) or len(self.seen) != len(self.ids):
            raise DimensionError("ClassEmbeddings", self.matrix.shape, (len(self.ids), -1))
        if list(self.ids) != sorted(set(self.ids)):
            raise ProtocolError("Class ids must be unique and sorted", {"ids": list(self.ids)})
        norms = np.linalg.norm(self.matrix, axis=1)
        zero = [cid for cid, n in zip(self.ids, norms) if n <= _ZERO_NORM]
        if zero:
            raise ProtocolError(f"Zero-norm attribute vectors for classes {zero}", {"class_ids": zero})

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle) -> "ClassEmbeddings":
        infos = sorted(bundle.classes, key=lambda c: c.class_id)
        return cls(
            ids=tuple(c.class_id for c in infos),
            matrix=np.stack([bundle.attributes[c.attr_offset] for c in infos]).astype(np.float64),
            seen=tuple(c.seen for c in infos),
        )

    @property
    def num_attributes(self) -> int:
        return self.matrix.shape[1]

    @property
    def seen_mask(self) -> np.ndarray:
        return np.asarray(self.seen, dtype=bool)

    @property
    def seen_ids(self) -> List[int]:
        return [cid for cid, s in zip(self.ids, self.seen) if s]

    @property
    def unseen_ids(self) -> List[int]:
        return [cid for cid, s in zip(self.ids, self.seen) if not s]

    def require(self, class_ids: Iterable[int]) -> None:
        """Raise ProtocolError if any class id has no embedding."""
        missing = sorted(set(class_ids) - set(self.ids))
        if missing:
            raise ProtocolError(f"No attribute vector for classes {missing}", {"class_ids": missing})


# === Scoring ===


def _values(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def cosine_similarity(a, b) -> float:
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise DimensionError("cosine_similarity", a.shape, b.shape)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a <= _ZERO_NORM or norm_b <= _ZERO_NORM:
        raise ContractError("cosine_similarity of a zero-norm vector")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def cosine_scores(preds, emb: ClassEmbeddings) -> np.ndarray:
    """N×M predictions -> N×C cosine matrix (one row per sample, columns in emb.ids order)."""
    preds = _values(preds)
    if preds.ndim == 1:
        preds = preds[None, :]
    if preds.shape[1] != emb.num_attributes:
        raise DimensionError("cosine_scores", preds.shape, (preds.shape[0], emb.num_attributes))
    norms = np.linalg.norm(preds, axis=1)
    if np.any(norms <= _ZERO_NORM):
        raise ContractError("cosine_scores: zero-norm prediction", {"rows": np.flatnonzero(norms <= 0).tolist()})
    class_norms = np.linalg.norm(emb.matrix, axis=1)
    return np.clip((preds @ emb.matrix.T) / np.outer(norms, class_norms), -1.0, 1.0)


def calibrate(cosines: np.ndarray, seen_mask: np.ndarray, gamma: float) -> np.ndarray:
    return cosines - gamma * seen_mask.astype(cosines.dtype)


def score_classes(pred, emb: ClassEmbeddings, gamma: float) -> np.ndarray:
    """score_c = cos(pred, emb_c) − γ·[c is seen], in emb.ids order."""
    return calibrate(cosine_scores(pred, emb)[0], emb.seen_mask, gamma)


def _argmax_ids(scores: np.ndarray, ids: Sequence[int]) -> np.ndarray:
    # np.argmax returns the first maximum; ids are sorted so ties go to the lowest id
    return np.asarray(ids)[np.argmax(scores, axis=-1)]


def classify(pred, emb: ClassEmbeddings, gamma: float = 0.0) -> int:
    return int(_argmax_ids(score_classes(pred, emb, gamma), emb.ids))


def predict_labels(cosines: np.ndarray, emb: ClassEmbeddings, gamma: float = 0.0) -> np.ndarray:
    """Class id per row of a precomputed cosine matrix."""
    return _argmax_ids(calibrate(cosines, emb.seen_mask, gamma), emb.ids)


# === Metrics ===


def per_class_accuracies(predictions, truths, class_ids: Iterable[int]) -> Dict[int, float]:
    """Top-1 accuracy (%) for each class in class_ids over that class's samples."""
    predictions = np.asarray(predictions)
    truths = np.asarray(truths)
    if predictions.shape != truths.shape:
        raise DimensionError("per_class_accuracies", predictions.shape, truths.shape)
    accuracies = {}
    for cid in class_ids:
        mask = truths == cid
        count = int(mask.sum())
        if count == 0:
            raise ProtocolError(f"Class {cid} has no samples", {"class_id": int(cid)})
        accuracies[int(cid)] = 100.0 * float(np.sum(predictions[mask] == cid)) / count
    return accuracies


def per_class_top1(predictions, truths, class_ids: Iterable[int]) -> float:
    """Unweighted mean over classes of per-class top-1 accuracy (%)."""
    accuracies = per_class_accuracies(predictions, truths, class_ids)
    if not accuracies:
        raise ProtocolError("Empty class set")
    return float(np.mean(list(accuracies.values())))


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen < 0 or unseen < 0:
        raise ContractError(f"harmonic_mean needs non-negative inputs, got {seen}, {unseen}")
    total = seen + unseen
    if total == 0:
        return 0.0
    return 2.0 * seen * unseen / total


@dataclass
class EvalReport:
    gamma: float
    S: float
    U: float
    H: float
    per_class: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gamma": round(self.gamma, 4),
            "S": round(self.S, 4),
            "U": round(self.U, 4),
            "H": round(self.H, 4),
            "per_class": {str(cid): round(acc, 4) for cid, acc in sorted(self.per_class.items())},
        }

    def write_json(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return path

    def summary(self) -> str:
        return f"γ={self.gamma:.4f} S={self.S:.2f} U={self.U:.2f} H={self.H:.2f}"


def _present_ids(truths: np.ndarray, ids: Sequence[int]) -> List[int]:
    present = set(np.unique(truths).tolist())
    return [cid for cid in ids if cid in present]


def gzsl_report(cosines: np.ndarray, truths, emb: ClassEmbeddings, gamma: float) -> EvalReport:
    """S, U and H over the classes present in truths; predictions range over all classes.

    Raises:
        ProtocolError: No seen-class or no unseen-class samples
    """
    truths = np.asarray(truths)
    emb.require(np.unique(truths).tolist())
    seen_ids = _present_ids(truths, emb.seen_ids)
    unseen_ids = _present_ids(truths, emb.unseen_ids)
    if not seen_ids or not unseen_ids:
        raise ProtocolError(
            "GZSL evaluation needs samples from both seen and unseen classes",
            {"seen_classes": len(seen_ids), "unseen_classes": len(unseen_ids)},
        )
    predictions = predict_labels(cosines, emb, gamma)
    per_class = per_class_accuracies(predictions, truths, seen_ids + unseen_ids)
    seen_acc = float(np.mean([per_class[c] for c in seen_ids]))
    unseen_acc = float(np.mean([per_class[c] for c in unseen_ids]))
    return EvalReport(
        gamma=float(gamma),
        S=seen_acc,
        U=unseen_acc,
        H=harmonic_mean(seen_acc, unseen_acc),
        per_class=per_class,
    )


def zsl_top1(cosines: np.ndarray, truths, emb: ClassEmbeddings) -> float:
    """Conventional ZSL accuracy: unseen-class samples ranked among unseen classes only."""
    truths = np.asarray(truths)
    unseen_mask = ~emb.seen_mask
    unseen_ids = emb.unseen_ids
    rows = np.isin(truths, unseen_ids)
    if not unseen_ids or not rows.any():
        raise ProtocolError("ZSL accuracy needs unseen-class samples")
    predictions = _argmax_ids(cosines[rows][:, unseen_mask], unseen_ids)
    return per_class_top1(predictions, truths[rows], _present_ids(truths[rows], unseen_ids))


# === Calibration ===


def default_gamma_grid(size: int = DEFAULT_GRID_SIZE) -> np.ndarray:
    return np.linspace(0.0, 1.0, size)


@dataclass(frozen=True)
class SweepPoint:
    gamma: float
    S: float
    U: float
    H: float


@dataclass
class CalibrationSweep:
    best_gamma: float
    curve: List[SweepPoint]

    @property
    def best(self) -> SweepPoint:
        return next(p for p in self.curve if p.gamma == self.best_gamma)

    def write_csv(self, path: PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["gamma", "S", "U", "H"])
            for p in self.curve:
                writer.writerow([f"{p.gamma:.4f}", f"{p.S:.4f}", f"{p.U:.4f}", f"{p.H:.4f}"])
        return path


def calibration_sweep(
    cosines: np.ndarray,
    truths,
    emb: ClassEmbeddings,
    grid: Optional[Sequence[float]] = None,
) -> CalibrationSweep:
    """Evaluate H at every γ of the grid on validation scores and keep the best.

    Ties on H go to the smallest γ.

    Raises:
        ProtocolError: Empty grid, or validation set lacks seen or unseen samples
    """
    grid = default_gamma_grid() if grid is None else np.asarray(list(grid), dtype=np.float64)
    if grid.size == 0:
        raise ProtocolError("Empty γ grid")
    curve = []
    for gamma in np.sort(grid):
        report = gzsl_report(cosines, truths, emb, float(gamma))
        curve.append(SweepPoint(float(gamma), report.S, report.U, report.H))
    best = curve[0]
    for point in curve[1:]:
        if point.H > best.H:
            best = point
    logger.info(f"Calibration: best γ={best.gamma:.4f} (val S={best.S:.2f} U={best.U:.2f} H={best.H:.2f})")
    return CalibrationSweep(best_gamma=best.gamma, curve=curve)


# === Inference over manifests ===


@dataclass
class ScoreMatrix:
    """Cosine scores for a list of samples plus their ground-truth class ids."""

    emb: ClassEmbeddings
    cosines: np.ndarray  # N × C
    truths: np.ndarray  # N

    def report(self, gamma: float) -> EvalReport:
        return gzsl_report(self.cosines, self.truths, self.emb, gamma)

    def sweep(self, grid: Optional[Sequence[float]] = None) -> CalibrationSweep:
        return calibration_sweep(self.cosines, self.truths, self.emb, grid)


def _predict_batch(weights: VitWeights, images: np.ndarray) -> np.ndarray:
    with recording_paused():
        return predict_attributes_batch(Tensor(images), weights).data.copy()


def predict_manifest(
    weights: VitWeights,
    bundle: DatasetBundle,
    entries: Sequence[ManifestEntry],
    batch_size: int = 32,
    workers: int = 1,
) -> np.ndarray:
    """N×M predicted attribute vectors; batches run on a thread pool, results kept in order."""
    if weights.config.num_attributes != bundle.num_attributes:
        raise DimensionError(
            "predict_manifest", (weights.config.num_attributes,), (bundle.num_attributes,),
            reason="checkpoint M differs from dataset M",
        )
    if not entries:
        return np.zeros((0, bundle.num_attributes))
    batches = [entries[i:i + batch_size] for i in range(0, len(entries), batch_size)]

    def run(batch: Sequence[ManifestEntry]) -> np.ndarray:
        return _predict_batch(weights, bundle.load_samples(batch))

    if workers <= 1:
        results = [run(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, batches))
    return np.concatenate(results, axis=0)


def collect_scores(
    weights: VitWeights,
    bundle: DatasetBundle,
    entries: Sequence[ManifestEntry],
    batch_size: int = 32,
    workers: int = 1,
) -> ScoreMatrix:
    emb = ClassEmbeddings.from_bundle(bundle)
    preds = predict_manifest(weights, bundle, entries, batch_size, workers)
    logger.info(f"Scored {len(entries)} samples against {len(emb.ids)} classes")
    return ScoreMatrix(emb=emb, cosines=cosine_scores(preds, emb), truths=np.asarray([e.class_id for e in entries]))


# === Score files ===


def write_score_file(scores: ScoreMatrix, path: PathLike) -> Path:
    """CSV: header truth,<id>:seen|unseen...; one row per sample with its cosines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["truth"] + [
            f"{cid}:{'seen' if s else 'unseen'}" for cid, s in zip(scores.emb.ids, scores.emb.seen)
        ])
        for truth, row in zip(scores.truths, scores.cosines):
            writer.writerow([int(truth)] + [repr(float(v)) for v in row])
    return path


def read_score_file(path: PathLike) -> ScoreMatrix:
    """Inverse of write_score_file. Embedding rows are unit placeholders; only ids and flags matter."""
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
    except OSError as e:
        raise ProtocolError(f"Cannot read score file {path}: {e}")
    if not rows or not rows[0] or rows[0][0] != "truth":
        raise ProtocolError(f"Score file {path} lacks a 'truth,<id>:seen|unseen,...' header")
    ids, seen = [], []
    for column in rows[0][1:]:
        cid, _, flag = column.partition(":")
        if flag not in ("seen", "unseen"):
            raise ProtocolError(f"Score file {path}: bad column {column!r}")
        try:
            ids.append(int(cid))
        except ValueError:
            raise ProtocolError(f"Score file {path}: bad class id in column {column!r}")
        seen.append(flag == "seen")
    order = np.argsort(ids, kind="stable")
    truths, cosines = [], []
    for line, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(ids) + 1:
            raise ProtocolError(f"Score file {path}, line {line}: expected {len(ids) + 1} fields")
        try:
            truths.append(int(row[0]))
            cosines.append([float(v) for v in row[1:]])
        except ValueError:
            raise ProtocolError(f"Score file {path}, line {line}: non-numeric field")
    emb = ClassEmbeddings(
        ids=tuple(ids[i] for i in order),
        matrix=np.eye(len(ids), max(len(ids), 1)),
        seen=tuple(seen[i] for i in order),
    )
    matrix = np.asarray(cosines, dtype=np.float64).reshape(len(truths), len(ids))[:, order]
    return ScoreMatrix(emb=emb, cosines=matrix, truths=np.asarray(truths, dtype=np.int64))
