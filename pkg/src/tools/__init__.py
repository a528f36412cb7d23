"""Pipeline stages built on the core encoder.

This package contains the dataset bundle format, the synthetic generator,
training, checkpoints, evaluation and attention heatmaps.
"""
from .dataset import (
    ClassInfo,
    DatasetBundle,
    ManifestEntry,
    Normalization,
    load_dataset,
    load_image,
    read_image,
    write_dataset,
    write_image,
)
from .synthetic import SyntheticSpec, synth_generate
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .training import (
    AdamMoments,
    AdamOptimizer,
    FitResult,
    LossRecord,
    Trainer,
    adam_step,
    fit,
    mse_loss,
    predict_attributes,
    predict_attributes_batch,
)
from .evaluation import (
    CalibrationSweep,
    ClassEmbeddings,
    EvalReport,
    ScoreMatrix,
    calibration_sweep,
    classify,
    collect_scores,
    cosine_similarity,
    gzsl_report,
    harmonic_mean,
    per_class_top1,
    read_score_file,
    score_classes,
    write_score_file,
    zsl_top1,
)
from .attention import Heatmap, attention_rollout, export_heatmap, overlay

__all__ = [
    # Dataset
    "ClassInfo",
    "DatasetBundle",
    "ManifestEntry",
    "Normalization",
    "load_dataset",
    "load_image",
    "read_image",
    "write_dataset",
    "write_image",
    # Synthetic
    "SyntheticSpec",
    "synth_generate",
    # Checkpoints
    "Checkpoint",
    "load_checkpoint",
    "save_checkpoint",
    # Training
    "AdamMoments",
    "AdamOptimizer",
    "FitResult",
    "LossRecord",
    "Trainer",
    "adam_step",
    "fit",
    "mse_loss",
    "predict_attributes",
    "predict_attributes_batch",
    # Evaluation
    "CalibrationSweep",
    "ClassEmbeddings",
    "EvalReport",
    "ScoreMatrix",
    "calibration_sweep",
    "classify",
    "collect_scores",
    "cosine_similarity",
    "gzsl_report",
    "harmonic_mean",
    "per_class_top1",
    "read_score_file",
    "score_classes",
    "write_score_file",
    "zsl_top1",
    # Attention
    "Heatmap",
    "attention_rollout",
    "export_heatmap",
    "overlay",
]
