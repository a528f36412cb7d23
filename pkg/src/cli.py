"""vit-zsl - Vision Transformer attribute regression for zero-shot learning.

One executable for the whole pipeline: generate a synthetic bundle, train
the encoder and attribute head, evaluate with calibrated stacking, predict
a single image and export attention heatmaps.

Basic Workflow:
    1. vit-zsl synth spec.json data/           # dataset bundle
    2. vit-zsl train run.json --seed 0          # checkpoint + loss.csv
    3. vit-zsl eval --checkpoint out/final.ckpt --dataset data/ --sweep
    4. vit-zsl attend --checkpoint out/final.ckpt --image img.ppm --out-dir maps/

Commands:
    synth    Render a synthetic bundle from a JSON spec
    train    Fit on the seen-class train split (config file + flags)
    eval     S / U / H on the test split, fixed γ or γ swept on validation;
             also accepts a precomputed score file instead of a model
    predict  Attribute vector and calibrated label for one image
    attend   Rollout (or last-layer) heatmap PGM and overlay PPM

Exit codes: 0 success, 2 invalid input or configuration, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence

from .core import (
    ConfigurationError,
    ModelConfig,
    TrainConfig,
    VitWeights,
    default_dtype,
    encode,
)
from .tools._errors import wrap_command_errors
from .tools.attention import attention_rollout, export_heatmap, overlay
from .tools.checkpoint import Checkpoint, load_checkpoint
from .tools.dataset import Normalization, load_dataset, load_image, read_image
from .tools.evaluation import (
    ClassEmbeddings,
    ScoreMatrix,
    classify,
    collect_scores,
    read_score_file,
    write_score_file,
    zsl_top1,
)
from .tools.synthetic import SyntheticSpec, synth_generate
from .tools.training import fit, predict_attributes

logger = logging.getLogger(__name__)

RUN_CONFIG_SCHEMA_VERSION = 1
RUN_CONFIG_FILE = "run_config.json"

MODEL_PRESETS: Dict[str, Callable[[], ModelConfig]] = {
    "vit_large": ModelConfig.vit_large,
    "tiny": ModelConfig.tiny,
    "synthetic": ModelConfig.synthetic,
}


# === Run configuration ===


@dataclass(frozen=True)
class RunConfig:
    """Parsed train config file: model, optimizer settings and paths."""

    model: ModelConfig
    train: TrainConfig
    dataset: Optional[Path] = None
    output_dir: Path = Path("runs/latest")

    _KEYS = ("schema_version", "model", "train", "dataset", "output_dir")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("Run config must be a JSON object", field="config")
        unknown = sorted(set(data) - set(cls._KEYS))
        if unknown:
            raise ConfigurationError(f"Unknown run config keys: {unknown}", field=unknown[0], value=data[unknown[0]])
        version = data.get("schema_version")
        if version != RUN_CONFIG_SCHEMA_VERSION:
            raise ConfigurationError(
                f"Unsupported run config schema_version {version!r} (expected {RUN_CONFIG_SCHEMA_VERSION})",
                field="schema_version",
                value=version,
            )

        model = data.get("model", "synthetic")
        if isinstance(model, str):
            if model not in MODEL_PRESETS:
                raise ConfigurationError(
                    f"Unknown model preset {model!r}; expected one of {sorted(MODEL_PRESETS)}",
                    field="model",
                    value=model,
                )
            model_config = MODEL_PRESETS[model]()
        else:
            model_config = ModelConfig.from_dict(model)

        dataset = data.get("dataset")
        return cls(
            model=model_config,
            train=TrainConfig.from_dict(data.get("train", {})),
            dataset=Path(dataset) if dataset is not None else None,
            output_dir=Path(data.get("output_dir", "runs/latest")),
        )

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read run config {path}: {e}", field="config")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "schema_version": RUN_CONFIG_SCHEMA_VERSION,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset": str(self.dataset) if self.dataset is not None else None,
            "output_dir": str(self.output_dir),
        }

    def with_flags(self, args: argparse.Namespace) -> "RunConfig":
        """Command-line flags override file values."""
        overrides = {
            "seed": args.seed,
            "epochs": args.epochs,
            "learning_rate": args.lr,
            "batch_size": args.batch_size,
            "max_steps": args.max_steps,
            "precision": args.precision,
            "checkpoint_interval": args.checkpoint_interval,
        }
        train = replace(self.train, **{k: v for k, v in overrides.items() if v is not None})
        return replace(
            self,
            train=train,
            dataset=Path(args.dataset) if args.dataset else self.dataset,
            output_dir=Path(args.output_dir) if args.output_dir else self.output_dir,
        )


# === Helpers ===


def _weights_from(checkpoint: Checkpoint) -> VitWeights:
    return VitWeights.from_state(checkpoint.model_config, checkpoint.weights)


def _parse_grid(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"Invalid γ grid {text!r}; expected comma-separated numbers", field="grid", value=text)


# === Commands ===


@wrap_command_errors(logger, "Synthetic generation failed")
def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec.from_file(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    bundle = synth_generate(spec, args.out)
    print(
        f"{bundle.root}: {len(bundle.seen_ids)} seen + {len(bundle.unseen_ids)} unseen classes, "
        f"train {len(bundle.train)} / val {len(bundle.val)} / test {len(bundle.test)}"
    )
    return 0


@wrap_command_errors(logger, "Training failed")
def cmd_train(args: argparse.Namespace) -> int:
    config = RunConfig.from_file(args.config).with_flags(args)
    if config.dataset is None:
        raise ConfigurationError("No dataset root: set 'dataset' in the config or pass --dataset", field="dataset")
    bundle = load_dataset(config.dataset)
    resume = load_checkpoint(args.resume) if args.resume else None

    config.output_dir.mkdir(parents=True, exist_ok=True)
    (config.output_dir / RUN_CONFIG_FILE).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
    result = fit(bundle, config.model, config.train, config.output_dir, resume_from=resume)
    first = result.losses[0].loss if result.losses else float("nan")
    print(f"final loss {result.final_loss:.6f} (first {first:.6f}) after {result.checkpoint.step} steps")
    return 0


def _model_scores(args: argparse.Namespace) -> tuple:
    if not (args.checkpoint and args.dataset):
        raise ConfigurationError("eval needs --checkpoint and --dataset, or --scores", field="checkpoint")
    checkpoint = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.dataset)
    with default_dtype(checkpoint.train_config.precision):
        weights = _weights_from(checkpoint)
        test = collect_scores(weights, bundle, bundle.test, args.batch_size, args.workers)
        val = collect_scores(weights, bundle, bundle.val, args.batch_size, args.workers) if args.sweep else None
    if args.dump_scores:
        write_score_file(test, args.dump_scores)
    return test, val


@wrap_command_errors(logger, "Evaluation failed")
def cmd_eval(args: argparse.Namespace) -> int:
    if args.scores:
        test: ScoreMatrix = read_score_file(args.scores)
        val = read_score_file(args.val_scores) if args.val_scores else None
    else:
        test, val = _model_scores(args)

    gamma = args.gamma
    if args.sweep:
        if val is None:
            raise ConfigurationError("--sweep in score-file mode needs --val-scores", field="val_scores")
        sweep = val.sweep(_parse_grid(args.grid) if args.grid else None)
        gamma = sweep.best_gamma
        if args.curve:
            sweep.write_csv(args.curve)

    report = test.report(gamma)
    if args.report:
        report.write_json(args.report)
        logger.info(f"Report written: {args.report}")
    print(report.summary())
    if test.emb.unseen_ids:
        print(f"ZSL top-1 (unseen only) {zsl_top1(test.cosines, test.truths, test.emb):.2f}")
    return 0


@wrap_command_errors(logger, "Prediction failed")
def cmd_predict(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    bundle = load_dataset(args.dataset, check_images=False)
    with default_dtype(checkpoint.train_config.precision):
        weights = _weights_from(checkpoint)
        image = load_image(args.image, bundle.normalization, checkpoint.model_config.image_shape)
        pred = predict_attributes(image, weights).data.astype(float)
    emb = ClassEmbeddings.from_bundle(bundle)
    label = classify(pred, emb, args.gamma)
    info = bundle.class_info(label)
    print(json.dumps({
        "image": str(args.image),
        "attributes": [round(float(v), 6) for v in pred],
        "class_id": label,
        "class_name": info.name,
        "seen": info.seen,
        "gamma": args.gamma,
    }))
    return 0


@wrap_command_errors(logger, "Attention export failed")
def cmd_attend(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    cfg = checkpoint.model_config
    if args.dataset:
        normalization = load_dataset(args.dataset, check_images=False).normalization
    else:
        normalization = Normalization.default(cfg.channels)
    pixels = read_image(args.image, cfg.image_shape)
    with default_dtype(checkpoint.train_config.precision):
        weights = _weights_from(checkpoint)
        _, trace = encode(normalization.normalize(pixels / 255.0), weights)

    stem = Path(args.image).stem
    heatmap = attention_rollout(trace, image_id=stem, method="last" if args.last_layer else "rollout")
    out_dir = Path(args.out_dir)
    heatmap_path = export_heatmap(heatmap, out_dir / f"{stem}_attention.pgm", pixels.shape[:2])
    overlay_path = overlay(heatmap, pixels, out_dir / f"{stem}_overlay.ppm")
    print(f"{heatmap_path}\n{overlay_path}")
    return 0


_COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "attend": cmd_attend,
}


# === Argument parsing ===


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vit-zsl", description="ViT attribute regression for zero-shot learning")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic dataset bundle")
    synth.add_argument("spec", help="synthetic spec JSON")
    synth.add_argument("out", help="output bundle directory")
    synth.add_argument("--seed", type=int, help="override the spec seed")

    train = sub.add_parser("train", help="train on the seen-class train split")
    train.add_argument("config", help="run config JSON")
    train.add_argument("--seed", type=int, required=True)
    train.add_argument("--dataset", help="dataset bundle root (overrides config)")
    train.add_argument("--output-dir", help="run directory (overrides config)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--max-steps", type=int)
    train.add_argument("--precision", choices=("float32", "float64"))
    train.add_argument("--checkpoint-interval", type=int)
    train.add_argument("--resume", help="checkpoint to resume from")

    evaluate = sub.add_parser("eval", help="GZSL evaluation (S, U, H)")
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--dataset")
    evaluate.add_argument("--scores", help="score CSV to evaluate instead of a model")
    evaluate.add_argument("--val-scores", help="validation score CSV for --sweep in score-file mode")
    calibration = evaluate.add_mutually_exclusive_group()
    calibration.add_argument("--gamma", type=float, default=0.0, help="fixed calibration factor")
    calibration.add_argument("--sweep", action="store_true", help="choose γ on the validation split")
    evaluate.add_argument("--grid", help="comma-separated γ values for --sweep (default 101 in [0, 1])")
    evaluate.add_argument("--report", help="write the EvalReport JSON here")
    evaluate.add_argument("--curve", help="write the sweep curve CSV here")
    evaluate.add_argument("--dump-scores", help="write test cosine scores as CSV")
    evaluate.add_argument("--batch-size", type=int, default=32)
    evaluate.add_argument("--workers", type=int, default=1)

    predict = sub.add_parser("predict", help="predict attributes and class for one image")
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--dataset", required=True, help="bundle providing classes and normalization")
    predict.add_argument("--image", required=True)
    predict.add_argument("--gamma", type=float, default=0.0)

    attend = sub.add_parser("attend", help="export an attention heatmap and overlay")
    attend.add_argument("--checkpoint", required=True)
    attend.add_argument("--image", required=True)
    attend.add_argument("--out-dir", required=True)
    attend.add_argument("--dataset", help="bundle providing normalization (default mean/std 0.5)")
    attend.add_argument("--last-layer", action="store_true", help="raw last-layer attention instead of rollout")
    return parser


# === Entry Point ===


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    return _COMMANDS[args.command](args)


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
