"""Attribute regression training: head, MSE objective, Adam and the fit loop.

Only seen-class samples are ever loaded: the train manifest is re-checked
here before any image is read.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from ..core import (
    ComputationTape,
    DatasetError,
    DimensionError,
    InductiveViolationError,
    ModelConfig,
    Tensor,
    TrainConfig,
    VitWeights,
    backward,
    default_dtype,
    encode,
    encode_batch,
    init_weights,
)
from ..core.tensor import add, as_tensor, matmul, mean, reshape, square, sub
from .checkpoint import Checkpoint, save_checkpoint
from .dataset import DatasetBundle

logger = logging.getLogger(__name__)

LOSS_CSV = "loss.csv"
FINAL_CHECKPOINT = "final.ckpt"


# === Head and objective ===


def _apply_head(representation: Tensor, w: VitWeights) -> Tensor:
    return add(matmul(representation, w.head_weight), w.head_bias)


def predict_attributes(image, w: VitWeights) -> Tensor:
    """Raw attribute scores W_headᵀ·repr + b for one image (no squashing)."""
    representation, _ = encode(image, w)
    return _apply_head(reshape(representation, (1,) + representation.shape), w)[0]


def predict_attributes_batch(images, w: VitWeights) -> Tensor:
    """B×H×W×C -> B×M attribute scores."""
    representation, _ = encode_batch(images, w)
    return _apply_head(representation, w)


def mse_loss(pred, target) -> Tensor:
    """(1/M)·Σ(y − ŷ)²; for B×M inputs, the mean of the per-sample losses."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError("mse_loss", pred.shape, target.shape)
    return mean(square(sub(pred, target)))


def loss_and_gradients(
    w: VitWeights, images: np.ndarray, targets: np.ndarray
) -> Tuple[float, Dict[str, np.ndarray]]:
    """One taped forward/backward over a mini-batch."""
    for param in w.parameters():
        param.zero_grad()
    with ComputationTape() as tape:
        loss = mse_loss(predict_attributes_batch(Tensor(images), w), Tensor(targets))
    backward(loss, tape, params=w.parameters())
    tape.clear()
    return loss.item(), {name: p.grad for name, p in w.named_parameters()}


# === Adam ===


@dataclass
class AdamMoments:
    """First and second moment buffers, keyed by parameter name."""

    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamMoments":
        return cls(
            first={name: np.zeros_like(p) for name, p in params.items()},
            second={name: np.zeros_like(p) for name, p in params.items()},
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    moments: AdamMoments,
    t: int,
    cfg: TrainConfig,
) -> Tuple[Mapping[str, np.ndarray], AdamMoments]:
    """One bias-corrected Adam update, in place on params and moments.

    m <- β1·m + (1−β1)·g;  v <- β2·v + (1−β2)·g²;  θ <- θ − lr·m̂ / (√v̂ + eps)
    """
    if t < 1:
        raise ValueError(f"Adam step counter starts at 1, got {t}")
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t
    for name, param in params.items():
        grad = grads[name]
        first = moments.first.setdefault(name, np.zeros_like(param))
        second = moments.second.setdefault(name, np.zeros_like(param))
        first *= cfg.beta1
        first += (1.0 - cfg.beta1) * grad
        second *= cfg.beta2
        second += (1.0 - cfg.beta2) * (grad * grad)
        m_hat = first / correction1
        v_hat = second / correction2
        param -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return params, moments


class AdamOptimizer:
    """Adam over a VitWeights' parameters; reads each parameter's .grad."""

    def __init__(self, weights: VitWeights, cfg: TrainConfig, moments: Optional[AdamMoments] = None, step: int = 0):
        self.weights = weights
        self.cfg = cfg
        arrays = {name: p.data for name, p in weights.named_parameters()}
        self.moments = moments or AdamMoments.zeros_like(arrays)
        self.t = step

    def zero_grad(self) -> None:
        for param in self.weights.parameters():
            param.zero_grad()

    def step(self) -> None:
        self.t += 1
        params = {name: p.data for name, p in self.weights.named_parameters()}
        grads = {
            name: p.grad if p.grad is not None else np.zeros_like(p.data)
            for name, p in self.weights.named_parameters()
        }
        adam_step(params, grads, self.moments, self.t, self.cfg)


# === Training loop ===


@dataclass
class LossRecord:
    step: int
    epoch: int
    loss: float


@dataclass
class FitResult:
    checkpoint: Checkpoint
    losses: List[LossRecord]

    @property
    def final_loss(self) -> float:
        return self.losses[-1].loss if self.losses else float("nan")


def write_loss_csv(records: List[LossRecord], path: Union[str, Path], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_header = not (append and path.exists())
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        if write_header:
            writer.writerow(["step", "epoch", "loss"])
        for record in records:
            writer.writerow([record.step, record.epoch, repr(record.loss)])
    return path


def _check_inductive(dataset: DatasetBundle) -> None:
    if not dataset.train:
        raise DatasetError("Train manifest is empty")
    seen = set(dataset.seen_ids)
    for row, entry in enumerate(dataset.train, start=1):
        if entry.class_id not in seen:
            raise InductiveViolationError(entry.class_id, path="train manifest", row=row)


class Trainer:
    """Seeded mini-batch training with resumable state.

    The shuffle generator is separate from the initialization stream; its
    state at the start of the current epoch is what a checkpoint stores, so
    a resumed run redraws the same permutation and skips finished batches.
    """

    def __init__(
        self,
        model_config: ModelConfig,
        train_config: TrainConfig,
        weights: Optional[VitWeights] = None,
        moments: Optional[AdamMoments] = None,
        step: int = 0,
        rng_state: Optional[dict] = None,
    ):
        self.model_config = model_config
        self.train_config = train_config
        self.dtype = np.dtype(train_config.precision)
        init_seq, shuffle_seq = np.random.SeedSequence(train_config.seed).spawn(2)
        with default_dtype(self.dtype):
            if weights is None:
                weights = init_weights(model_config, np.random.default_rng(init_seq))
            else:
                weights = VitWeights.from_state(model_config, weights.state_dict())
        self.weights = weights
        self.optimizer = AdamOptimizer(weights, train_config, moments, step)
        self.step = step
        self._rng = np.random.default_rng(shuffle_seq)
        if rng_state is not None:
            self._rng.bit_generator.state = rng_state
        self._epoch_state = copy.deepcopy(self._rng.bit_generator.state)
        self._order: Optional[np.ndarray] = None
        self._steps_per_epoch: Optional[int] = None

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, train_config: Optional[TrainConfig] = None) -> "Trainer":
        cfg = train_config or checkpoint.train_config
        moments = None
        if checkpoint.adam_first:
            moments = AdamMoments(
                first={k: v.copy() for k, v in checkpoint.adam_first.items()},
                second={k: v.copy() for k, v in checkpoint.adam_second.items()},
            )
        weights = VitWeights.from_state(checkpoint.model_config, checkpoint.weights)
        return cls(checkpoint.model_config, cfg, weights, moments, checkpoint.step, checkpoint.rng_state)

    def train_step(self, images: np.ndarray, targets: np.ndarray) -> float:
        with default_dtype(self.dtype):
            loss, _ = loss_and_gradients(
                self.weights, images.astype(self.dtype), targets.astype(self.dtype)
            )
            self.optimizer.step()
        self.step = self.optimizer.t
        return loss

    def _rng_state_for_checkpoint(self) -> dict:
        if self._steps_per_epoch and self.step % self._steps_per_epoch == 0:
            return copy.deepcopy(self._rng.bit_generator.state)
        return copy.deepcopy(self._epoch_state)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model_config,
            train_config=self.train_config,
            weights=self.weights.state_dict(),
            adam_first={k: v.copy() for k, v in self.optimizer.moments.first.items()},
            adam_second={k: v.copy() for k, v in self.optimizer.moments.second.items()},
            step=self.step,
            rng_state=self._rng_state_for_checkpoint(),
        )

    def _next_batch(self, num_samples: int) -> Tuple[int, np.ndarray]:
        batch_size = self.train_config.batch_size
        epoch, offset = divmod(self.step, self._steps_per_epoch)
        # A run resumed mid-epoch has no order yet; its restored state precedes this epoch's draw.
        if offset == 0 or self._order is None:
            self._epoch_state = copy.deepcopy(self._rng.bit_generator.state)
            self._order = self._rng.permutation(num_samples)
        return epoch, self._order[offset * batch_size:(offset + 1) * batch_size]

    def fit(self, dataset: DatasetBundle, output_dir: Optional[Union[str, Path]] = None) -> FitResult:
        _check_inductive(dataset)
        if dataset.num_attributes != self.model_config.num_attributes:
            raise DimensionError(
                "fit", (dataset.num_attributes,), (self.model_config.num_attributes,),
                reason="dataset M differs from model M",
            )
        cfg = self.train_config
        entries = dataset.train
        images = dataset.load_samples(entries)
        targets = dataset.targets(entries)

        self._steps_per_epoch = math.ceil(len(entries) / cfg.batch_size)
        total_steps = cfg.epochs * self._steps_per_epoch
        if cfg.max_steps is not None:
            total_steps = min(total_steps, cfg.max_steps)
        output_dir = Path(output_dir) if output_dir is not None else None
        resumed = self.step > 0
        logger.info(
            f"Training on {len(entries)} seen-class samples: {total_steps} steps "
            f"({self._steps_per_epoch}/epoch), lr={cfg.learning_rate}, batch={cfg.batch_size}, "
            f"precision={cfg.precision}" + (f", resuming at step {self.step}" if resumed else "")
        )

        records: List[LossRecord] = []
        epoch_losses: List[float] = []
        while self.step < total_steps:
            epoch, indices = self._next_batch(len(entries))
            loss = self.train_step(images[indices], targets[indices])
            records.append(LossRecord(self.step, epoch, loss))
            epoch_losses.append(loss)
            logger.debug(f"step {self.step} epoch {epoch} loss {loss:.6f}")

            if self.step % self._steps_per_epoch == 0 or self.step == total_steps:
                logger.info(f"Epoch {epoch} done: mean loss {np.mean(epoch_losses):.6f}")
                epoch_losses = []
            if output_dir is not None and cfg.checkpoint_interval and self.step % cfg.checkpoint_interval == 0:
                save_checkpoint(self.checkpoint(), output_dir / "checkpoints" / f"step_{self.step:06d}.ckpt")

        checkpoint = self.checkpoint()
        if output_dir is not None:
            save_checkpoint(checkpoint, output_dir / FINAL_CHECKPOINT)
            write_loss_csv(records, output_dir / LOSS_CSV, append=resumed)
        return FitResult(checkpoint=checkpoint, losses=records)


def fit(
    dataset: DatasetBundle,
    model_config: ModelConfig,
    train_config: TrainConfig,
    output_dir: Optional[Union[str, Path]] = None,
    resume_from: Optional[Checkpoint] = None,
) -> FitResult:
    """Train the encoder and head on the seen-class train split.

    Raises:
        InductiveViolationError: Train manifest references an unseen class
        DatasetError: Train manifest is empty
    """
    if resume_from is not None:
        if resume_from.model_config != model_config:
            raise DimensionError("fit", reason="checkpoint model config differs from requested config")
        trainer = Trainer.from_checkpoint(resume_from, train_config)
    else:
        trainer = Trainer(model_config, train_config)
    return trainer.fit(dataset, output_dir)
