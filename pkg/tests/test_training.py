"""Tests for the attribute head, MSE objective, Adam and the training loop."""
import csv
import dataclasses

import numpy as np
import pytest

from src.core.config import ModelConfig, TrainConfig, get_benchmark_preset
from src.core.exceptions import DatasetError, DimensionError, InductiveViolationError
from src.core.tensor import Tensor, default_dtype, grad_check
from src.core.vit import init_weights
from src.tools.checkpoint import load_checkpoint
from src.tools.dataset import DatasetBundle, ManifestEntry
from src.tools.training import (
    FINAL_CHECKPOINT,
    LOSS_CSV,
    AdamMoments,
    AdamOptimizer,
    Trainer,
    adam_step,
    fit,
    loss_and_gradients,
    mse_loss,
    predict_attributes,
    predict_attributes_batch,
)


def _fit_config(**overrides) -> TrainConfig:
    base = dict(learning_rate=1e-3, batch_size=4, epochs=3, seed=7, precision="float32")
    base.update(overrides)
    return TrainConfig(**base)


# === Head Tests ===


class TestPredictAttributes:
    """Tests for the linear attribute head."""

    def test_zero_head_gives_zero_vector(self, tiny_config):
        w = init_weights(tiny_config, seed=0)
        w.head_weight.data[:] = 0.0
        image = np.random.default_rng(0).normal(size=tiny_config.image_shape)
        pred = predict_attributes(Tensor(image), w)
        np.testing.assert_array_equal(pred.data, np.zeros(tiny_config.num_attributes))

    def test_awa2_has_85_attributes(self):
        assert get_benchmark_preset("AWA2").model_config().num_attributes == 85

    def test_benchmark_attribute_counts(self):
        assert get_benchmark_preset("cub").num_attributes == 312
        assert get_benchmark_preset("SUN").num_attributes == 102
        assert get_benchmark_preset("SUN").num_classes == 717

    def test_linear_in_head_weights(self, tiny_config):
        """Doubling W_head (zero bias) doubles the prediction."""
        w = init_weights(tiny_config, seed=1)
        image = Tensor(np.random.default_rng(1).normal(size=tiny_config.image_shape))
        base = predict_attributes(image, w).data
        w.head_weight.data *= 2.0
        np.testing.assert_allclose(predict_attributes(image, w).data, 2.0 * base, rtol=1e-12)

    def test_batch_shape(self, tiny_config):
        w = init_weights(tiny_config)
        images = Tensor(np.zeros((3,) + tiny_config.image_shape))
        assert predict_attributes_batch(images, w).shape == (3, tiny_config.num_attributes)


# === mse_loss Tests ===


class TestMseLoss:
    """Tests for the squared-error objective."""

    def test_equal_inputs(self):
        assert mse_loss(Tensor([0.3, -2.0]), Tensor([0.3, -2.0])).item() == 0.0

    def test_unit_error(self):
        assert mse_loss(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(1.0)

    def test_hand_sum(self):
        """(1 + 4 + 9) / 3."""
        assert mse_loss(Tensor([1.0, 2.0, 3.0]), Tensor([0.0, 0.0, 0.0])).item() == pytest.approx(14 / 3)

    def test_batch_is_mean_of_sample_losses(self):
        pred = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]])
        target = np.zeros((2, 3))
        assert mse_loss(Tensor(pred), Tensor(target)).item() == pytest.approx((14 / 3 + 0.0) / 2)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            mse_loss(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert mse_loss(Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))).item() > 0


# === Adam Tests ===


class TestAdamStep:
    """Tests for the bias-corrected Adam update."""

    def test_zero_gradient_leaves_params(self):
        cfg = TrainConfig()
        params = {"w": np.array([1.0, -2.0])}
        moments = AdamMoments.zeros_like(params)
        adam_step(params, {"w": np.zeros(2)}, moments, 1, cfg)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        """Bias correction makes the first step with g=1 exactly lr in size."""
        cfg = TrainConfig(learning_rate=1e-4)
        params = {"w": np.zeros(3)}
        moments = AdamMoments.zeros_like(params)
        adam_step(params, {"w": np.ones(3)}, moments, 1, cfg)
        np.testing.assert_allclose(params["w"], -1e-4, atol=1e-6 * 1e-4)
        np.testing.assert_allclose(moments.first["w"], 0.1)
        np.testing.assert_allclose(moments.second["w"], 0.001)

    def test_step_counter_starts_at_one(self):
        params = {"w": np.zeros(1)}
        with pytest.raises(ValueError):
            adam_step(params, {"w": np.ones(1)}, AdamMoments.zeros_like(params), 0, TrainConfig())

    def test_ten_steps_are_deterministic(self):
        def run():
            rng = np.random.default_rng(3)
            params = {"a": rng.normal(size=(3, 3)), "b": rng.normal(size=3)}
            moments = AdamMoments.zeros_like(params)
            for t in range(1, 11):
                grads = {k: np.sin(v * t) for k, v in params.items()}
                adam_step(params, grads, moments, t, TrainConfig(learning_rate=1e-2))
            return params

        a, b = run(), run()
        assert all(np.array_equal(a[k], b[k]) for k in a)


# === Gradient Tests ===


class TestLossGradients:
    """Tests for the full encoder plus head gradients."""

    def test_full_model_matches_finite_differences(self, tiny_config):
        """Every parameter block of the tiny model, 64-bit."""
        w = init_weights(tiny_config, seed=2)
        rng = np.random.default_rng(2)
        images = Tensor(rng.normal(size=(2,) + tiny_config.image_shape))
        targets = Tensor(rng.uniform(size=(2, tiny_config.num_attributes)))
        report = grad_check(
            lambda: mse_loss(predict_attributes_batch(images, w), targets),
            w.named_parameters(),
            step=1e-5,
            tol=1e-5,
        )
        assert report.passed, report.to_dict()
        assert len(report.errors) == len(w.named_parameters())

    def test_full_model_matches_finite_differences_float32(self, tiny_config):
        """Every parameter block of the tiny model, 32-bit, tol 1e-3."""
        with default_dtype("float32"):
            w = init_weights(tiny_config, seed=2)
            rng = np.random.default_rng(2)
            images = Tensor(rng.normal(size=(2,) + tiny_config.image_shape))
            targets = Tensor(rng.uniform(size=(2, tiny_config.num_attributes)))
            report = grad_check(
                lambda: mse_loss(predict_attributes_batch(images, w), targets),
                w.named_parameters(),
                step=1e-3,
                tol=1e-3,
            )
            assert w.head_weight.dtype == np.float32
        assert report.passed, report.to_dict()

    def test_identical_batch_equals_single_sample(self, tiny_config):
        """Mean reduction: a batch of copies has the single-sample gradient."""
        w = init_weights(tiny_config, seed=3)
        rng = np.random.default_rng(3)
        image = rng.normal(size=tiny_config.image_shape)
        target = rng.uniform(size=tiny_config.num_attributes)
        loss_one, grads_one = loss_and_gradients(w, image[None], target[None])
        grads_one = {k: v.copy() for k, v in grads_one.items()}
        loss_many, grads_many = loss_and_gradients(w, np.stack([image] * 4), np.stack([target] * 4))
        assert loss_many == pytest.approx(loss_one, rel=1e-12)
        for name, grad in grads_one.items():
            np.testing.assert_allclose(grads_many[name], grad, rtol=1e-6, atol=1e-12)

    def test_overfits_one_sample(self, tiny_config):
        """200 Adam steps on one sample drive the loss below 1% of its start."""
        w = init_weights(tiny_config, seed=4)
        rng = np.random.default_rng(4)
        image = rng.normal(size=(1,) + tiny_config.image_shape)
        target = rng.uniform(0.2, 1.0, size=(1, tiny_config.num_attributes))
        optimizer = AdamOptimizer(w, TrainConfig(learning_rate=1e-2))
        losses = []
        for _ in range(200):
            loss, _ = loss_and_gradients(w, image, target)
            optimizer.step()
            losses.append(loss)
        assert all(np.isfinite(losses))
        assert losses[-1] < 0.01 * losses[0]


# === fit Tests ===


class TestFit:
    """Tests for the seeded training loop."""

    def test_losses_finite_and_files_written(self, tiny_bundle, tiny_config, tmp_path):
        result = fit(tiny_bundle, tiny_config, _fit_config(), tmp_path / "run")
        assert len(result.losses) == 3 * 2  # 6 samples, batch 4
        assert all(np.isfinite(r.loss) for r in result.losses)
        assert (tmp_path / "run" / FINAL_CHECKPOINT).is_file()
        with open(tmp_path / "run" / LOSS_CSV, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["step", "epoch", "loss"]
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
        assert [int(r[1]) for r in rows[1:]] == [0, 0, 1, 1, 2, 2]

    def test_seeded_runs_are_bit_identical(self, tiny_bundle, tiny_config):
        a = fit(tiny_bundle, tiny_config, _fit_config()).checkpoint
        b = fit(tiny_bundle, tiny_config, _fit_config()).checkpoint
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)

    def test_precision_follows_config(self, tiny_bundle, tiny_config):
        ckpt = fit(tiny_bundle, tiny_config, _fit_config(precision="float64", epochs=1)).checkpoint
        assert ckpt.weights["head.weight"].dtype == np.float64
        ckpt = fit(tiny_bundle, tiny_config, _fit_config(epochs=1)).checkpoint
        assert ckpt.weights["head.weight"].dtype == np.float32

    def test_max_steps_caps_training(self, tiny_bundle, tiny_config):
        result = fit(tiny_bundle, tiny_config, _fit_config(max_steps=2))
        assert result.checkpoint.step == 2
        assert len(result.losses) == 2

    def test_never_loads_unseen_samples(self, tiny_bundle, tiny_config, monkeypatch):
        """A counting loader sees only seen-class images during training."""
        loaded = []
        original = DatasetBundle.load_sample

        def counting_load(self, entry):
            loaded.append(entry.class_id)
            return original(self, entry)

        monkeypatch.setattr(DatasetBundle, "load_sample", counting_load)
        fit(tiny_bundle, tiny_config, _fit_config(epochs=1))
        assert loaded
        assert set(loaded) <= set(tiny_bundle.seen_ids)

    def test_unseen_class_in_train_is_rejected(self, tiny_bundle, tiny_config):
        unseen = tiny_bundle.unseen_ids[0]
        tiny_bundle.manifests["train"].append(ManifestEntry(tiny_bundle.test[-1].path, unseen))
        with pytest.raises(InductiveViolationError) as exc_info:
            fit(tiny_bundle, tiny_config, _fit_config())
        assert exc_info.value.class_id == unseen

    def test_empty_train_split(self, tiny_bundle, tiny_config):
        tiny_bundle.manifests["train"] = []
        with pytest.raises(DatasetError):
            fit(tiny_bundle, tiny_config, _fit_config())

    def test_attribute_count_must_match(self, tiny_bundle):
        with pytest.raises(DimensionError):
            fit(tiny_bundle, ModelConfig.tiny().with_attributes(5), _fit_config())

    @pytest.mark.parametrize("resume_step", [3, 4])
    def test_resume_matches_uninterrupted_run(self, tiny_bundle, tiny_config, tmp_path, resume_step):
        """Resuming mid-epoch or at an epoch boundary reproduces the same weights."""
        cfg = _fit_config(checkpoint_interval=1)
        full = fit(tiny_bundle, tiny_config, cfg, tmp_path / "full").checkpoint

        saved = load_checkpoint(tmp_path / "full" / "checkpoints" / f"step_{resume_step:06d}.ckpt")
        assert saved.step == resume_step
        resumed = fit(tiny_bundle, tiny_config, cfg, tmp_path / "resumed", resume_from=saved)
        assert resumed.checkpoint.step == full.step
        assert [r.step for r in resumed.losses] == list(range(resume_step + 1, full.step + 1))
        for name, array in full.weights.items():
            assert np.array_equal(resumed.checkpoint.weights[name], array), name
        for name, array in full.adam_second.items():
            assert np.array_equal(resumed.checkpoint.adam_second[name], array), name

    def test_resume_requires_same_model(self, tiny_bundle, tiny_config):
        ckpt = fit(tiny_bundle, tiny_config, _fit_config(epochs=1)).checkpoint
        other = dataclasses.replace(tiny_config, mlp_width=16)
        with pytest.raises(DimensionError):
            fit(tiny_bundle, other, _fit_config(), resume_from=ckpt)

    def test_trainer_restores_step(self, tiny_bundle, tiny_config):
        ckpt = fit(tiny_bundle, tiny_config, _fit_config(max_steps=3)).checkpoint
        trainer = Trainer.from_checkpoint(ckpt)
        assert trainer.step == 3
        assert trainer.optimizer.t == 3
        assert trainer.weights["head.weight"].dtype == np.float32
