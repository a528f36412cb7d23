"""Tests for cosine scoring, calibrated stacking and the GZSL metrics."""
import json
import math

import numpy as np
import pytest

from src.core.config import ModelConfig
from src.core.exceptions import ContractError, DimensionError, ProtocolError
from src.core.vit import init_weights
from src.tools.evaluation import (
    ClassEmbeddings,
    EvalReport,
    ScoreMatrix,
    calibration_sweep,
    classify,
    collect_scores,
    cosine_scores,
    cosine_similarity,
    default_gamma_grid,
    gzsl_report,
    harmonic_mean,
    per_class_accuracies,
    per_class_top1,
    predict_labels,
    predict_manifest,
    read_score_file,
    score_classes,
    write_score_file,
    zsl_top1,
)


def _emb(matrix, seen, ids=None) -> ClassEmbeddings:
    matrix = np.asarray(matrix, dtype=np.float64)
    ids = ids if ids is not None else tuple(range(len(matrix)))
    return ClassEmbeddings(ids=tuple(ids), matrix=matrix, seen=tuple(seen))


def _two_class_scores():
    """Class 0 seen, class 1 unseen; seen cosines dominate every sample."""
    emb = _emb(np.eye(2), (True, False))
    seen_rows = np.tile([0.9, 0.5], (5, 1))
    unseen_rows = np.tile([0.9, 0.8], (5, 1))
    return emb, np.vstack([seen_rows, unseen_rows]), np.array([0] * 5 + [1] * 5)


# === ClassEmbeddings Tests ===


class TestClassEmbeddings:
    """Tests for class attribute vector validation."""

    def test_zero_norm_row_rejected(self):
        with pytest.raises(ProtocolError, match="Zero-norm"):
            _emb([[1.0, 0.0], [0.0, 0.0]], (True, False))

    def test_ids_must_be_sorted(self):
        with pytest.raises(ProtocolError):
            _emb(np.eye(2), (True, False), ids=(5, 3))

    def test_from_bundle(self, tiny_bundle):
        emb = ClassEmbeddings.from_bundle(tiny_bundle)
        assert emb.ids == (0, 1, 2, 3)
        assert emb.seen_ids == [0, 1, 2]
        assert emb.unseen_ids == [3]
        np.testing.assert_array_equal(emb.matrix[3], tiny_bundle.attributes_for(3))

    def test_require_missing_class(self):
        with pytest.raises(ProtocolError, match="No attribute vector"):
            _emb(np.eye(2), (True, False)).require([0, 7])


# === Cosine Tests ===


class TestCosine:
    """Tests for cosine similarity."""

    def test_self_similarity(self):
        assert cosine_similarity([3.0, -4.0, 1.0], [3.0, -4.0, 1.0]) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_value(self):
        assert cosine_similarity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-4)

    def test_zero_norm(self):
        with pytest.raises(ContractError):
            cosine_similarity([0.0, 0.0], [1.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])

    def test_matrix_matches_pairwise(self):
        rng = np.random.default_rng(0)
        emb = _emb(rng.normal(size=(4, 6)), (True, True, False, False))
        preds = rng.normal(size=(3, 6))
        scores = cosine_scores(preds, emb)
        for i in range(3):
            for c in range(4):
                assert scores[i, c] == pytest.approx(cosine_similarity(preds[i], emb.matrix[c]))


# === Calibrated Stacking Tests ===


class TestScoreAndClassify:
    """Tests for score_classes and classify."""

    def test_seen_score_lowered_by_gamma(self):
        emb = _emb([[1.0, 0.0], [0.0, 1.0]], (True, False))
        scores = score_classes([1.0, 1.0], emb, 0.25)
        np.testing.assert_allclose(scores, [1 / math.sqrt(2) - 0.25, 1 / math.sqrt(2)])

    def test_small_gamma_keeps_seen(self):
        emb, cosines, _ = _two_class_scores()
        assert predict_labels(cosines[5:6], emb, 0.05)[0] == 0

    def test_larger_gamma_flips_to_unseen(self):
        emb, cosines, _ = _two_class_scores()
        assert predict_labels(cosines[5:6], emb, 0.15)[0] == 1

    def test_gamma_two_always_picks_unseen(self):
        rng = np.random.default_rng(1)
        emb = _emb(rng.normal(size=(5, 4)), (True, True, True, False, False))
        for pred in rng.normal(size=(20, 4)):
            assert classify(pred, emb, 2.0) in (3, 4)

    def test_single_class(self):
        assert classify([0.2, -1.0], _emb([[1.0, 1.0]], (False,), ids=(42,))) == 42

    def test_exact_embedding_wins(self):
        emb = _emb(np.eye(3), (True, True, False))
        assert classify([0.0, 2.5, 0.0], emb) == 1

    def test_tie_goes_to_lowest_id(self):
        emb = _emb([[1.0, 1.0], [1.0, 1.0]], (False, False), ids=(3, 5))
        assert classify([2.0, 2.0], emb) == 3

    def test_invariant_to_prediction_scale(self):
        rng = np.random.default_rng(2)
        emb = _emb(rng.normal(size=(6, 5)), (True,) * 4 + (False,) * 2)
        for pred in rng.normal(size=(10, 5)):
            assert classify(pred, emb, 0.1) == classify(7.5 * pred, emb, 0.1)

    def test_invariant_to_class_row_scale(self):
        rng = np.random.default_rng(3)
        matrix = rng.normal(size=(6, 5))
        scaled = matrix.copy()
        scaled[2] *= 40.0
        seen = (True,) * 3 + (False,) * 3
        for pred in rng.normal(size=(10, 5)):
            assert classify(pred, _emb(matrix, seen), 0.2) == classify(pred, _emb(scaled, seen), 0.2)

    def test_prediction_switches_seen_to_unseen_at_most_once(self):
        rng = np.random.default_rng(4)
        emb = _emb(rng.normal(size=(6, 5)), (True,) * 3 + (False,) * 3)
        cosines = cosine_scores(rng.normal(size=(30, 5)), emb)
        unseen = set(emb.unseen_ids)
        was_unseen = np.zeros(30, dtype=bool)
        for gamma in default_gamma_grid():
            now_unseen = np.array([p in unseen for p in predict_labels(cosines, emb, gamma)])
            assert not np.any(was_unseen & ~now_unseen)
            was_unseen = now_unseen


# === Metric Tests ===


class TestMetrics:
    """Tests for per-class accuracy and the harmonic mean."""

    def test_all_correct(self):
        assert per_class_top1([1, 2, 2], [1, 2, 2], [1, 2]) == 100.0

    def test_per_class_not_per_sample(self):
        predictions = [0] * 10 + [0]
        truths = [0] * 10 + [1]
        assert per_class_top1(predictions, truths, [0, 1]) == 50.0

    def test_empty_class_rejected(self):
        with pytest.raises(ProtocolError):
            per_class_accuracies([0, 0], [0, 0], [0, 1])

    def test_random_predictions_near_chance(self):
        rng = np.random.default_rng(5)
        truths = np.repeat(np.arange(4), 2500)
        predictions = rng.integers(0, 4, size=truths.size)
        assert per_class_top1(predictions, truths, range(4)) == pytest.approx(25.0, abs=1.5)

    @pytest.mark.parametrize(
        "seen,unseen,expected",
        [(90.0, 51.9, 65.8), (75.2, 67.3, 71.0), (55.3, 44.5, 49.3)],
    )
    def test_published_rows(self, seen, unseen, expected):
        assert harmonic_mean(seen, unseen) == pytest.approx(expected, abs=0.05)

    def test_symmetric_and_idempotent(self):
        assert harmonic_mean(30.0, 70.0) == harmonic_mean(70.0, 30.0)
        assert harmonic_mean(42.0, 42.0) == pytest.approx(42.0)

    def test_zero_cases(self):
        assert harmonic_mean(0.0, 0.0) == 0.0
        assert harmonic_mean(80.0, 0.0) == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ContractError):
            harmonic_mean(-1.0, 50.0)


# === gzsl_report Tests ===


class TestGzslReport:
    """Tests for the S/U/H report."""

    def test_uncalibrated_report(self):
        emb, cosines, truths = _two_class_scores()
        report = gzsl_report(cosines, truths, emb, 0.0)
        assert (report.S, report.U, report.H) == (100.0, 0.0, 0.0)
        assert report.per_class == {0: 100.0, 1: 0.0}

    def test_h_matches_own_s_and_u(self):
        rng = np.random.default_rng(6)
        emb = _emb(rng.normal(size=(6, 5)), (True,) * 4 + (False,) * 2)
        cosines = cosine_scores(rng.normal(size=(60, 5)), emb)
        truths = np.repeat(np.arange(6), 10)
        report = gzsl_report(cosines, truths, emb, 0.1)
        assert report.H == pytest.approx(harmonic_mean(report.S, report.U), abs=1e-9)
        assert 0.0 <= min(report.S, report.U, report.H) and max(report.S, report.U, report.H) <= 100.0

    def test_needs_both_sides(self):
        emb, cosines, truths = _two_class_scores()
        with pytest.raises(ProtocolError):
            gzsl_report(cosines[:5], truths[:5], emb, 0.0)

    def test_report_json(self, tmp_path):
        report = EvalReport(gamma=0.123456, S=90.0, U=51.9, H=harmonic_mean(90.0, 51.9), per_class={3: 1 / 3})
        data = json.loads(report.write_json(tmp_path / "report.json").read_text(encoding="utf-8"))
        assert data == {"gamma": 0.1235, "S": 90.0, "U": 51.9, "H": 65.8351, "per_class": {"3": 0.3333}}
        assert "H=65.84" in report.summary()

    def test_zsl_top1_ignores_seen_classes(self):
        emb, cosines, truths = _two_class_scores()
        assert zsl_top1(cosines, truths, emb) == 100.0


# === calibration_sweep Tests ===


class TestCalibrationSweep:
    """Tests for the validation γ sweep."""

    def test_zero_only_grid(self):
        emb, cosines, truths = _two_class_scores()
        sweep = calibration_sweep(cosines, truths, emb, grid=[0.0])
        report = gzsl_report(cosines, truths, emb, 0.0)
        assert sweep.best_gamma == 0.0
        assert (sweep.best.S, sweep.best.U, sweep.best.H) == (report.S, report.U, report.H)

    def test_seen_dominated_scores_pick_positive_gamma(self):
        emb, cosines, truths = _two_class_scores()
        sweep = calibration_sweep(cosines, truths, emb)
        assert 0.1 <= sweep.best_gamma <= 0.11 + 1e-9
        assert sweep.best.H == 100.0
        assert len(sweep.curve) == 101

    def test_ties_keep_smallest_gamma(self):
        emb, cosines, truths = _two_class_scores()
        sweep = calibration_sweep(cosines, truths, emb, grid=[0.3, 0.2, 0.25])
        assert sweep.best_gamma == 0.2
        assert [p.gamma for p in sweep.curve] == [0.2, 0.25, 0.3]

    def test_s_falls_and_u_rises_along_grid(self):
        rng = np.random.default_rng(7)
        emb = _emb(rng.normal(size=(8, 6)), (True,) * 5 + (False,) * 3)
        cosines = cosine_scores(rng.normal(size=(80, 6)), emb)
        truths = np.repeat(np.arange(8), 10)
        curve = calibration_sweep(cosines, truths, emb).curve
        assert all(a.S >= b.S for a, b in zip(curve, curve[1:]))
        assert all(a.U <= b.U for a, b in zip(curve, curve[1:]))

    def test_empty_grid(self):
        emb, cosines, truths = _two_class_scores()
        with pytest.raises(ProtocolError):
            calibration_sweep(cosines, truths, emb, grid=[])

    def test_curve_csv(self, tmp_path):
        emb, cosines, truths = _two_class_scores()
        path = calibration_sweep(cosines, truths, emb, grid=[0.0, 0.5]).write_csv(tmp_path / "curve.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "gamma,S,U,H"
        assert lines[1] == "0.0000,100.0000,0.0000,0.0000"
        assert len(lines) == 3


# === Score File Tests ===


class TestScoreFile:
    """Tests for score-file export and import."""

    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(8)
        emb = _emb(rng.normal(size=(3, 4)), (True, False, True), ids=(2, 5, 9))
        scores = ScoreMatrix(emb, cosine_scores(rng.normal(size=(7, 4)), emb), np.array([2, 5, 9, 2, 5, 9, 5]))
        loaded = read_score_file(write_score_file(scores, tmp_path / "scores.csv"))
        assert loaded.emb.ids == (2, 5, 9)
        assert loaded.emb.seen == (True, False, True)
        assert np.array_equal(loaded.cosines, scores.cosines)
        assert np.array_equal(loaded.truths, scores.truths)
        assert loaded.report(0.1).to_dict() == scores.report(0.1).to_dict()

    def test_columns_sorted_by_id(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("truth,7:unseen,1:seen\n1,0.2,0.9\n7,0.8,0.1\n", encoding="utf-8")
        loaded = read_score_file(path)
        assert loaded.emb.ids == (1, 7)
        np.testing.assert_array_equal(loaded.cosines, [[0.9, 0.2], [0.1, 0.8]])

    def test_bad_header(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("label,1:seen\n1,0.5\n", encoding="utf-8")
        with pytest.raises(ProtocolError):
            read_score_file(path)

    def test_bad_column_flag(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("truth,1:maybe\n1,0.5\n", encoding="utf-8")
        with pytest.raises(ProtocolError, match="bad column"):
            read_score_file(path)

    def test_short_row(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("truth,1:seen,2:unseen\n1,0.5\n", encoding="utf-8")
        with pytest.raises(ProtocolError, match="line 2"):
            read_score_file(path)


# === Inference Tests ===


class TestPredictManifest:
    """Tests for batched inference over a manifest."""

    def test_thread_pool_keeps_order(self, tiny_bundle, tiny_config):
        weights = init_weights(tiny_config, seed=9)
        serial = predict_manifest(weights, tiny_bundle, tiny_bundle.test, batch_size=5, workers=1)
        pooled = predict_manifest(weights, tiny_bundle, tiny_bundle.test, batch_size=5, workers=3)
        assert serial.shape == (len(tiny_bundle.test), 4)
        np.testing.assert_array_equal(serial, pooled)

    def test_attribute_count_mismatch(self, tiny_bundle):
        weights = init_weights(ModelConfig.tiny().with_attributes(6))
        with pytest.raises(DimensionError):
            predict_manifest(weights, tiny_bundle, tiny_bundle.test)

    def test_collect_scores(self, tiny_bundle, tiny_config):
        scores = collect_scores(init_weights(tiny_config, seed=9), tiny_bundle, tiny_bundle.test)
        assert scores.cosines.shape == (len(tiny_bundle.test), 4)
        assert list(scores.truths) == [e.class_id for e in tiny_bundle.test]
        assert np.all(np.abs(scores.cosines) <= 1.0)
