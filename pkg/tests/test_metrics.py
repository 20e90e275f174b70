"""Metric oracles: brute-force counting, algebraic identities, range properties."""

import numpy as np
import pytest

from hrvvs.metrics import (
    METRIC_NAMES,
    MetricInputError,
    aggregate,
    all_metrics,
    dice,
    e_measure_mean,
    jaccard,
    s_measure,
    score_frame,
    weighted_f,
)


def brute_force_overlap(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Set-counting oracle for Jaccard and Dice over binarized maps."""
    inter = union = a = b = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = pred[i, j] >= 0.5
            g = gt[i, j] > 0
            inter += p and g
            union += p or g
            a += p
            b += g
    j_val = 1.0 if union == 0 else inter / union
    d_val = 1.0 if (a + b) == 0 else 2 * inter / (a + b)
    return j_val, d_val


class TestJaccardDice:
    def test_identity(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:5, 3:7] = 1
        assert jaccard(gt.astype(float), gt) == 1.0
        assert dice(gt.astype(float), gt) == 1.0

    def test_disjoint(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[:2] = 1
        pred = np.zeros((8, 8))
        pred[6:] = 1.0
        assert jaccard(pred, gt) == 0.0
        assert dice(pred, gt) == 0.0

    def test_half_overlap_hand_computed(self):
        # 4x4 grid, A = left half (8 px), B = top half (8 px), overlap 4
        gt = np.zeros((4, 4), dtype=np.uint8)
        gt[:2, :] = 1
        pred = np.zeros((4, 4))
        pred[:, :2] = 1.0
        assert jaccard(pred, gt) == pytest.approx(4 / 12)
        assert dice(pred, gt) == pytest.approx(8 / 16)

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            pred = rng.random((16, 16))
            gt = (rng.random((16, 16)) > 0.6).astype(np.uint8)
            j_ref, d_ref = brute_force_overlap(pred, gt)
            assert jaccard(pred, gt) == pytest.approx(j_ref, abs=1e-12)
            assert dice(pred, gt) == pytest.approx(d_ref, abs=1e-12)

    def test_jaccard_dice_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            pred = rng.random((8, 8))
            gt = (rng.random((8, 8)) > 0.5).astype(np.uint8)
            j = jaccard(pred, gt)
            d = dice(pred, gt)
            assert j <= d + 1e-12
            assert j == pytest.approx(d / (2.0 - d), abs=1e-12)

    def test_both_empty_scores_one(self):
        zeros = np.zeros((6, 6))
        for value in all_metrics(zeros, zeros.astype(np.uint8)).values():
            assert value == 1.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricInputError):
            jaccard(np.zeros((4, 4)), np.zeros((5, 5), dtype=np.uint8))


class TestSMeasure:
    def test_perfect_prediction(self):
        gt = np.zeros((16, 16), dtype=np.uint8)
        gt[4:10, 5:12] = 1
        assert s_measure(gt.astype(float), gt) == pytest.approx(1.0, abs=1e-9)

    def test_range_on_random_pairs(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pred = rng.random((12, 12))
            gt = (rng.random((12, 12)) > 0.5).astype(np.uint8)
            assert 0.0 <= s_measure(pred, gt) <= 1.0

    def test_inverted_scores_below_identity(self):
        gt = np.zeros((10, 10), dtype=np.uint8)
        gt[:, :5] = 1
        inverted = 1.0 - gt.astype(float)
        assert s_measure(inverted, gt) < s_measure(gt.astype(float), gt)


class TestWeightedF:
    def test_perfect_prediction(self):
        gt = np.zeros((16, 16), dtype=np.uint8)
        gt[5:10, 5:10] = 1
        assert weighted_f(gt.astype(float), gt) == pytest.approx(1.0, abs=1e-9)

    def test_empty_prediction_interior_object(self):
        gt = np.zeros((20, 20), dtype=np.uint8)
        gt[8:12, 8:12] = 1  # comfortably away from the border
        assert weighted_f(np.zeros((20, 20)), gt) == 0.0

    def test_range_on_random_pairs(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            pred = rng.random((12, 12))
            gt = (rng.random((12, 12)) > 0.5).astype(np.uint8)
            assert 0.0 <= weighted_f(pred, gt) <= 1.0


class TestEMeasure:
    def test_perfect_prediction(self):
        gt = np.zeros((16, 16), dtype=np.uint8)
        gt[2:9, 3:12] = 1
        assert e_measure_mean(gt.astype(float), gt) == pytest.approx(1.0, abs=1e-12)

    def test_range_on_random_pairs(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            pred = rng.random((10, 10))
            gt = (rng.random((10, 10)) > 0.5).astype(np.uint8)
            assert 0.0 <= e_measure_mean(pred, gt) <= 1.0

    def test_constant_half_prediction_threshold_independent(self):
        from hrvvs.metrics import _e_measure_binary

        gt = np.zeros((12, 12), dtype=np.uint8)
        gt[3:7, 2:10] = 1
        pred = np.full((12, 12), 0.5)
        mean_value = e_measure_mean(pred, gt)
        single = _e_measure_binary(pred >= 0.25, gt)
        assert mean_value == pytest.approx(single, abs=1e-12)
        # any single threshold gives the same value on a constant map
        assert _e_measure_binary(pred >= 0.9, gt) == pytest.approx(single, abs=1e-12)


class TestAggregate:
    def test_single_frame_passthrough(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:5, 2:5] = 1
        fs = score_frame(gt, gt, video_id="v0", frame_index=0, class_ids=(1,))
        report = aggregate([fs])
        for name in METRIC_NAMES:
            assert report.mean[name] == fs.class_mean()[name]

    def test_two_video_mean(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[2:6, 2:6] = 1
        perfect = score_frame(gt, gt, video_id="a", frame_index=0, class_ids=(1,))
        empty_pred = score_frame(np.zeros((8, 8), dtype=np.uint8), gt, "b", 0, class_ids=(1,))
        report = aggregate([perfect, empty_pred])
        assert report.mean["Dice"] == pytest.approx(
            (report.per_video["a"]["Dice"] + report.per_video["b"]["Dice"]) / 2
        )

    def test_frame_order_irrelevant(self):
        rng = np.random.default_rng(2)
        frames = []
        for i in range(4):
            pred = (rng.random((8, 8)) > 0.5).astype(np.uint8)
            gt = (rng.random((8, 8)) > 0.5).astype(np.uint8)
            frames.append(score_frame(pred, gt, "v", i, class_ids=(1,)))
        fwd = aggregate(frames)
        rev = aggregate(frames[::-1])
        assert fwd.mean == rev.mean

    def test_empty_rejected(self):
        with pytest.raises(MetricInputError):
            aggregate([])

    def test_csv_columns(self):
        gt = np.zeros((8, 8), dtype=np.uint8)
        gt[1:3, 1:3] = 1
        fs = score_frame(gt, gt, "v0", 0, class_ids=(1, 2))
        csv_text = aggregate([fs]).to_csv()
        assert csv_text.splitlines()[0] == "video,Jaccard,Dice,S_alpha,F_beta_w,E_phi_mn"


def test_all_metrics_perfect_and_range():
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[4:9, 6:13] = 1
    values = all_metrics(gt.astype(float), gt)
    for name, value in values.items():
        assert value == pytest.approx(1.0, abs=1e-9), name
    rng = np.random.default_rng(21)
    for _ in range(20):
        pred = rng.random((16, 16))
        gt = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        for name, value in all_metrics(pred, gt).items():
            assert 0.0 <= value <= 1.0, name
