"""Tests for segmentation and pseudo-label metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from src.metrics import (
    ConfusionMatrix,
    EmptyConfusionError,
    MetricsError,
    confusion_matrix,
    evaluate_model,
    evaluate_predictions,
    label_diversity,
    miou,
    oracle_pseudo_labels,
    pixel_accuracy,
    pseudo_label_stats,
)
from src.seg_model import ModelConfig, SegModel
from src.selector import PseudoLabelGenerator, SelectionMode, SelectorConfig
from src.synth_data import DomainShift, HiddenGroundTruth, make_uda_benchmark
from src.tensor_store import VOID


def mask(*rows):
    return np.array(rows, dtype=np.int32)


class TestMiou:
    """Confusion-matrix IoU."""

    def test_perfect_prediction(self):
        """Prediction equal to ground truth scores 1.0."""
        gt = mask([0, 1], [2, 2])
        value, iou = miou(confusion_matrix([gt], [gt.copy()], 3))
        assert value == 1.0
        assert iou.tolist() == [1.0, 1.0, 1.0]

    def test_hand_example(self):
        """GT [0,0,1,1], pred [0,1,1,1], C=3: IoU (0.5, 2/3, NaN) and mIoU 7/12."""
        value, iou = miou(confusion_matrix([mask([0, 0, 1, 1])], [mask([0, 1, 1, 1])], 3))
        assert iou[0] == pytest.approx(0.5)
        assert iou[1] == pytest.approx(2 / 3)
        assert math.isnan(iou[2])
        assert value == pytest.approx(7 / 12)

    def test_quarter_example(self):
        """One of two classes half-right with a spurious prediction."""
        value, iou = miou(confusion_matrix([mask([0, 0])], [mask([0, 1])], 2))
        assert iou.tolist() == [0.5, 0.0]
        assert value == pytest.approx(0.25)

    def test_predicted_but_absent_scores_zero(self):
        """A class predicted but never in ground truth counts as IoU 0."""
        _, iou = miou(confusion_matrix([mask([0, 0])], [mask([0, 2])], 3))
        assert iou[2] == 0.0
        assert math.isnan(iou[1])

    def test_empty_matrix(self):
        """No pixels is an error, not 0 or NaN."""
        with pytest.raises(EmptyConfusionError):
            miou(ConfusionMatrix.empty(3))
        with pytest.raises(EmptyConfusionError):
            pixel_accuracy(ConfusionMatrix.empty(3))

    def test_void_skipped(self):
        """VOID pixels in either mask are not counted."""
        cm = confusion_matrix([mask([0, VOID, 1])], [mask([0, 1, VOID])], 2)
        assert cm.total == 1

    def test_shape_and_count_mismatch(self):
        """Masks must pair up and agree in shape."""
        with pytest.raises(MetricsError):
            confusion_matrix([mask([0, 1])], [], 2)
        with pytest.raises(MetricsError):
            confusion_matrix([mask([0, 1])], [mask([0])], 2)

    def test_out_of_range_label(self):
        """Labels beyond C - 1 are refused."""
        with pytest.raises(MetricsError):
            confusion_matrix([mask([0, 1])], [mask([0, 5])], 2)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), perm=st.permutations([0, 1, 2, 3]))
    def test_relabeling_permutes_iou(self, seed, perm):
        """Applying one class permutation to both masks permutes per-class IoU."""
        rng = np.random.default_rng(seed)
        gt = rng.integers(0, 4, size=(6, 6)).astype(np.int32)
        pred = rng.integers(0, 4, size=(6, 6)).astype(np.int32)
        p = np.array(perm, dtype=np.int32)
        value, iou = miou(confusion_matrix([gt], [pred], 4))
        value_p, iou_p = miou(confusion_matrix([p[gt]], [p[pred]], 4))
        assert value_p == pytest.approx(value)
        np.testing.assert_allclose(iou_p[p], iou)


class TestEvaluation:
    """Model evaluation."""

    def test_pixel_accuracy(self):
        """Accuracy is the diagonal share."""
        ev = evaluate_predictions([mask([0, 1, 1, 0])], [mask([0, 1, 0, 0])], 2)
        assert ev.pixel_accuracy == 0.75

    def test_evaluate_model_with_hidden_ground_truth(self, small_spec):
        """Target splits are scored through HiddenGroundTruth."""
        bench = make_uda_benchmark(small_spec, DomainShift(noise_sigma=0.1), 1, 3, seed=2)
        model = SegModel.from_config(ModelConfig(hidden_dims=(8,)), 5, 3, seed=0)
        ev = evaluate_model(model, bench.target, bench.target_gt)
        assert 0.0 <= ev.miou <= 1.0
        assert ev.confusion.total == 3 * 12 * 12

    def test_evaluate_model_needs_masks(self, small_spec):
        """A mask-less split without ground truth cannot be scored."""
        bench = make_uda_benchmark(small_spec, DomainShift(), 1, 2, seed=2)
        model = SegModel.from_config(ModelConfig(hidden_dims=(8,)), 5, 3, seed=0)
        with pytest.raises(MetricsError):
            evaluate_model(model, bench.target)


class TestPseudoLabelStats:
    """Pseudo-label proportion and quality."""

    def test_labels_equal_ground_truth(self):
        """Oracle labels have P-mIoU 1 and full coverage."""
        gt = [mask([0, 1], [1, 2])]
        stats = pseudo_label_stats(oracle_pseudo_labels(gt, 3), gt)
        assert stats.p_miou == 1.0
        assert stats.precision == 1.0
        assert stats.proportion == 1.0
        assert stats.class_coverage.tolist() == [1.0, 1.0, 1.0]

    def test_all_void_is_not_applicable(self, make_probs):
        """An all-VOID batch has proportion 0 and P-mIoU N/A."""
        probs = [make_probs(3, 4, 4, scale=0.5)]
        cfg = SelectorConfig(mode=SelectionMode.CONSTANT, constant_threshold=0.999999)
        batch, _ = PseudoLabelGenerator(cfg, 3).generate(probs)
        assert batch.labeled_pixels == 0
        stats = pseudo_label_stats(batch, [np.zeros((4, 4), dtype=np.int32)])
        assert stats.proportion == 0.0
        assert stats.p_miou is None
        assert stats.p_miou_text() == "N/A"

    def test_partial_labels(self):
        """Coverage and precision count labeled pixels only."""
        gt = [mask([0, 0, 1, 1])]
        batch = oracle_pseudo_labels([mask([0, VOID, 0, VOID])], 2)
        stats = pseudo_label_stats(batch, gt)
        assert stats.proportion == 0.5
        assert stats.precision == 0.5
        assert stats.class_coverage.tolist() == [0.5, 0.5]

    def test_count_mismatch(self):
        """Pseudo-labels and ground truth must pair up."""
        batch = oracle_pseudo_labels([mask([0, 1])], 2)
        with pytest.raises(MetricsError):
            pseudo_label_stats(batch, [mask([0, 1]), mask([1, 0])])

    def test_hidden_ground_truth_accepted(self):
        """HiddenGroundTruth works wherever a mask list does."""
        gt = HiddenGroundTruth([mask([0, 1])])
        assert pseudo_label_stats(oracle_pseudo_labels(gt, 2), gt).p_miou == 1.0


class TestDiversity:
    """Entropy of the labeled-class histogram."""

    def test_single_class(self):
        """One labeled class has zero diversity."""
        assert label_diversity(oracle_pseudo_labels([mask([1, 1, VOID])], 2)) == 0.0

    def test_balanced_two_classes(self):
        """Two equally frequent classes give ln 2."""
        value = label_diversity(oracle_pseudo_labels([mask([0, 1, 0, 1])], 2))
        assert value == pytest.approx(math.log(2))

    def test_all_void(self):
        """Nothing labeled is an error."""
        with pytest.raises(MetricsError):
            label_diversity(oracle_pseudo_labels([mask([VOID, VOID])], 2))
