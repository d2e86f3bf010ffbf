"""
Segmentation and pseudo-label quality metrics.

This is the only module that reads ``HiddenGroundTruth``.
"""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import structlog
from numpy.typing import NDArray

from .seg_model import SegModel
from .selector import PseudoLabelBatch
from .synth_data import Dataset, HiddenGroundTruth
from .tensor_store import VOID, LabelMask

logger = structlog.get_logger(__name__)

GroundTruth = HiddenGroundTruth | Sequence[LabelMask]


class MetricsError(Exception):
    """Base exception for metric computation."""
    pass


class EmptyConfusionError(MetricsError):
    """No evaluated pixels."""
    pass


@dataclass
class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns are prediction."""
    counts: NDArray[np.int64]

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, gt: LabelMask, pred: LabelMask) -> "ConfusionMatrix":
        """Accumulate one image; pixels VOID in either mask are skipped."""
        if gt.shape != pred.shape:
            raise MetricsError(f"Ground truth {gt.shape} and prediction {pred.shape} differ")
        c = self.num_classes
        valid = (gt != VOID) & (pred != VOID)
        g = gt[valid].astype(np.int64)
        p = pred[valid].astype(np.int64)
        if g.size and (g.max() >= c or p.max() >= c or min(g.min(), p.min()) < 0):
            raise MetricsError(f"Labels outside 0..{c - 1}")
        self.counts += np.bincount(c * g + p, minlength=c * c).reshape(c, c)
        return self


def confusion_matrix(
    gt_masks: Sequence[LabelMask], pred_masks: Sequence[LabelMask], num_classes: int
) -> ConfusionMatrix:
    if len(gt_masks) != len(pred_masks):
        raise MetricsError(f"{len(gt_masks)} ground-truth masks vs {len(pred_masks)} predictions")
    cm = ConfusionMatrix.empty(num_classes)
    for gt, pred in zip(gt_masks, pred_masks):
        cm.add(gt, pred)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[float, NDArray[np.float64]]:
    """
    Mean IoU and per-class IoU.

    Classes absent from both ground truth and prediction get NaN and are
    left out of the mean; classes predicted but absent from ground truth
    score 0.

    Raises:
        EmptyConfusionError: the matrix holds no pixels
    """
    if cm.total == 0:
        raise EmptyConfusionError("Confusion matrix is empty")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1.0), np.nan)
    return float(np.nanmean(iou)), iou


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise EmptyConfusionError("Confusion matrix is empty")
    return float(np.trace(cm.counts) / cm.total)


def _masks(gt: GroundTruth) -> list[LabelMask]:
    return gt._unwrap() if isinstance(gt, HiddenGroundTruth) else list(gt)


@dataclass
class Evaluation:
    miou: float
    iou: NDArray[np.float64]
    pixel_accuracy: float
    confusion: ConfusionMatrix


def evaluate_predictions(
    preds: Sequence[LabelMask], gt: GroundTruth, num_classes: int
) -> Evaluation:
    cm = confusion_matrix(_masks(gt), preds, num_classes)
    mean, iou = miou(cm)
    return Evaluation(miou=mean, iou=iou, pixel_accuracy=pixel_accuracy(cm), confusion=cm)


def evaluate_model(
    model: SegModel, dataset: Dataset, gt: GroundTruth | None = None
) -> Evaluation:
    """
    Score argmax predictions of ``model`` on ``dataset``.

    Uses ``gt`` when given, otherwise the dataset's visible masks.
    """
    if gt is None:
        if dataset.masks is None:
            raise MetricsError("Dataset has no masks and no ground truth was given")
        gt = dataset.masks
    preds = [model.predict(img) for img in dataset.images]
    return evaluate_predictions(preds, gt, model.num_classes)


@dataclass
class PseudoLabelStats:
    proportion: float
    class_coverage: NDArray[np.float64]
    p_miou: float | None
    precision: float | None

    def p_miou_text(self) -> str:
        return "N/A" if self.p_miou is None else f"{self.p_miou:.4f}"


def pseudo_label_stats(batch: PseudoLabelBatch, gt: GroundTruth) -> PseudoLabelStats:
    """
    Proportion and quality of pseudo-labels against ground truth.

    ``proportion`` is labeled / total pixels; ``class_coverage[c]`` is the
    share of ground-truth class-c pixels that received a label; P-mIoU and
    precision use labeled pixels only and are None for an all-VOID batch.

    Raises:
        MetricsError: mask count or sizes differ
    """
    gt_masks = _masks(gt)
    if len(gt_masks) != len(batch.masks):
        raise MetricsError(f"{len(batch.masks)} pseudo-label masks vs {len(gt_masks)} ground truth")

    c = batch.num_classes
    covered = np.zeros(c, dtype=np.int64)
    present = np.zeros(c, dtype=np.int64)
    labeled = 0
    total = 0
    cm = ConfusionMatrix.empty(c)
    for mask, g in zip(batch.masks, gt_masks):
        if mask.shape != g.shape:
            raise MetricsError(f"Pseudo-label {mask.shape} and ground truth {g.shape} differ")
        cm.add(g, mask)
        hit = mask != VOID
        labeled += int(hit.sum())
        total += mask.size
        present += np.bincount(g.ravel(), minlength=c)[:c]
        covered += np.bincount(g[hit].ravel(), minlength=c)[:c]

    with np.errstate(invalid="ignore", divide="ignore"):
        coverage = np.where(present > 0, covered / np.maximum(present, 1), np.nan)
    p_miou = miou(cm)[0] if cm.total else None
    precision = pixel_accuracy(cm) if cm.total else None
    return PseudoLabelStats(
        proportion=labeled / total if total else 0.0,
        class_coverage=coverage,
        p_miou=p_miou,
        precision=precision,
    )


def label_diversity(batch: PseudoLabelBatch) -> float:
    """
    Shannon entropy (nats) of the class histogram of labeled pixels.

    Raises:
        MetricsError: no labeled pixels
    """
    counts = batch.labeled_counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise MetricsError("Cannot measure diversity of an all-VOID batch")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def oracle_pseudo_labels(gt: GroundTruth, num_classes: int) -> PseudoLabelBatch:
    """Ground truth dressed as a pseudo-label batch (debug hook for self-training)."""
    masks = [np.array(m, dtype=np.int32, copy=True) for m in _masks(gt)]
    counts = np.zeros(num_classes, dtype=np.int64)
    for m in masks:
        counts += np.bincount(m[m != VOID].ravel(), minlength=num_classes)
    return PseudoLabelBatch(
        masks=masks,
        thresholds=np.zeros((len(masks), num_classes)),
        num_classes=num_classes,
        mode=None,
        argmax_counts=counts.copy(),
        labeled_counts=counts,
    )
