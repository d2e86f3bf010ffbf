"""
Pseudo-label generation.

Three selection strategies share one output type:

- CONSTANT: one fixed confidence threshold for every class.
- CLASS_BALANCED: one threshold per class, the alpha-quantile of that class's
  confidences pooled over the whole target set.
- INSTANCE_ADAPTIVE: per image, per class alpha-percentile thresholds
  (shrunk for low-threshold classes by the theta**gamma factor), smoothed
  across images by an exponential moving average.

A pixel is labeled with its argmax class c iff its max probability is
strictly greater than theta[c]; every other pixel is VOID.
"""

import json
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Final

import numpy as np
import structlog
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .seg_model import SegModel
from .synth_data import Dataset
from .tensor_store import VOID, LabelMask, ProbMap, check_prob_map, save_array

logger = structlog.get_logger(__name__)

# Local threshold of a class with no argmax pixels in the instance.
ABSENT: Final = math.inf

FloatVector = NDArray[np.float64]


class SelectorError(Exception):
    """Base exception for pseudo-label selection."""
    pass


class ClassCountMismatchError(SelectorError):
    """Model, probability maps and selector state disagree on C."""
    pass


class SelectionMode(Enum):
    """Thresholding strategies."""
    CONSTANT = "constant"
    CLASS_BALANCED = "class_balanced"
    INSTANCE_ADAPTIVE = "instance_adaptive"


class SelectorConfig(BaseModel):
    """Pseudo-label selector hyperparameters."""
    model_config = ConfigDict(frozen=True)

    mode: SelectionMode = Field(default=SelectionMode.INSTANCE_ADAPTIVE)
    alpha: float = Field(default=0.2, gt=0.0, le=1.0, description="Proportion of pixels kept per class")
    beta: float = Field(default=0.9, ge=0.0, le=1.0, description="EMA momentum")
    gamma: float = Field(default=8.0, ge=0.0, description="Hard-class weight decay exponent")
    constant_threshold: float = Field(default=0.9, gt=0.0, lt=1.0, description="Threshold for constant mode")
    theta_init: float = Field(default=0.9, gt=0.0, le=1.0, description="Initial global thresholds")


@dataclass
class ThresholdState:
    """Global per-class thresholds theta_t carried across instances."""
    theta: FloatVector
    instances_seen: int = 0
    update_counts: NDArray[np.int64] = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @classmethod
    def initial(cls, num_classes: int, theta_init: float = 0.9) -> "ThresholdState":
        return cls(
            theta=np.full(num_classes, theta_init, dtype=np.float64),
            update_counts=np.zeros(num_classes, dtype=np.int64),
        )

    @property
    def num_classes(self) -> int:
        return int(self.theta.shape[0])

    def copy(self) -> "ThresholdState":
        return ThresholdState(self.theta.copy(), self.instances_seen, self.update_counts.copy())


@dataclass
class PseudoLabelBatch:
    """Pseudo-labels for a target set plus the thresholds that produced them."""
    masks: list[LabelMask]
    thresholds: NDArray[np.float64]
    num_classes: int
    mode: SelectionMode | None
    argmax_counts: NDArray[np.int64]
    labeled_counts: NDArray[np.int64]

    @property
    def total_pixels(self) -> int:
        return int(sum(m.size for m in self.masks))

    @property
    def labeled_pixels(self) -> int:
        return int(self.labeled_counts.sum())

    @property
    def proportion(self) -> float:
        total = self.total_pixels
        return self.labeled_pixels / total if total else 0.0

    @property
    def class_proportion(self) -> FloatVector:
        """Labeled share of each class's argmax pixels (NaN where a class never wins)."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(
                self.argmax_counts > 0,
                self.labeled_counts / np.maximum(self.argmax_counts, 1),
                np.nan,
            )


def _confidence_maps(prob: ProbMap) -> tuple[NDArray[np.int32], NDArray[np.float64]]:
    """Flattened argmax class and max probability per pixel."""
    index = prob.argmax(axis=0).ravel().astype(np.int32)
    value = prob.max(axis=0).ravel().astype(np.float64)
    return index, value


def rank_index(fraction: float, n: int) -> int:
    """0-based cut rank ``clamp(floor(fraction * n), 0, n - 1)``."""
    return min(max(int(math.floor(fraction * n)), 0), n - 1)


def sorted_descending(values: FloatVector) -> FloatVector:
    """Descending sort; ties keep pixel order."""
    return values[np.argsort(-values, kind="stable")]


def local_threshold(prob: ProbMap, state: ThresholdState, cfg: SelectorConfig) -> FloatVector:
    """
    Per-class instance thresholds.

    For each class c with argmax pixels, the confidence at rank
    ``floor(alpha * theta_c**gamma * N_c)`` of the descending list of that
    class's max probabilities. Classes with no argmax pixel get ABSENT.

    Raises:
        ClassCountMismatchError: prob and state disagree on C
    """
    if prob.shape[0] != state.num_classes:
        raise ClassCountMismatchError(
            f"ProbMap has {prob.shape[0]} classes, state has {state.num_classes}"
        )
    index, value = _confidence_maps(prob)
    out = np.full(state.num_classes, ABSENT, dtype=np.float64)
    for c in range(state.num_classes):
        conf = value[index == c]
        if conf.size == 0:
            continue
        fraction = cfg.alpha * state.theta[c] ** cfg.gamma
        out[c] = sorted_descending(conf)[rank_index(fraction, conf.size)]
    return out


def ema_update(state: ThresholdState, theta_x: FloatVector, beta: float) -> ThresholdState:
    """
    ``theta_t = beta * theta_{t-1} + (1 - beta) * theta_x`` for present classes.

    ABSENT classes keep their previous threshold. Returns a new state.
    """
    new = state.copy()
    present = np.isfinite(theta_x)
    blended = beta * state.theta[present] + (1.0 - beta) * theta_x[present]
    # convex combination of values in (0, 1]; clip only absorbs rounding
    new.theta[present] = np.clip(blended, np.finfo(np.float64).tiny, 1.0)
    new.update_counts[present] += 1
    new.instances_seen += 1
    return new


def select_labels(prob: ProbMap, theta: FloatVector) -> LabelMask:
    """
    Argmax class where ``max prob > theta[class]``, VOID elsewhere.

    ABSENT (inf) thresholds label nothing.
    """
    index = prob.argmax(axis=0)
    value = prob.max(axis=0)
    keep = value > theta[index]
    return np.where(keep, index, VOID).astype(np.int32)


class PseudoLabelGenerator:
    """Runs one selection pass over a stream of probability maps."""

    def __init__(self, cfg: SelectorConfig, num_classes: int):
        self.cfg = cfg
        self.num_classes = num_classes

    def generate(
        self, probs: Iterable[ProbMap], state: ThresholdState | None = None
    ) -> tuple[PseudoLabelBatch, ThresholdState]:
        """
        Label every map in iteration order.

        Args:
            probs: ProbMaps in manifest order
            state: thresholds to continue from (instance-adaptive only);
                defaults to ``theta_init`` for every class

        Returns:
            (pseudo-label batch, final threshold state)
        """
        if state is None:
            state = ThresholdState.initial(self.num_classes, self.cfg.theta_init)
        elif state.num_classes != self.num_classes:
            raise ClassCountMismatchError(
                f"State has {state.num_classes} classes, selector expects {self.num_classes}"
            )

        mode = self.cfg.mode
        if mode == SelectionMode.CONSTANT:
            theta = np.full(self.num_classes, self.cfg.constant_threshold)
            return self._fixed(probs, theta), state
        if mode == SelectionMode.CLASS_BALANCED:
            maps = [self._checked(p) for p in probs]
            return self._fixed(maps, class_balanced_thresholds(maps, self.cfg.alpha)), state
        return self._instance_adaptive(probs, state)

    def _checked(self, prob: ProbMap) -> ProbMap:
        if prob.shape[0] != self.num_classes:
            raise ClassCountMismatchError(
                f"ProbMap has {prob.shape[0]} classes, selector expects {self.num_classes}"
            )
        return prob

    def _fixed(self, probs: Iterable[ProbMap], theta: FloatVector) -> PseudoLabelBatch:
        batch = self._empty_batch()
        rows = []
        for prob in probs:
            self._record(batch, self._checked(prob), select_labels(prob, theta))
            rows.append(theta)
        batch.thresholds = np.array(rows, dtype=np.float64).reshape(-1, self.num_classes)
        logger.debug("thresholds_fixed", mode=self.cfg.mode.value, theta=theta.round(4).tolist())
        return batch

    def _instance_adaptive(
        self, probs: Iterable[ProbMap], state: ThresholdState
    ) -> tuple[PseudoLabelBatch, ThresholdState]:
        batch = self._empty_batch()
        rows = []
        for prob in probs:
            prob = self._checked(prob)
            theta_x = local_threshold(prob, state, self.cfg)
            state = ema_update(state, theta_x, self.cfg.beta)
            self._record(batch, prob, select_labels(prob, state.theta))
            rows.append(state.theta.copy())
        batch.thresholds = np.array(rows, dtype=np.float64).reshape(-1, self.num_classes)
        logger.debug(
            "thresholds_adapted",
            instances=state.instances_seen, theta=state.theta.round(4).tolist(),
        )
        return batch, state

    def _empty_batch(self) -> PseudoLabelBatch:
        return PseudoLabelBatch(
            masks=[],
            thresholds=np.zeros((0, self.num_classes)),
            num_classes=self.num_classes,
            mode=self.cfg.mode,
            argmax_counts=np.zeros(self.num_classes, dtype=np.int64),
            labeled_counts=np.zeros(self.num_classes, dtype=np.int64),
        )

    def _record(self, batch: PseudoLabelBatch, prob: ProbMap, mask: LabelMask) -> None:
        batch.masks.append(mask)
        batch.argmax_counts += np.bincount(prob.argmax(axis=0).ravel(), minlength=self.num_classes)
        labeled = mask[mask != VOID]
        batch.labeled_counts += np.bincount(labeled.ravel(), minlength=self.num_classes)


def class_balanced_thresholds(probs: list[ProbMap], alpha: float) -> FloatVector:
    """
    One threshold per class from confidences pooled over all maps.

    Uses the same floor/clamp rank rule as the instance thresholds;
    classes that never win the argmax get ABSENT.
    """
    num_classes = probs[0].shape[0] if probs else 0
    pooled: list[list[FloatVector]] = [[] for _ in range(num_classes)]
    for prob in probs:
        index, value = _confidence_maps(prob)
        for c in range(num_classes):
            pooled[c].append(value[index == c])

    theta = np.full(num_classes, ABSENT, dtype=np.float64)
    for c in range(num_classes):
        conf = np.concatenate(pooled[c]) if pooled[c] else np.zeros(0)
        if conf.size:
            theta[c] = sorted_descending(conf)[rank_index(alpha, conf.size)]
    return theta


def predict_probs(model: SegModel, dataset: Dataset) -> Iterator[ProbMap]:
    """Generator forward passes over ``dataset`` in manifest order."""
    for image in dataset.images:
        yield model.forward(image)


def generate_pseudo_labels(
    generator: SegModel,
    target: Dataset,
    cfg: SelectorConfig,
    state: ThresholdState | None = None,
) -> tuple[PseudoLabelBatch, ThresholdState]:
    """
    Label a target set with the frozen generator G.

    Raises:
        ClassCountMismatchError: ``state`` and generator disagree on C
    """
    selector = PseudoLabelGenerator(cfg, generator.num_classes)
    batch, final_state = selector.generate(predict_probs(generator, target), state)
    logger.info(
        "pseudo_labels_generated",
        mode=cfg.mode.value, images=len(batch.masks), proportion=round(batch.proportion, 4),
    )
    return batch, final_state


def save_pseudo_labels(
    batch: PseudoLabelBatch, out_dir: str | Path, report: dict[str, object] | None = None
) -> Path:
    """
    Write masks, the per-instance theta trajectory CSV and report.json.

    ``report`` is merged into the JSON (e.g. P-mIoU when ground truth exists).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, mask in enumerate(batch.masks):
        save_array(out / f"label_{i:05d}.iast", mask)

    header = "instance," + ",".join(f"theta_{c}" for c in range(batch.num_classes))
    lines = [header]
    for i, row in enumerate(batch.thresholds):
        lines.append(f"{i}," + ",".join(_fmt(v) for v in row))
    (out / "theta_trajectory.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")

    summary: dict[str, object] = {
        "mode": batch.mode.value if batch.mode is not None else "oracle",
        "images": len(batch.masks),
        "proportion": batch.proportion,
        "class_proportion": [None if math.isnan(v) else v for v in batch.class_proportion.tolist()],
        "argmax_counts": batch.argmax_counts.tolist(),
        "labeled_counts": batch.labeled_counts.tolist(),
    }
    summary.update(report or {})
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return out


def _fmt(v: float) -> str:
    return "absent" if math.isinf(v) else f"{v:.8f}"


def validate_probs(probs: Iterable[ProbMap]) -> Iterator[ProbMap]:
    """Pass-through that checks each map is a valid ProbMap."""
    for prob in probs:
        check_prob_map(prob)
        yield prob
