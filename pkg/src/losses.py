"""
Objective terms for warm-up and self-training.

Every term takes per-image probability maps and returns its value together
with the gradient on the logits that produced them, so the caller feeds it
straight into ``SegModel.backward``. Values are per-pixel means inside one
image; the trainer averages across the images of a batch.

Natural logs throughout; probabilities are clamped to PROB_EPS before a log.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np
import structlog
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .seg_model import Discriminator, FloatArray
from .tensor_store import PROB_EPS, VOID, LabelMask, ProbMap

logger = structlog.get_logger(__name__)

AdversarialSide = Literal["segmentation", "discriminator"]


class LossError(Exception):
    """Base exception for loss evaluation."""
    pass


class InconsistentRegionsError(LossError):
    """Region masks do not partition the image or disagree with the labels."""
    pass


class LossConfig(BaseModel):
    """Weights of the self-training and warm-up objectives."""
    model_config = ConfigDict(frozen=True)

    lambda_i: float = Field(default=3.0, ge=0.0, description="Ignored-region entropy weight")
    lambda_c: float = Field(default=0.1, ge=0.0, description="Confident-region KLD weight")
    lambda_adv: float = Field(default=0.01, ge=0.0, description="Adversarial weight in warm-up")


@dataclass(frozen=True)
class RegionMasks:
    """Confident (pseudo-labeled) and ignored pixel sets of one image."""
    confident: NDArray[np.bool_]
    ignored: NDArray[np.bool_]

    def __post_init__(self) -> None:
        if self.confident.shape != self.ignored.shape:
            raise InconsistentRegionsError("Region masks differ in shape")
        if np.any(self.confident & self.ignored) or not np.all(self.confident | self.ignored):
            raise InconsistentRegionsError("Confident and ignored regions must partition the image")

    @classmethod
    def from_labels(cls, labels: LabelMask) -> "RegionMasks":
        confident = labels != VOID
        return cls(confident=confident, ignored=~confident)


@dataclass(frozen=True)
class LossTerm:
    """Scalar value and gradient on logits [C, H, W]."""
    value: float
    grad: FloatArray


@dataclass(frozen=True)
class CombinedLoss:
    value: float
    grad: FloatArray
    ce: float
    r_i: float
    r_c: float


@dataclass(frozen=True)
class AdversarialLosses:
    """
    Both sides of the least-squares adversarial objective.

    Gradients are filled for ``side`` only.
    """
    side: AdversarialSide
    seg_value: float
    source_ce: float
    adversarial: float
    disc_value: float
    source_grad: FloatArray | None = None
    target_grad: FloatArray | None = None
    disc_grad: FloatArray | None = None


def _log(prob: ProbMap) -> FloatArray:
    return np.log(np.maximum(prob, PROB_EPS))


def _check_shapes(prob: ProbMap, mask_shape: tuple[int, ...]) -> None:
    if prob.ndim != 3 or prob.shape[1:] != mask_shape:
        raise LossError(f"ProbMap {prob.shape} does not match mask {mask_shape}")


def softmax_backward(prob: ProbMap, dprob: FloatArray) -> FloatArray:
    """Map a gradient on softmax outputs to a gradient on its logits (axis 0)."""
    return prob * (dprob - (prob * dprob).sum(axis=0, keepdims=True))


def masked_ce(prob: ProbMap, labels: LabelMask) -> LossTerm:
    """
    Mean cross-entropy over non-VOID pixels.

    All-VOID labels give value 0 and a zero gradient.
    """
    _check_shapes(prob, labels.shape)
    labeled = labels != VOID
    n = int(labeled.sum())
    grad = np.zeros_like(prob)
    if n == 0:
        return LossTerm(0.0, grad)

    ys, xs = np.nonzero(labeled)
    cls = labels[ys, xs]
    picked = prob[cls, ys, xs]
    value = float(-np.mean(np.log(np.maximum(picked.astype(np.float64), PROB_EPS))))

    grad[:, ys, xs] = prob[:, ys, xs]
    grad[cls, ys, xs] -= 1.0
    grad /= n
    return LossTerm(value, grad)


def kld_confident(prob: ProbMap, masks: RegionMasks) -> LossTerm:
    """
    KL divergence to the uniform distribution on confident pixels, up to a constant.

    Value is the mean of ``-(1/C) * sum_c log p_c``; minimum ln C at uniform.
    """
    _check_shapes(prob, masks.confident.shape)
    n = int(masks.confident.sum())
    grad = np.zeros_like(prob)
    if n == 0:
        return LossTerm(0.0, grad)

    c = prob.shape[0]
    sel = prob[:, masks.confident].astype(np.float64)
    value = float(-np.mean(_log(sel).sum(axis=0)) / c)
    grad[:, masks.confident] = (prob[:, masks.confident] - 1.0 / c) / n
    return LossTerm(value, grad)


def entropy_ignored(prob: ProbMap, masks: RegionMasks) -> LossTerm:
    """Mean Shannon entropy over ignored pixels, in [0, ln C]."""
    _check_shapes(prob, masks.ignored.shape)
    n = int(masks.ignored.sum())
    grad = np.zeros_like(prob)
    if n == 0:
        return LossTerm(0.0, grad)

    p = prob[:, masks.ignored]
    logp = _log(p)
    ent = -(p * logp).sum(axis=0)
    value = float(np.mean(ent, dtype=np.float64))
    grad[:, masks.ignored] = -p * (logp + ent) / n
    return LossTerm(value, grad)


def combined_objective(
    prob: ProbMap, labels: LabelMask, masks: RegionMasks, cfg: LossConfig
) -> CombinedLoss:
    """
    Self-training objective ``CE + lambda_i * R_i + lambda_c * R_c``.

    Raises:
        InconsistentRegionsError: confident region differs from the non-VOID labels
    """
    if not np.array_equal(masks.confident, labels != VOID):
        raise InconsistentRegionsError("Confident region must equal the non-VOID label set")

    ce = masked_ce(prob, labels)
    r_i = entropy_ignored(prob, masks)
    r_c = kld_confident(prob, masks)
    value = ce.value + cfg.lambda_i * r_i.value + cfg.lambda_c * r_c.value
    grad = ce.grad + cfg.lambda_i * r_i.grad + cfg.lambda_c * r_c.grad
    return CombinedLoss(value=value, grad=grad, ce=ce.value, r_i=r_i.value, r_c=r_c.value)


def adversarial_losses(
    src_prob: ProbMap,
    src_labels: LabelMask,
    tgt_prob: ProbMap,
    disc: Discriminator,
    lambda_adv: float,
    side: AdversarialSide,
) -> AdversarialLosses:
    """
    Least-squares adversarial warm-up objective.

    Segmentation side: ``CE(source) + lambda_adv * mean((D(p_t) - 1)^2)``.
    Discriminator side: ``mean((D(p_s) - 1)^2) + mean(D(p_t)^2)``.

    Args:
        side: which network receives gradients from this call
    """
    if side not in ("segmentation", "discriminator"):
        raise LossError(f"Unknown adversarial side: {side}")

    ce = masked_ce(src_prob, src_labels)
    d_src, src_cache = disc.score(src_prob)
    d_tgt, tgt_cache = disc.score(tgt_prob)
    adv = float(np.mean((d_tgt.astype(np.float64) - 1.0) ** 2))
    disc_value = float(
        np.mean((d_src.astype(np.float64) - 1.0) ** 2) + np.mean(d_tgt.astype(np.float64) ** 2)
    )
    seg_value = ce.value + lambda_adv * adv

    if side == "segmentation":
        dscore = 2.0 * (d_tgt - 1.0) / d_tgt.size
        _, dprob = disc.backward(tgt_cache, dscore)
        target_grad = lambda_adv * softmax_backward(tgt_prob, dprob.astype(tgt_prob.dtype))
        return AdversarialLosses(
            side=side, seg_value=seg_value, source_ce=ce.value, adversarial=adv,
            disc_value=disc_value, source_grad=ce.grad, target_grad=target_grad,
        )

    g_src, _ = disc.backward(src_cache, 2.0 * (d_src - 1.0) / d_src.size)
    g_tgt, _ = disc.backward(tgt_cache, 2.0 * d_tgt / d_tgt.size)
    return AdversarialLosses(
        side=side, seg_value=seg_value, source_ce=ce.value, adversarial=adv,
        disc_value=disc_value, disc_grad=g_src + g_tgt,
    )
