"""
Three-phase self-training driver.

(a) warm-up: train M on the labeled source set (optionally with an
    output-space discriminator); M becomes the first generator G.
(b) generation: frozen G labels the target set.
(c) self-training: M is trained on target images only with
    CE + lambda_i * R_i + lambda_c * R_c.

(b) + (c) form one round; after each round G receives a copy of M.
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from typing import Literal, Protocol

import numpy as np
import structlog
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from .losses import LossConfig, RegionMasks, adversarial_losses, combined_objective, masked_ce
from .metrics import (
    Evaluation,
    evaluate_model,
    label_diversity,
    oracle_pseudo_labels,
    pseudo_label_stats,
)
from .seg_model import (
    Discriminator,
    FloatArray,
    HasParams,
    ModelConfig,
    ModelError,
    OptimState,
    SegModel,
    clone,
    copy_weights,
    opt_step,
    weights_hash,
)
from .selector import (
    PseudoLabelBatch,
    SelectionMode,
    SelectorConfig,
    ThresholdState,
    generate_pseudo_labels,
)
from .synth_data import (
    NUM_FEATURES,
    Dataset,
    DomainShift,
    HiddenGroundTruth,
    SceneSpec,
    UdaBenchmark,
    derive_seed,
    make_uda_benchmark,
)
from .tensor_store import LabelMask, ProbMap

logger = structlog.get_logger(__name__)

# Seed stream keys
_SEED_MODEL = 100
_SEED_DISC = 101
_SEED_WARMUP = 200
_SEED_ROUND = 300


class TrainerError(Exception):
    """Base exception for training orchestration."""
    pass


class TrainingAbortedError(TrainerError):
    """Training hit a non-finite loss or gradient; carries completed rounds."""

    def __init__(self, message: str, records: list["RoundRecord"] | None = None):
        super().__init__(message)
        self.records = list(records or [])


class PhaseIsolationError(TrainerError):
    """Generator weights changed during generation, or source images reached phase (c)."""
    pass


class WarmupMode(Enum):
    SOURCE_ONLY = "source_only"
    ADVERSARIAL = "adversarial"


class DataConfig(BaseModel):
    """Benchmark generation settings."""
    model_config = ConfigDict(frozen=True)

    scene: SceneSpec
    shift: DomainShift = Field(
        default=DomainShift(channel_bias=(-0.05, -0.1, 0.1), noise_sigma=0.1, contrast_scale=0.85)
    )
    n_source: int = Field(default=64, ge=1)
    n_target: int = Field(default=128, ge=1)
    n_val: int = Field(default=32, ge=0)


class OptimizerConfig(BaseModel):
    """Adam settings; ``lr`` drives self-training, warm-up has its own."""
    model_config = ConfigDict(frozen=True)

    lr: float = Field(default=5e-4, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)


class WarmupConfig(BaseModel):
    """Phase (a) settings; the adversarial weight is ``losses.lambda_adv``."""
    model_config = ConfigDict(frozen=True)

    mode: WarmupMode = WarmupMode.SOURCE_ONLY
    epochs: int = Field(default=20, ge=0)
    min_steps: int = Field(
        default=300, ge=0, description="Repeat epochs until this many optimizer steps ran"
    )
    lr: float = Field(default=3e-3, ge=0.0, description="Adam learning rate of M during warm-up")
    disc_hidden: tuple[int, ...] = Field(default=(16,))
    disc_lr: float = Field(default=1e-3, ge=0.0)


class SslConfig(BaseModel):
    """Semi-supervised mode: a labeled share of one domain, the rest unlabeled."""
    model_config = ConfigDict(frozen=True)

    labeled_fraction: float = Field(gt=0.0, le=1.0)


class ExperimentConfig(BaseModel):
    """Full declarative description of one run."""
    model_config = ConfigDict(frozen=True)

    seed: int = Field(ge=0)
    data: DataConfig
    model: ModelConfig = ModelConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    warmup: WarmupConfig = WarmupConfig()
    selector: SelectorConfig = SelectorConfig()
    losses: LossConfig = LossConfig()
    rounds: int = Field(default=3, ge=1)
    epochs_per_round: int = Field(default=2, ge=0)
    batch_size: int = Field(default=4, ge=1)
    retain_warmup_loss: bool = Field(default=False, description="Keep source CE in phase (c)")
    carry_thresholds: bool = Field(default=False, description="Keep theta across rounds")
    oracle_labels: bool = Field(default=False, description="Debug: train on target ground truth")
    ssl: SslConfig | None = None

    @property
    def num_classes(self) -> int:
        return self.data.scene.num_classes


@dataclass
class RoundRecord:
    """Outcome of one generation + self-training round."""
    round_index: int
    proportion: float
    class_proportion: list[float]
    p_miou: float | None
    precision: float | None
    diversity: float | None
    generator_miou: float
    target_miou: float
    target_iou: list[float]
    loss_curve: list[float]
    theta_trajectory: NDArray[np.float64]
    source_images_in_phase_c: int = 0
    discriminator_steps: int = 0
    generator_hash: str = ""


@dataclass
class ExperimentResult:
    warmup: Evaluation
    records: list[RoundRecord]
    model: SegModel
    warmup_model: SegModel

    @property
    def final_miou(self) -> float:
        return self.records[-1].target_miou if self.records else self.warmup.miou


class RunObserver(Protocol):
    """Receives artifacts as the experiment progresses."""

    def on_warmup(self, model: SegModel, evaluation: Evaluation) -> None: ...

    def on_round(self, record: RoundRecord, model: SegModel, batch: PseudoLabelBatch) -> None: ...

    def on_abort(self, records: list[RoundRecord], error: Exception) -> None: ...


def build_benchmark(cfg: ExperimentConfig) -> UdaBenchmark:
    data = cfg.data
    return make_uda_benchmark(
        data.scene, data.shift, data.n_source, data.n_target, cfg.seed, n_val=data.n_val
    )


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[NDArray[np.int64]]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _step(model: HasParams, state: OptimState, grad: FloatArray, where: str) -> None:
    try:
        opt_step(model, state, grad)
    except ModelError as e:
        logger.error("training_aborted", where=where, error=str(e))
        raise TrainingAbortedError(f"{where}: {e}") from e


def _check_loss(value: float, where: str) -> None:
    if not np.isfinite(value):
        logger.error("training_aborted", where=where, loss=value)
        raise TrainingAbortedError(f"{where}: non-finite loss {value}")


def _fresh_optimizer(params: FloatArray, cfg: OptimizerConfig, lr: float | None = None) -> OptimState:
    return OptimState.fresh(
        params, lr=cfg.lr if lr is None else lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps
    )


def init_model(cfg: ExperimentConfig) -> SegModel:
    return SegModel.from_config(
        cfg.model, NUM_FEATURES, cfg.num_classes, seed=derive_seed(cfg.seed, _SEED_MODEL)
    )


def _source_ce_grad(model: SegModel, source: Dataset, idx: Sequence[int]) -> tuple[float, FloatArray]:
    """Mean CE and gradient over the listed source images."""
    assert source.masks is not None
    grad = np.zeros_like(model.params)
    loss = 0.0
    for i in idx:
        x = source.images[i]
        term = masked_ce(model.forward(x), source.masks[i])
        grad += model.backward(x, term.grad)
        loss += term.value
    return loss / len(idx), grad / len(idx)


def _warmup_epochs(cfg: ExperimentConfig, n_source: int) -> int:
    """Configured epochs, repeated until at least ``warmup.min_steps`` optimizer steps."""
    wcfg = cfg.warmup
    if wcfg.epochs == 0:
        return 0
    steps_per_epoch = math.ceil(n_source / cfg.batch_size)
    return max(wcfg.epochs, math.ceil(wcfg.min_steps / steps_per_epoch))


def _discriminator_step(
    disc: Discriminator,
    disc_opt: OptimState,
    pairs: list[tuple[ProbMap, LabelMask, ProbMap]],
    lambda_adv: float,
    where: str,
) -> None:
    """One D update on (source probs, source labels, target probs) triples."""
    disc_grad = np.zeros_like(disc.params)
    for p_s, y_s, p_t in pairs:
        terms = adversarial_losses(p_s, y_s, p_t, disc, lambda_adv, "discriminator")
        assert terms.disc_grad is not None
        disc_grad += terms.disc_grad
    _step(disc, disc_opt, disc_grad / len(pairs), where + " (D)")


@dataclass
class WarmStart:
    """Phase (a) output: M_0 and the discriminator of an adversarial warm-up."""
    model: SegModel
    discriminator: Discriminator | None = None


def train_warmup(cfg: ExperimentConfig, bench: UdaBenchmark) -> WarmStart:
    """
    Phase (a): train M_0 on the labeled source set.

    Source-only minimises source CE. Adversarial additionally alternates a
    discriminator step with ``lambda_adv * mean((D(p_t) - 1)^2)`` on M;
    with ``lambda_adv == 0`` the M trajectory equals source-only.
    """
    model = init_model(cfg)
    wcfg = cfg.warmup
    epochs = _warmup_epochs(cfg, len(bench.source))
    if epochs == 0:
        return WarmStart(model)

    source, target = bench.source, bench.target
    if source.masks is None:
        raise TrainerError("Warm-up requires a labeled source set")

    adversarial = wcfg.mode == WarmupMode.ADVERSARIAL
    lambda_adv = cfg.losses.lambda_adv
    opt = _fresh_optimizer(model.params, cfg.optimizer, lr=wcfg.lr)
    disc = disc_opt = None
    if adversarial:
        disc = Discriminator.create(
            cfg.num_classes, wcfg.disc_hidden, seed=derive_seed(cfg.seed, _SEED_DISC)
        )
        disc_opt = _fresh_optimizer(disc.params, cfg.optimizer, lr=wcfg.disc_lr)

    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_WARMUP, epoch))
        epoch_loss = []
        for batch in _minibatches(len(source), cfg.batch_size, rng):
            where = f"warmup epoch={epoch} step={step}"
            loss, grad = _source_ce_grad(model, source, batch)

            if disc is not None and disc_opt is not None:
                tgt_idx = [(step * cfg.batch_size + j) % len(target) for j in range(len(batch))]
                pairs = []
                adv_grad = np.zeros_like(grad)
                for i, t in zip(batch, tgt_idx):
                    p_s = model.forward(source.images[i])
                    x_t = target.images[t]
                    p_t = model.forward(x_t)
                    pairs.append((p_s, source.masks[i], p_t))
                    if lambda_adv > 0:
                        terms = adversarial_losses(
                            p_s, source.masks[i], p_t, disc, lambda_adv, "segmentation"
                        )
                        assert terms.target_grad is not None
                        adv_grad += model.backward(x_t, terms.target_grad)
                        loss += lambda_adv * terms.adversarial / len(batch)
                if lambda_adv > 0:
                    grad = grad + adv_grad / len(batch)
                _discriminator_step(disc, disc_opt, pairs, lambda_adv, where)

            _check_loss(loss, where)
            _step(model, opt, grad, where)
            epoch_loss.append(loss)
            step += 1
        logger.debug("warmup_epoch", epoch=epoch, loss=float(np.mean(epoch_loss)))

    logger.info("warmup_complete", mode=wcfg.mode.value, epochs=epochs, steps=step)
    return WarmStart(model, disc)


def warmup(cfg: ExperimentConfig, bench: UdaBenchmark) -> SegModel:
    """Phase (a) model only; see ``train_warmup``."""
    return train_warmup(cfg, bench).model


def evaluate_target(model: SegModel, bench: UdaBenchmark) -> Evaluation:
    """Target mIoU on the validation split, or on the training split when it is empty."""
    if len(bench.target_val) > 0:
        return evaluate_model(model, bench.target_val, bench.target_val_gt)
    return evaluate_model(model, bench.target, bench.target_gt)


PhaseItem = tuple[Literal["source", "target"], int]


def _phase_c_batches(
    cfg: ExperimentConfig, bench: UdaBenchmark, rng: np.random.Generator
) -> list[list[PhaseItem]]:
    batches: list[list[PhaseItem]] = []
    for idx in _minibatches(len(bench.target), cfg.batch_size, rng):
        items: list[PhaseItem] = [("target", int(i)) for i in idx]
        if cfg.retain_warmup_loss:
            src = rng.integers(0, len(bench.source), size=len(idx))
            items += [("source", int(j)) for j in src]
        batches.append(items)
    return batches


def _assert_target_only(cfg: ExperimentConfig, items: list[PhaseItem]) -> int:
    n_source = sum(1 for domain, _ in items if domain == "source")
    if n_source and not cfg.retain_warmup_loss:
        raise PhaseIsolationError("Source images reached self-training without retain_warmup_loss")
    return n_source


def run_round(
    model: SegModel,
    generator: SegModel,
    cfg: ExperimentConfig,
    round_idx: int,
    bench: UdaBenchmark,
    state: ThresholdState | None = None,
    disc: Discriminator | None = None,
) -> tuple[SegModel, RoundRecord, ThresholdState, PseudoLabelBatch]:
    """
    Phases (b) and (c) once.

    With ``retain_warmup_loss`` and a discriminator ``disc`` from an
    adversarial warm-up, every target image also gets the term
    ``lambda_adv * mean((D(p_t) - 1)^2)`` against its paired source image and
    D takes one step per batch; ``disc`` is trained in place.

    Returns:
        (updated M, record, selector state after generation, pseudo-labels)
    """
    num_classes = cfg.num_classes
    g_hash = weights_hash(generator)
    if cfg.oracle_labels:
        batch = oracle_pseudo_labels(bench.target_gt, num_classes)
        state = state or ThresholdState.initial(num_classes, cfg.selector.theta_init)
    else:
        carried = state if cfg.carry_thresholds else None
        batch, state = generate_pseudo_labels(generator, bench.target, cfg.selector, carried)
    if weights_hash(generator) != g_hash:
        raise PhaseIsolationError("Generator weights changed during pseudo-label generation")

    stats = pseudo_label_stats(batch, bench.target_gt)
    diversity = label_diversity(batch) if batch.labeled_pixels else None
    generator_eval = evaluate_target(generator, bench)

    opt = _fresh_optimizer(model.params, cfg.optimizer)
    adversarial = disc is not None and cfg.retain_warmup_loss
    disc_opt = (
        _fresh_optimizer(disc.params, cfg.optimizer, lr=cfg.warmup.disc_lr)
        if adversarial and disc is not None else None
    )
    lambda_adv = cfg.losses.lambda_adv
    source = bench.source
    loss_curve: list[float] = []
    source_seen = 0
    disc_steps = 0
    for epoch in range(cfg.epochs_per_round):
        rng = np.random.default_rng(derive_seed(cfg.seed, _SEED_ROUND, round_idx, epoch))
        for b, items in enumerate(_phase_c_batches(cfg, bench, rng)):
            where = f"round={round_idx} epoch={epoch} batch={b}"
            source_seen += _assert_target_only(cfg, items)
            tgt = [i for domain, i in items if domain == "target"]
            src = [i for domain, i in items if domain == "source"]

            grad = np.zeros_like(model.params)
            loss = 0.0
            pairs: list[tuple[ProbMap, LabelMask, ProbMap]] = []
            for n, i in enumerate(tgt):
                x = bench.target.images[i]
                labels = batch.masks[i]
                p_s = model.forward(source.images[src[n]]) if disc_opt is not None else None
                p_t = model.forward(x)
                term = combined_objective(p_t, labels, RegionMasks.from_labels(labels), cfg.losses)
                dlogits, value = term.grad, term.value
                if p_s is not None and disc is not None:
                    assert source.masks is not None
                    y_s = source.masks[src[n]]
                    pairs.append((p_s, y_s, p_t))
                    if lambda_adv > 0:
                        adv = adversarial_losses(p_s, y_s, p_t, disc, lambda_adv, "segmentation")
                        assert adv.target_grad is not None
                        dlogits = dlogits + adv.target_grad
                        value += lambda_adv * adv.adversarial
                grad += model.backward(x, dlogits)
                loss += value
            grad /= len(tgt)
            loss /= len(tgt)
            if src:
                src_loss, src_grad = _source_ce_grad(model, source, src)
                grad += src_grad
                loss += src_loss
            if disc is not None and disc_opt is not None and pairs:
                _discriminator_step(disc, disc_opt, pairs, lambda_adv, where)
                disc_steps += 1

            _check_loss(loss, where)
            _step(model, opt, grad, where)
            loss_curve.append(loss)
            logger.debug("self_train_batch", where=where, loss=loss)

    evaluation = evaluate_target(model, bench)
    record = RoundRecord(
        round_index=round_idx,
        proportion=stats.proportion,
        class_proportion=batch.class_proportion.tolist(),
        p_miou=stats.p_miou,
        precision=stats.precision,
        diversity=diversity,
        generator_miou=generator_eval.miou,
        target_miou=evaluation.miou,
        target_iou=evaluation.iou.tolist(),
        loss_curve=loss_curve,
        theta_trajectory=batch.thresholds,
        source_images_in_phase_c=source_seen,
        discriminator_steps=disc_steps,
        generator_hash=g_hash,
    )
    logger.info(
        "round_complete",
        round=round_idx, proportion=round(stats.proportion, 4),
        p_miou=stats.p_miou_text(), generator_miou=round(generator_eval.miou, 4),
        target_miou=round(evaluation.miou, 4),
    )
    return model, record, state, batch


def run_experiment(
    cfg: ExperimentConfig,
    bench: UdaBenchmark | None = None,
    observer: RunObserver | None = None,
    warm_model: SegModel | None = None,
    warm_disc: Discriminator | None = None,
) -> ExperimentResult:
    """
    Warm-up, then ``cfg.rounds`` rounds of generation, self-training and M -> G copy.

    Args:
        bench: benchmark to use (default: generated from ``cfg``)
        observer: artifact sink
        warm_model: reuse an existing warm-up model (copied, never mutated)
        warm_disc: discriminator belonging to ``warm_model`` (copied, never mutated)

    Raises:
        TrainingAbortedError: with the records of completed rounds attached
    """
    bench = bench or build_benchmark(cfg)
    records: list[RoundRecord] = []
    try:
        if warm_model is not None:
            start = WarmStart(warm_model, warm_disc)
        else:
            start = train_warmup(cfg, bench)
        base = start.model
        disc = start.discriminator.copy() if start.discriminator is not None else None
        model = clone(base)
        warm_eval = evaluate_target(model, bench)
        logger.info("warmup_evaluated", target_miou=round(warm_eval.miou, 4))
        if observer is not None:
            observer.on_warmup(model, warm_eval)

        generator = clone(model)
        state: ThresholdState | None = None
        for r in range(1, cfg.rounds + 1):
            model, record, state, batch = run_round(model, generator, cfg, r, bench, state, disc)
            copy_weights(model, generator)
            if weights_hash(generator) != weights_hash(model):
                raise PhaseIsolationError(f"Round {r}: G differs from M after copy")
            records.append(record)
            if observer is not None:
                observer.on_round(record, model, batch)
    except TrainerError as e:
        if observer is not None:
            observer.on_abort(records, e)
        if isinstance(e, TrainingAbortedError):
            e.records = records
            raise
        raise TrainingAbortedError(str(e), records) from e

    return ExperimentResult(warmup=warm_eval, records=records, model=model, warmup_model=base)


ABLATION_CELLS: tuple[str, ...] = ("constant", "ias", "ias+rc", "ias+rc+ri")


def ablation_config(cfg: ExperimentConfig, cell: str) -> ExperimentConfig:
    """Config for one ablation cell: selector and regularisers switched on in turn."""
    if cell not in ABLATION_CELLS:
        raise TrainerError(f"Unknown ablation cell {cell!r}")
    mode = SelectionMode.CONSTANT if cell == "constant" else SelectionMode.INSTANCE_ADAPTIVE
    lambda_c = cfg.losses.lambda_c if "rc" in cell else 0.0
    lambda_i = cfg.losses.lambda_i if "ri" in cell else 0.0
    return cfg.model_copy(update={
        "selector": cfg.selector.model_copy(update={"mode": mode}),
        "losses": cfg.losses.model_copy(update={"lambda_c": lambda_c, "lambda_i": lambda_i}),
    })


def run_ablation(
    cfg: ExperimentConfig,
    bench: UdaBenchmark | None = None,
    observers: Callable[[str, ExperimentConfig], RunObserver | None] | None = None,
) -> dict[str, ExperimentResult]:
    """
    Run the four ablation cells from one shared warm-up model.

    Args:
        observers: factory giving the artifact sink for a cell (name, cell config)
    """
    bench = bench or build_benchmark(cfg)
    warm = train_warmup(cfg, bench)
    results = {}
    for cell in ABLATION_CELLS:
        cell_cfg = ablation_config(cfg, cell)
        observer = observers(cell, cell_cfg) if observers is not None else None
        results[cell] = run_experiment(
            cell_cfg, bench, observer=observer,
            warm_model=warm.model, warm_disc=warm.discriminator,
        )
        logger.info("ablation_cell", cell=cell, final_miou=round(results[cell].final_miou, 4))
    return results


@dataclass
class SslResult:
    baseline: Evaluation
    records: list[RoundRecord] = field(default_factory=list)
    labeled_count: int = 0
    unlabeled_count: int = 0

    @property
    def final_miou(self) -> float:
        return self.records[-1].target_miou if self.records else self.baseline.miou


def ssl_benchmark(cfg: ExperimentConfig) -> tuple[UdaBenchmark, int]:
    """
    Split one unshifted domain into labeled and unlabeled parts.

    Returns:
        (benchmark whose target is the unlabeled part, labeled count)
    """
    if cfg.ssl is None:
        raise TrainerError("ssl.labeled_fraction must be set for semi-supervised mode")
    data = cfg.data
    if data.n_val < 1:
        raise TrainerError("Semi-supervised mode evaluates on data.n_val images; set it to at least 1")
    pool = make_uda_benchmark(
        data.scene, DomainShift(), data.n_source, 1, cfg.seed, n_val=data.n_val
    )
    n = len(pool.source)
    k = min(n, max(1, round(cfg.ssl.labeled_fraction * n)))
    labeled = pool.source.subset(list(range(k)))
    rest = pool.source.subset(list(range(k, n)))
    assert rest.masks is not None and pool.source_val.masks is not None
    bench = UdaBenchmark(
        spec=data.scene,
        shift=DomainShift(),
        seed=cfg.seed,
        source=labeled,
        target=Dataset(rest.images, None, "target"),
        target_gt=HiddenGroundTruth(rest.masks),
        source_val=pool.source_val,
        target_val=pool.source_val.without_masks(),
        target_val_gt=HiddenGroundTruth(pool.source_val.masks),
    )
    return bench, k


def run_ssl(cfg: ExperimentConfig, observer: RunObserver | None = None) -> SslResult:
    """
    Semi-supervised self-training.

    The labeled subset trains the warm-up model (the supervised baseline) and
    stays in every self-training batch; the unlabeled subset is the target.
    """
    bench, k = ssl_benchmark(cfg)
    ssl_cfg = cfg.model_copy(update={
        "warmup": cfg.warmup.model_copy(update={"mode": WarmupMode.SOURCE_ONLY}),
        "retain_warmup_loss": True,
    })
    try:
        warm = warmup(ssl_cfg, bench)
    except TrainerError as e:
        if observer is not None:
            observer.on_abort([], e)
        raise
    baseline = evaluate_target(warm, bench)
    logger.info("ssl_baseline", labeled=k, unlabeled=len(bench.target), miou=round(baseline.miou, 4))
    if len(bench.target) == 0:
        if observer is not None:
            observer.on_warmup(warm, baseline)
        return SslResult(baseline=baseline, labeled_count=k)

    result = run_experiment(ssl_cfg, bench, observer=observer, warm_model=warm)
    return SslResult(
        baseline=baseline, records=result.records,
        labeled_count=k, unlabeled_count=len(bench.target),
    )
