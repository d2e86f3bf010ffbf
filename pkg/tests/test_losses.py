"""Tests for self-training and adversarial objectives."""

import math

import numpy as np
import pytest

from src.losses import (
    InconsistentRegionsError,
    LossConfig,
    LossError,
    RegionMasks,
    adversarial_losses,
    combined_objective,
    entropy_ignored,
    kld_confident,
    masked_ce,
)
from src.seg_model import Discriminator, ModelArchitecture, ModelConfig, SegModel
from src.synth_data import NUM_FEATURES
from src.tensor_store import VOID
from tests.conftest import assert_gradients_match, central_differences


def pixel(*p: float) -> np.ndarray:
    """[C, 1, 1] ProbMap for one pixel."""
    return np.array(p, dtype=np.float64).reshape(-1, 1, 1)


def labels_of(*values: int) -> np.ndarray:
    return np.array(values, dtype=np.int32).reshape(1, -1)


def constant_disc(num_classes: int, value: float) -> Discriminator:
    """Discriminator that scores every pixel ``value``."""
    disc = Discriminator(num_classes, hidden_dims=(), dtype=np.float64)
    (_, b), = disc.mlp.layers()
    b[...] = value
    return disc


class TestMaskedCE:
    """Cross-entropy over labeled pixels."""

    def test_uniform_two_class(self):
        """p=(0.5, 0.5) with label 0 costs ln 2."""
        assert masked_ce(pixel(0.5, 0.5), labels_of(0).reshape(1, 1)).value == pytest.approx(math.log(2))

    def test_perfect_prediction(self):
        """A confident correct prediction costs about 0."""
        assert masked_ce(pixel(1.0 - 1e-12, 1e-12), np.zeros((1, 1), dtype=np.int32)).value < 1e-9

    def test_void_pixels_excluded(self):
        """The mean runs over labeled pixels only."""
        prob = np.concatenate([pixel(0.8, 0.2), pixel(0.3, 0.7)], axis=2)
        both = masked_ce(prob, labels_of(0, VOID))
        single = masked_ce(pixel(0.8, 0.2), np.zeros((1, 1), dtype=np.int32))
        assert both.value == pytest.approx(single.value)
        assert not np.any(both.grad[:, 0, 1])

    def test_all_void(self):
        """All-VOID labels give zero loss and gradient."""
        term = masked_ce(pixel(0.6, 0.4), np.full((1, 1), VOID, dtype=np.int32))
        assert term.value == 0.0
        assert not np.any(term.grad)

    def test_shape_mismatch(self):
        """Labels must match the ProbMap's spatial shape."""
        with pytest.raises(LossError):
            masked_ce(pixel(0.5, 0.5), np.zeros((2, 2), dtype=np.int32))


class TestRegularisers:
    """Closed-form values of the KLD and entropy terms."""

    def test_kld_uniform_is_ln_c(self):
        """Uniform prediction gives ln C, the minimum."""
        masks = RegionMasks.from_labels(np.zeros((1, 1), dtype=np.int32))
        assert kld_confident(pixel(0.5, 0.5), masks).value == pytest.approx(math.log(2), abs=1e-6)
        assert kld_confident(pixel(1 / 3, 1 / 3, 1 / 3), masks).value == pytest.approx(math.log(3), abs=1e-6)

    def test_kld_skewed(self):
        """p=(0.9, 0.1) gives -(ln 0.9 + ln 0.1)/2 = 1.2040."""
        masks = RegionMasks.from_labels(np.zeros((1, 1), dtype=np.int32))
        assert kld_confident(pixel(0.9, 0.1), masks).value == pytest.approx(1.2040, abs=1e-4)

    def test_kld_empty_region(self):
        """No confident pixels gives 0."""
        masks = RegionMasks.from_labels(np.full((1, 1), VOID, dtype=np.int32))
        assert kld_confident(pixel(0.9, 0.1), masks).value == 0.0

    def test_entropy_one_hot(self):
        """A one-hot pixel has zero entropy."""
        masks = RegionMasks.from_labels(np.full((1, 1), VOID, dtype=np.int32))
        assert entropy_ignored(pixel(1.0, 0.0), masks).value == pytest.approx(0.0, abs=1e-9)

    def test_entropy_uniform_is_ln_c(self):
        """Uniform prediction has the maximum entropy ln C."""
        masks = RegionMasks.from_labels(np.full((1, 1), VOID, dtype=np.int32))
        assert entropy_ignored(pixel(0.5, 0.5), masks).value == pytest.approx(math.log(2), abs=1e-6)

    def test_entropy_three_class(self):
        """p=(0.7, 0.2, 0.1) has entropy 0.8018."""
        masks = RegionMasks.from_labels(np.full((1, 1), VOID, dtype=np.int32))
        assert entropy_ignored(pixel(0.7, 0.2, 0.1), masks).value == pytest.approx(0.8018, abs=1e-4)


class TestRegionMasks:
    """Partition checks."""

    def test_overlap_rejected(self):
        """A pixel cannot be both confident and ignored."""
        with pytest.raises(InconsistentRegionsError):
            RegionMasks(confident=np.array([[True]]), ignored=np.array([[True]]))

    def test_gap_rejected(self):
        """Every pixel must belong to one region."""
        with pytest.raises(InconsistentRegionsError):
            RegionMasks(confident=np.array([[False]]), ignored=np.array([[False]]))


class TestCombinedObjective:
    """CE + lambda_i * R_i + lambda_c * R_c."""

    def test_reduces_to_ce(self, make_probs):
        """With both weights 0 the objective is masked CE."""
        prob = make_probs(3, 4, 4)
        labels = np.where(prob.max(axis=0) > 0.6, prob.argmax(axis=0), VOID).astype(np.int32)
        out = combined_objective(prob, labels, RegionMasks.from_labels(labels), LossConfig(lambda_i=0, lambda_c=0))
        ce = masked_ce(prob, labels)
        assert out.value == ce.value
        assert np.array_equal(out.grad, ce.grad)

    def test_all_void_reduces_to_entropy(self, make_probs):
        """All-VOID labels with lambda_i=1, lambda_c=0 give the entropy term."""
        prob = make_probs(3, 4, 4)
        labels = np.full((4, 4), VOID, dtype=np.int32)
        masks = RegionMasks.from_labels(labels)
        out = combined_objective(prob, labels, masks, LossConfig(lambda_i=1.0, lambda_c=0.0))
        assert out.value == pytest.approx(entropy_ignored(prob, masks).value)

    def test_hand_sum(self, make_probs):
        """2x2, C=2, one labeled pixel: value is the weighted sum of the three terms."""
        prob = make_probs(2, 2, 2)
        labels = np.array([[1, VOID], [VOID, VOID]], dtype=np.int32)
        masks = RegionMasks.from_labels(labels)
        out = combined_objective(prob, labels, masks, LossConfig(lambda_i=3.0, lambda_c=0.1))
        expected = (
            masked_ce(prob, labels).value
            + 3.0 * entropy_ignored(prob, masks).value
            + 0.1 * kld_confident(prob, masks).value
        )
        assert out.value == pytest.approx(expected, abs=1e-12)

    def test_inconsistent_regions(self, make_probs):
        """Regions must agree with the non-VOID labels."""
        prob = make_probs(2, 1, 2)
        labels = np.array([[0, VOID]], dtype=np.int32)
        masks = RegionMasks.from_labels(np.array([[VOID, 0]], dtype=np.int32))
        with pytest.raises(InconsistentRegionsError):
            combined_objective(prob, labels, masks, LossConfig())


class TestAdversarial:
    """Least-squares output-space adversarial terms."""

    def test_disc_fooled_gives_zero(self, make_probs):
        """D = 1 on target makes the adversarial term vanish."""
        src, tgt = make_probs(3, 4, 4), make_probs(3, 4, 4)
        labels = src.argmax(axis=0).astype(np.int32)
        out = adversarial_losses(src, labels, tgt, constant_disc(3, 1.0), 0.01, "segmentation")
        assert out.adversarial == pytest.approx(0.0)
        assert out.seg_value == pytest.approx(out.source_ce)

    def test_zero_weight_is_source_ce(self, make_probs):
        """lambda_adv=0 leaves source CE alone."""
        src, tgt = make_probs(3, 4, 4), make_probs(3, 4, 4)
        labels = src.argmax(axis=0).astype(np.int32)
        out = adversarial_losses(src, labels, tgt, constant_disc(3, 0.3), 0.0, "segmentation")
        assert out.seg_value == pytest.approx(masked_ce(src, labels).value)
        assert not np.any(out.target_grad)

    def test_constant_output(self, make_probs):
        """Constant D output d gives lambda_adv * (d - 1)^2."""
        src, tgt = make_probs(3, 4, 4), make_probs(3, 4, 4)
        labels = src.argmax(axis=0).astype(np.int32)
        out = adversarial_losses(src, labels, tgt, constant_disc(3, 0.25), 0.5, "segmentation")
        assert out.seg_value - out.source_ce == pytest.approx(0.5 * 0.75**2)
        assert out.disc_value == pytest.approx(0.75**2 + 0.25**2)

    def test_unknown_side(self, make_probs):
        """Only the two network sides exist."""
        p = make_probs(3, 2, 2)
        with pytest.raises(LossError):
            adversarial_losses(p, p.argmax(axis=0).astype(np.int32), p, constant_disc(3, 0.0), 0.1, "both")


def default_arch(num_classes: int = 3) -> ModelArchitecture:
    """Desk-default segmentation architecture (``ModelConfig()`` dims)."""
    cfg = ModelConfig()
    return ModelArchitecture(
        num_features=NUM_FEATURES, num_classes=num_classes,
        hidden_dims=cfg.hidden_dims, local_pool=cfg.local_pool,
    )


# default dims check every parameter; the wide net samples 1000 of its 1347
GRADIENT_ARCHS = {
    "default": (default_arch(), None),
    "wide": (ModelArchitecture(num_features=NUM_FEATURES, num_classes=3, hidden_dims=(96,)), 1000),
}


class TestGradientChecks:
    """Analytic parameter gradients against central differences (h=1e-3, 8x8, C=3)."""

    @pytest.fixture(params=sorted(GRADIENT_ARCHS))
    def setup(self, request, rng):
        arch, sample = GRADIENT_ARCHS[request.param]
        model = SegModel(arch, dtype=np.float64)
        model.mlp.init_params(seed=7)
        image = rng.normal(size=(NUM_FEATURES, 8, 8))
        prob = model.forward(image)
        labels = prob.argmax(axis=0).astype(np.int32)
        labels[prob.max(axis=0) < np.median(prob.max(axis=0))] = VOID
        if sample is None:
            indices = np.arange(model.params.size)
        else:
            indices = rng.choice(model.params.size, size=sample, replace=False)
        return model, image, labels, indices

    def check(self, model: SegModel, image: np.ndarray, indices: np.ndarray, term) -> None:
        out = term(model.forward(image))
        analytic = model.backward(image, out.grad)
        numeric = central_differences(lambda: term(model.forward(image)).value, model.params, indices)
        assert_gradients_match(analytic[indices], numeric)

    def test_default_architecture_size(self):
        """ModelConfig() dims give a two-layer net over 10 pooled features."""
        arch = default_arch()
        assert arch.layer_dims == (10, 32, 3)
        assert SegModel(arch).mlp.num_params == 451
        wide, sample = GRADIENT_ARCHS["wide"]
        assert SegModel(wide).mlp.num_params >= sample

    def test_masked_ce(self, setup):
        """Cross-entropy gradient."""
        model, image, labels, indices = setup
        self.check(model, image, indices, lambda p: masked_ce(p, labels))

    def test_kld_confident(self, setup):
        """Confident-region KLD gradient."""
        model, image, labels, indices = setup
        masks = RegionMasks.from_labels(labels)
        self.check(model, image, indices, lambda p: kld_confident(p, masks))

    def test_entropy_ignored(self, setup):
        """Ignored-region entropy gradient."""
        model, image, labels, indices = setup
        masks = RegionMasks.from_labels(labels)
        self.check(model, image, indices, lambda p: entropy_ignored(p, masks))

    def test_combined(self, setup):
        """Full self-training objective gradient."""
        model, image, labels, indices = setup
        masks = RegionMasks.from_labels(labels)
        cfg = LossConfig(lambda_i=3.0, lambda_c=0.1)
        self.check(model, image, indices, lambda p: combined_objective(p, labels, masks, cfg))

    def test_adversarial_segmentation_side(self, setup, rng):
        """Gradient of lambda_adv * mean((D(p_t) - 1)^2) through M."""
        model, _, _, indices = setup
        disc = Discriminator.create(3, (16,), seed=6, dtype=np.float64)
        src = rng.normal(size=(NUM_FEATURES, 8, 8))
        tgt = rng.normal(size=(NUM_FEATURES, 8, 8))
        src_prob = model.forward(src)
        src_labels = src_prob.argmax(axis=0).astype(np.int32)

        def adversarial(p):
            return adversarial_losses(src_prob, src_labels, p, disc, 0.7, "segmentation")

        out = adversarial(model.forward(tgt))
        analytic = model.backward(tgt, out.target_grad)
        numeric = central_differences(
            lambda: 0.7 * adversarial(model.forward(tgt)).adversarial, model.params, indices
        )
        assert_gradients_match(analytic[indices], numeric)

    def test_adversarial_discriminator_side(self, make_probs):
        """Gradient of the discriminator's real/fake least-squares loss."""
        disc = Discriminator.create(3, (16,), seed=6, dtype=np.float64)
        src, tgt = make_probs(3, 8, 8), make_probs(3, 8, 8)
        labels = src.argmax(axis=0).astype(np.int32)
        out = adversarial_losses(src, labels, tgt, disc, 0.1, "discriminator")
        indices = np.arange(disc.params.size)
        numeric = central_differences(
            lambda: adversarial_losses(src, labels, tgt, disc, 0.1, "discriminator").disc_value,
            disc.params, indices,
        )
        assert_gradients_match(out.disc_grad, numeric)
