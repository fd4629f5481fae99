"""Oracle values and properties of the loss functions."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hetseg.errors import ConfigError
from hetseg.losses import (
    LossWeights,
    TranslationLossTerms,
    dice_seg_loss,
    entropy_loss,
    gan_loss_d,
    gan_loss_g,
    gan_objective,
    recon_l1,
    segmentation_total,
    semantic_cycle_loss,
    translation_total,
)


def soft_prediction(class1: torch.Tensor) -> torch.Tensor:
    """Stack a class-1 probability plane into a valid 2-class prediction."""
    return torch.stack([1.0 - class1, class1])


def one_hot(class1: torch.Tensor) -> torch.Tensor:
    return torch.stack([1.0 - class1, class1])


def random_soft(rng: np.random.Generator, h: int = 6, w: int = 6) -> torch.Tensor:
    p1 = torch.tensor(rng.uniform(0.0, 1.0, size=(h, w)), dtype=torch.float64)
    return soft_prediction(p1)


# ---------------------------------------------------------------------------
# adversarial losses
# ---------------------------------------------------------------------------


def test_gan_objective_at_half():
    half = torch.full((1, 4, 4), 0.5)
    value = float(gan_objective(half, half))
    assert value == pytest.approx(-2.0 * math.log(2.0), abs=1e-6)
    assert float(gan_loss_d(half, half)) == pytest.approx(2.0 * math.log(2.0), abs=1e-6)


def test_gan_objective_discriminator_optimum():
    eps = 1e-6
    real = torch.full((1, 4, 4), 1.0 - eps)
    fake = torch.full((1, 4, 4), eps)
    value = float(gan_objective(real, fake))
    assert -1e-5 < value < 0.0


def test_gan_loss_g_forms():
    fake = torch.full((2, 1, 2, 2), 0.25)
    saturating = float(gan_loss_g(fake, saturating=True))
    assert saturating == pytest.approx(math.log(0.75), abs=1e-6)
    non_saturating = float(gan_loss_g(fake, saturating=False))
    assert non_saturating == pytest.approx(-math.log(0.25), abs=1e-6)


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_gan_scores_outside_open_interval_rejected(bad):
    good = torch.full((1, 2, 2), 0.5)
    spoiled = good.clone()
    spoiled[0, 0, 0] = bad
    with pytest.raises(ValueError):
        gan_loss_d(spoiled, good)
    with pytest.raises(ValueError):
        gan_loss_d(good, spoiled)
    with pytest.raises(ValueError):
        gan_loss_g(spoiled)


# ---------------------------------------------------------------------------
# L1 reconstruction
# ---------------------------------------------------------------------------


def test_recon_l1_zero_on_equal():
    a = torch.randn(3, 5, 5)
    assert float(recon_l1(a, a.clone())) == 0.0


def test_recon_l1_constant_offset():
    a = torch.zeros(2, 4, 4)
    b = torch.full((2, 4, 4), 0.5)
    assert float(recon_l1(a, b)) == pytest.approx(0.5, abs=1e-7)


def test_recon_l1_matches_elementwise_recomputation():
    rng = np.random.default_rng(3)
    a = torch.tensor(rng.normal(size=(4, 6, 6)))
    b = torch.tensor(rng.normal(size=(4, 6, 6)))
    expected = float(np.mean(np.abs(a.numpy() - b.numpy())))
    assert float(recon_l1(a, b)) == pytest.approx(expected, abs=1e-6)


def test_recon_l1_shape_mismatch():
    with pytest.raises(ValueError):
        recon_l1(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


# ---------------------------------------------------------------------------
# dice losses
# ---------------------------------------------------------------------------


def test_dice_perfect_overlap():
    y1 = torch.zeros(4, 4)
    y1[1, 1] = 1.0
    y1[2, 3] = 1.0
    p = soft_prediction(y1)
    y = one_hot(y1)
    assert float(semantic_cycle_loss(p, y)) == pytest.approx(-1.0, abs=1e-4)


def test_dice_empty_prediction():
    y1 = torch.zeros(4, 4)
    y1[0, 0] = 1.0
    y1[3, 3] = 1.0
    p = soft_prediction(torch.zeros(4, 4))
    assert float(semantic_cycle_loss(p, one_hot(y1))) == pytest.approx(0.0, abs=1e-4)


def test_dice_two_by_two_partial_overlap():
    # truth marks two lesion pixels; prediction hits exactly one of them
    y1 = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    p1 = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    value = float(semantic_cycle_loss(soft_prediction(p1), one_hot(y1)))
    assert value == pytest.approx(-2.0 / 3.0, abs=1e-4)


def test_dice_functions_bitwise_equal():
    rng = np.random.default_rng(11)
    for _ in range(10):
        p = random_soft(rng).float()
        y1 = torch.tensor(rng.integers(0, 2, size=(6, 6)), dtype=torch.float32)
        y = one_hot(y1)
        a = semantic_cycle_loss(p, y)
        b = dice_seg_loss(p, y)
        assert float(a) == float(b)


def test_dice_pseudo_mask_zero_columns_stay_in_denominator():
    # one labeled lesion pixel, one abstained pixel with nonzero prediction
    p1 = torch.tensor([[0.8, 0.5]])
    y = torch.zeros(2, 1, 2)
    y[1, 0, 0] = 1.0  # lesion label at the first pixel; second column all-zero
    value = float(dice_seg_loss(soft_prediction(p1), y))
    expected = -(2 * 0.8 + 1e-6) / (0.8 + 0.5 + 1.0 + 1e-6)
    assert value == pytest.approx(expected, abs=1e-6)
    masked = float(dice_seg_loss(soft_prediction(p1), y, mask_abstained=True))
    expected_masked = -(2 * 0.8 + 1e-6) / (0.8 + 1.0 + 1e-6)
    assert masked == pytest.approx(expected_masked, abs=1e-6)


def test_dice_rejects_non_onehot_mask_for_semantic_loss():
    p = soft_prediction(torch.zeros(2, 2))
    y = torch.zeros(2, 2, 2)  # all-zero columns
    with pytest.raises(ValueError):
        semantic_cycle_loss(p, y)
    dice_seg_loss(p, y)  # pseudo-style masks are fine here


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_dice_range_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = random_soft(rng)
    y1 = torch.tensor(rng.integers(0, 2, size=(6, 6)), dtype=torch.float64)
    y = one_hot(y1)
    value = float(dice_seg_loss(p, y))
    assert -1.0 <= value <= 0.0
    perm = rng.permutation(36)
    p_perm = p.reshape(2, -1)[:, perm].reshape(2, 6, 6)
    y_perm = y.reshape(2, -1)[:, perm].reshape(2, 6, 6)
    assert float(dice_seg_loss(p_perm, y_perm)) == pytest.approx(value, abs=1e-12)


# ---------------------------------------------------------------------------
# entropy loss
# ---------------------------------------------------------------------------


def test_entropy_uniform_sum_equals_pixel_count():
    p = torch.full((2, 5, 7), 0.5)
    assert float(entropy_loss(p, reduction="sum")) == pytest.approx(35.0, abs=1e-6)
    assert float(entropy_loss(p, reduction="mean")) == pytest.approx(1.0, abs=1e-6)


def test_entropy_one_hot_is_zero():
    y1 = torch.zeros(4, 4)
    y1[0, 0] = 1.0
    p = soft_prediction(y1)
    assert float(entropy_loss(p, reduction="sum")) == pytest.approx(0.0, abs=1e-6)


def test_entropy_single_pixel_value():
    p = torch.tensor([[[0.75]], [[0.25]]])
    expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25)) / math.log(2.0)
    assert float(entropy_loss(p, reduction="sum")) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(0.8113, abs=1e-4)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_entropy_range_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = random_soft(rng)
    value = float(entropy_loss(p, reduction="mean"))
    assert 0.0 <= value <= 1.0 + 1e-9
    perm = rng.permutation(36)
    p_perm = p.reshape(2, -1)[:, perm].reshape(2, 6, 6)
    assert float(entropy_loss(p_perm, reduction="mean")) == pytest.approx(value, abs=1e-12)


def test_entropy_rejects_unknown_reduction():
    with pytest.raises(ValueError):
        entropy_loss(torch.full((2, 2, 2), 0.5), reduction="median")


# ---------------------------------------------------------------------------
# composite objectives
# ---------------------------------------------------------------------------


def test_translation_total_zero_weights():
    terms = TranslationLossTerms(**{k: 1.0 for k in TranslationLossTerms.TERM_NAMES})
    zero = LossWeights(gan=0, image=0, content=0, style=0, cycle=0, semantic=0)
    assert float(translation_total(terms, zero)) == 0.0


def test_translation_total_unit_terms_default_weights():
    terms = TranslationLossTerms(**{k: 1.0 for k in TranslationLossTerms.TERM_NAMES})
    w = LossWeights()
    # independent arithmetic oracle over the composite objective
    expected = (
        w.gan * (1 + 1) + w.image * (1 + 1) + w.content * (1 + 1)
        + w.style * (1 + 1) + w.cycle * (1 + 1) + w.semantic * 1
    )
    assert expected == 56.0
    assert float(translation_total(terms, w)) == pytest.approx(expected, abs=1e-9)


def test_translation_total_linear_in_each_weight():
    rng = np.random.default_rng(5)
    values = {k: float(rng.uniform(0.1, 2.0)) for k in TranslationLossTerms.TERM_NAMES}
    terms = TranslationLossTerms(**values)
    base = LossWeights()
    for name in ("gan", "image", "content", "style", "cycle", "semantic"):
        lo = LossWeights(**{**base.to_dict(), name: 1.0})
        hi = LossWeights(**{**base.to_dict(), name: 3.0})
        mid = LossWeights(**{**base.to_dict(), name: 2.0})
        v_lo = float(translation_total(terms, lo))
        v_hi = float(translation_total(terms, hi))
        v_mid = float(translation_total(terms, mid))
        assert v_mid == pytest.approx((v_lo + v_hi) / 2.0, rel=1e-12)


def test_translation_total_doubling_semantic_weight_doubles_sensitivity():
    terms = TranslationLossTerms(semantic=torch.tensor(0.3, requires_grad=True))
    w1 = LossWeights(semantic=10.0)
    w2 = LossWeights(semantic=20.0)
    g1 = torch.autograd.grad(translation_total(terms, w1), terms.semantic)[0]
    g2 = torch.autograd.grad(translation_total(terms, w2), terms.semantic)[0]
    assert float(g2) == pytest.approx(2.0 * float(g1), rel=1e-12)


def test_negative_weights_rejected():
    with pytest.raises(ConfigError) as exc:
        LossWeights(gan=-1.0)
    assert "loss_weights.gan" in str(exc.value)


def test_segmentation_total_arithmetic():
    assert segmentation_total(-1.0, 0.0) == pytest.approx(-1.0)
    assert segmentation_total(0.0, 1.0) == pytest.approx(1.0)
    assert segmentation_total(-0.5, 0.3) == pytest.approx(-0.2, abs=1e-9)
