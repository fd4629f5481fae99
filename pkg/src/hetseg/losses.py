"""Loss functions for translation and segmentation training.

All functions are pure and differentiable. They accept a single image
([C, H, W]) or a batch ([B, C, H, W]); batched inputs reduce to the mean of
the per-image values so that values stay comparable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError

DICE_SMOOTH = 1e-6
SIMPLEX_ATOL = 1e-5


@dataclass(frozen=True)
class LossWeights:
    """Weights of the composite translation objective.

    Defaults: adversarial 1, image reconstruction 10, content code 1,
    style code 1, cycle 10, semantic cycle-consistency 10.
    """

    gan: float = 1.0
    image: float = 10.0
    content: float = 1.0
    style: float = 1.0
    cycle: float = 10.0
    semantic: float = 10.0

    def __post_init__(self) -> None:
        errors = []
        for name in ("gan", "image", "content", "style", "cycle", "semantic"):
            v = getattr(self, name)
            if not (v >= 0.0) or v != v or v in (float("inf"),):
                errors.append(f"loss_weights.{name}: must be a finite nonnegative real, got {v}")
        if errors:
            raise ConfigError(errors)

    def to_dict(self) -> dict:
        return {
            "gan": self.gan,
            "image": self.image,
            "content": self.content,
            "style": self.style,
            "cycle": self.cycle,
            "semantic": self.semantic,
        }

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(**{k: float(v) for k, v in d.items()})


def _check_scores(scores: torch.Tensor, name: str) -> None:
    if scores.numel() == 0:
        raise ValueError(f"{name}: empty score tensor")
    if bool((scores <= 0).any()) or bool((scores >= 1).any()):
        raise ValueError(f"{name}: scores must lie strictly in (0, 1)")


def gan_objective(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Log-form adversarial objective the discriminator pushes up:
    E[log D(real)] + E[log(1 - D(fake))]."""
    _check_scores(real_scores, "real_scores")
    _check_scores(fake_scores, "fake_scores")
    return torch.log(real_scores).mean() + torch.log(1.0 - fake_scores).mean()


def gan_loss_d(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator loss: the adversarial objective negated for minimization."""
    return -gan_objective(real_scores, fake_scores)


def gan_loss_g(fake_scores: torch.Tensor, saturating: bool = True) -> torch.Tensor:
    """Generator adversarial loss.

    The default minimizes E[log(1 - D(fake))], the literal min-max form; the
    non-saturating alternative minimizes -E[log D(fake)] instead.
    """
    _check_scores(fake_scores, "fake_scores")
    if saturating:
        return torch.log(1.0 - fake_scores).mean()
    return -torch.log(fake_scores).mean()


def recon_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference; serves image, content-code and style-code
    reconstruction as well as cycle-consistency."""
    if a.shape != b.shape:
        raise ValueError(f"recon_l1: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def validate_soft_prediction(p: torch.Tensor, name: str = "P") -> None:
    """Per-pixel class columns must form a probability simplex."""
    if p.dim() not in (3, 4):
        raise ValueError(f"{name}: expected [C,H,W] or [B,C,H,W], got {tuple(p.shape)}")
    if bool((p < -SIMPLEX_ATOL).any()) or bool((p > 1 + SIMPLEX_ATOL).any()):
        raise ValueError(f"{name}: probabilities outside [0, 1]")
    channel_dim = 0 if p.dim() == 3 else 1
    col = p.sum(dim=channel_dim)
    if bool(((col - 1.0).abs() > SIMPLEX_ATOL).any()):
        raise ValueError(f"{name}: per-pixel class probabilities must sum to 1")


def _check_mask(y: torch.Tensor, name: str, allow_zero_columns: bool) -> None:
    channel_dim = 0 if y.dim() == 3 else 1
    col = y.sum(dim=channel_dim)
    if allow_zero_columns:
        ok = bool(((col == 0.0) | (col == 1.0)).all())
    else:
        ok = bool((col == 1.0).all())
    if not ok:
        raise ValueError(f"{name}: mask columns must be one-hot"
                         + (" or all-zero" if allow_zero_columns else ""))


def soft_dice_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    validate: bool = True,
    allow_zero_columns: bool = True,
    mask_abstained: bool = False,
) -> torch.Tensor:
    """Negative soft dice of class 1: -(2 sum(P1*Y1) + eps) / (sum(P1+Y1) + eps).

    Values lie in [-1, 0]; -1 is perfect overlap; the smoothed all-empty case
    evaluates to -1 as well. Pseudo-mask pixels whose label column is all-zero
    stay in the denominator by default (the literal loss); ``mask_abstained``
    drops them from both sums instead.
    """
    if p.shape != y.shape:
        raise ValueError(f"soft_dice_loss: shape mismatch {tuple(p.shape)} vs {tuple(y.shape)}")
    if validate:
        validate_soft_prediction(p)
        _check_mask(y, "Y", allow_zero_columns)
    single = p.dim() == 3
    if single:
        p = p.unsqueeze(0)
        y = y.unsqueeze(0)
    p1 = p[:, 1]
    y1 = y[:, 1]
    if mask_abstained:
        labeled = (y.sum(dim=1) > 0).to(p1.dtype)
        p1 = p1 * labeled
        y1 = y1 * labeled
    inter = (p1 * y1).sum(dim=(1, 2))
    denom = (p1 + y1).sum(dim=(1, 2))
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return -dice.mean()


def semantic_cycle_loss(p: torch.Tensor, y: torch.Tensor, validate: bool = True) -> torch.Tensor:
    """Soft dice penalty on the frozen source segmenter's prediction over a
    cycle-reconstructed source image; trains the translator to preserve lesions."""
    return soft_dice_loss(p, y, validate=validate, allow_zero_columns=False)


def dice_seg_loss(
    p: torch.Tensor,
    y: torch.Tensor,
    validate: bool = True,
    mask_abstained: bool = False,
) -> torch.Tensor:
    """Segmentation loss; identical function to semantic_cycle_loss but also
    accepts pseudo-masks whose abstained pixels have all-zero columns."""
    return soft_dice_loss(
        p, y, validate=validate, allow_zero_columns=True, mask_abstained=mask_abstained
    )


def entropy_loss(p: torch.Tensor, reduction: str = "mean", validate: bool = True) -> torch.Tensor:
    """Normalized prediction entropy, sum_c -P log P / log C per pixel.

    ``mean``: mean over pixels (range [0, 1]); ``sum``: per-image pixel sum
    (range [0, H*W]), averaged over the batch when batched. 0 log 0 = 0.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"entropy_loss: unknown reduction {reduction!r}")
    if validate:
        validate_soft_prediction(p)
    single = p.dim() == 3
    if single:
        p = p.unsqueeze(0)
    num_classes = p.shape[1]
    if num_classes < 2:
        raise ValueError("entropy_loss: need at least 2 classes")
    p = p.clamp(min=0.0)
    plogp = torch.where(p > 0, p * torch.log(p.clamp(min=1e-30)), torch.zeros_like(p))
    pixel_entropy = -plogp.sum(dim=1) / torch.log(
        torch.tensor(float(num_classes), dtype=p.dtype, device=p.device)
    )
    if reduction == "mean":
        return pixel_entropy.mean()
    return pixel_entropy.sum(dim=(1, 2)).mean()


@dataclass
class TranslationLossTerms:
    """The eleven terms of the composite translation objective."""

    gan_source: torch.Tensor | float = 0.0
    gan_target: torch.Tensor | float = 0.0
    recon_image_source: torch.Tensor | float = 0.0
    recon_image_target: torch.Tensor | float = 0.0
    recon_content_source: torch.Tensor | float = 0.0
    recon_content_target: torch.Tensor | float = 0.0
    recon_style_source: torch.Tensor | float = 0.0
    recon_style_target: torch.Tensor | float = 0.0
    cycle_source: torch.Tensor | float = 0.0
    cycle_target: torch.Tensor | float = 0.0
    semantic: torch.Tensor | float = 0.0

    TERM_NAMES = (
        "gan_source",
        "gan_target",
        "recon_image_source",
        "recon_image_target",
        "recon_content_source",
        "recon_content_target",
        "recon_style_source",
        "recon_style_target",
        "cycle_source",
        "cycle_target",
        "semantic",
    )

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.TERM_NAMES}


def translation_total(terms: TranslationLossTerms, w: LossWeights):
    """Weighted composite objective of the translation stage.

    Adversarial terms enter the generator and discriminator steps with
    opposite sign; this is the scalar being min-maxed.
    """
    return (
        w.gan * (terms.gan_source + terms.gan_target)
        + w.image * (terms.recon_image_source + terms.recon_image_target)
        + w.content * (terms.recon_content_source + terms.recon_content_target)
        + w.style * (terms.recon_style_source + terms.recon_style_target)
        + w.cycle * (terms.cycle_source + terms.cycle_target)
        + w.semantic * terms.semantic
    )


def segmentation_total(l_seg, l_ent):
    """Unweighted sum of segmentation and entropy losses."""
    return l_seg + l_ent
