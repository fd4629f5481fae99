"""Pseudo-labels for target images via translation to the source domain.

Each target image is translated target-to-source, the frozen source
segmenter predicts class probabilities, and pixels whose winning class
strictly exceeds a confidence threshold receive a one-hot pseudo-label;
every other pixel gets an all-zero column (abstain). The pseudo-mask is
paired with the original target image, so the target segmenter trains on
real target statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch

from .data import Dataset
from .errors import ConfigError, DataError
from .segmentation import Segmenter
from .seeding import derive_seed, torch_generator
from .translation import TranslationModel


@dataclass(frozen=True)
class PseudoMask:
    """Per-pixel one-hot-or-zero labels with confidence provenance."""

    mask: torch.Tensor
    threshold: float
    coverage: float

    def __post_init__(self) -> None:
        if not bool(((self.mask == 0.0) | (self.mask == 1.0)).all()):
            raise DataError("pseudo-mask values must be exactly 0.0 or 1.0")
        col = self.mask.sum(dim=0)
        if not bool(((col == 0.0) | (col == 1.0)).all()):
            raise DataError("pseudo-mask columns must sum to exactly 0 or 1")
        measured = float((col == 1.0).float().mean())
        if abs(measured - self.coverage) > 1e-6:
            raise DataError(
                f"pseudo-mask coverage {self.coverage} does not match measured {measured}"
            )


@dataclass(frozen=True)
class StylePolicy:
    """How the target-to-source translation picks its source style code.

    ``zeros`` uses the prior mean for determinism; ``random`` takes a single
    seeded draw; ``average`` averages the soft predictions over ``draws``
    seeded draws before thresholding.
    """

    kind: str = "zeros"
    draws: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("zeros", "random", "average"):
            raise ConfigError(f"unknown style policy {self.kind!r}")
        if self.kind == "average" and self.draws < 1:
            raise ConfigError("style policy 'average' needs draws >= 1")


def pseudo_label(p: torch.Tensor, threshold: float) -> PseudoMask:
    """Threshold a soft prediction into a one-hot-or-zero pseudo-mask.

    A pixel is labeled with class c iff c is the unique argmax of its class
    distribution and the probability strictly exceeds the threshold; exact
    argmax ties abstain.
    """
    if p.dim() != 3:
        raise DataError(f"pseudo_label expects [C,H,W], got {tuple(p.shape)}")
    num_classes = p.shape[0]
    if not (1.0 / num_classes < threshold < 1.0):
        raise ConfigError(
            f"threshold must lie in (1/{num_classes}, 1), got {threshold}"
        )
    top = p.max(dim=0, keepdim=True).values
    is_top = p == top
    tie = is_top.sum(dim=0, keepdim=True) > 1
    selected = is_top & ~tie & (p > threshold)
    mask = selected.to(torch.float32)
    coverage = float((mask.sum(dim=0) == 1.0).float().mean())
    return PseudoMask(mask=mask, threshold=float(threshold), coverage=coverage)


DEFAULT_THRESHOLD_GRID = (0.6, 0.7, 0.8, 0.9)


def generate_pseudolabels(
    targets: Dataset,
    tm: TranslationModel,
    seg_s: Segmenter,
    threshold: float,
    style_policy: StylePolicy = StylePolicy(),
) -> Dataset:
    """Pseudo-label every target sample; returns a new dataset pairing the
    original target images with their pseudo-masks."""
    if len(targets) == 0:
        raise DataError("generate_pseudolabels: empty target dataset")
    if targets.domain.channels != tm.target_spec.channels:
        raise DataError(
            f"target dataset has {targets.domain.channels} channels but the "
            f"translation model expects {tm.target_spec.channels}"
        )
    if seg_s.config.in_channels != tm.source_spec.channels:
        raise DataError(
            f"source segmenter expects {seg_s.config.in_channels} channels but "
            f"the translation model emits {tm.source_spec.channels}"
        )
    labeled = []
    with torch.no_grad():
        for idx, sample in enumerate(targets):
            probs = _soft_prediction_via_source(
                sample.image, tm, seg_s, style_policy, sample_index=idx
            )
            pm = pseudo_label(probs, threshold)
            labeled.append(
                replace(
                    sample,
                    mask=pm.mask,
                    pseudo=True,
                    threshold=pm.threshold,
                    coverage=pm.coverage,
                )
            )
    return Dataset(targets.domain, labeled)


def _soft_prediction_via_source(
    image: torch.Tensor,
    tm: TranslationModel,
    seg_s: Segmenter,
    policy: StylePolicy,
    sample_index: int,
) -> torch.Tensor:
    content = tm.encode_content(image, "target")
    if policy.kind == "zeros":
        styles = [torch.zeros(tm.config.style_dim)]
    else:
        gen = torch_generator(derive_seed(policy.seed, "pseudo-style", sample_index))
        n = 1 if policy.kind == "random" else policy.draws
        styles = [tm.sample_style_prior(gen) for _ in range(n)]
    preds = []
    for s in styles:
        translated = tm.decode(content, s, "source")
        preds.append(seg_s(translated))
    return torch.stack(preds).mean(dim=0)
