"""Training stages and the baseline experiment matrix.

Three stages: source segmenter, translation network, target segmenter. The
experiment harness runs patient-level cross-validation over the target
cohort: each fold's patients form the held-out labeled evaluation set while
the remaining patients supply the unlabeled (or partially revealed) training
images. Heavy stages are memoized by content key so ablation baselines that
share a stage do not retrain it.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import Dataset, SyntheticTaskConfig, generate_task_with_target_labels, make_folds
from .errors import ConfigError, DataError, MissingStageError, TrainingDivergence
from .losses import (
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
)
from .metrics import MetricsRecord, MetricsReport, aggregate, emit_report, evaluate_segmenter
from .pseudolabel import StylePolicy, generate_pseudolabels
from .segmentation import Segmenter, SegmenterConfig, build_segmenter
from .seeding import derive_seed, torch_generator
from .translation import NetConfig, TranslationModel, build_translation_model

logger = logging.getLogger(__name__)

BASELINE_IDS = ("i", "ii", "iii", "iv", "v", "vi", "vii", "viii")

BASELINE_LABELS = {
    "i": "target-only (oracle)",
    "ii": "target + synth",
    "iii": "source + entmin (no translation)",
    "iv": "synth (no semantic loss)",
    "v": "synth + semantic loss",
    "vi": "synth + semantic loss + entmin",
    "vii": "synth + semantic loss + pslab",
    "viii": "synth + semantic loss + entmin + pslab",
}


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule of one training stage."""

    stage: str
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    batch_size: int = 32
    iterations: int = 50_000
    loss_weights: LossWeights = field(default_factory=LossWeights)
    pseudo_threshold: float = 0.8
    seed: int = 0
    val_fraction: float = 0.2
    val_every: int = 50
    momentum: float = 0.9
    saturating_gan: bool = True
    pslab_mask_abstained: bool = False
    entropy_reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.stage not in ("segmentation", "translation"):
            raise ConfigError(f"train config: unknown stage {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train config: unknown optimizer {self.optimizer!r}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("train config: iterations must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("train config: val_fraction must lie in [0, 1)")

    @staticmethod
    def translation_default() -> "TrainConfig":
        return TrainConfig(stage="translation", optimizer="adam", learning_rate=1e-4,
                           batch_size=32, iterations=50_000)

    @staticmethod
    def segmentation_default() -> "TrainConfig":
        return TrainConfig(stage="segmentation", optimizer="sgd", learning_rate=0.05,
                           batch_size=32, iterations=10_000)

    def to_dict(self) -> dict:
        d = {
            "stage": self.stage,
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "loss_weights": self.loss_weights.to_dict(),
            "pseudo_threshold": self.pseudo_threshold,
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "val_every": self.val_every,
            "momentum": self.momentum,
            "saturating_gan": self.saturating_gan,
            "pslab_mask_abstained": self.pslab_mask_abstained,
            "entropy_reduction": self.entropy_reduction,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights.from_dict(d["loss_weights"])
        return TrainConfig(**d)


@dataclass(frozen=True)
class TargetTrainOptions:
    use_synth: bool = True
    use_entmin: bool = False
    use_pslab: bool = False


@dataclass
class TrainLog:
    rows: list[tuple[int, str, float]] = field(default_factory=list)

    def add(self, iteration: int, term: str, value) -> None:
        if isinstance(value, torch.Tensor):
            value = value.detach()
        self.rows.append((iteration, term, float(value)))

    def terms(self) -> set[str]:
        return {t for _, t, _ in self.rows}

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "term", "value"])
            for it, term, value in self.rows:
                writer.writerow([it, term, repr(value)])
        return path


@dataclass
class SegTrainResult:
    segmenter: Segmenter
    log: TrainLog
    best_val_dice: float
    adapter: nn.Module | None = None


@dataclass
class TranslationTrainResult:
    model: TranslationModel
    log: TrainLog


def model_checksum(module: nn.Module | TranslationModel) -> str:
    """Digest over all parameter bytes; equal checksums mean identical weights."""
    h = hashlib.sha256()
    if isinstance(module, TranslationModel):
        items = sorted(module.named_tensors().items())
    else:
        items = sorted(module.state_dict().items())
    for name, t in items:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def _freeze(module: nn.Module | TranslationModel) -> None:
    if isinstance(module, TranslationModel):
        module.freeze()
    else:
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)


def _check_finite(value: torch.Tensor | float, term: str, iteration: int) -> None:
    if isinstance(value, torch.Tensor):
        value = value.detach()
    v = float(value)
    if not np.isfinite(v):
        raise TrainingDivergence(
            f"non-finite loss term {term!r} ({v}) at iteration {iteration}"
        )


def _split_patients(dataset: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Patient-level train/validation split."""
    patients = sorted(dataset.patient_ids())
    if val_fraction <= 0 or len(patients) < 2:
        return dataset, Dataset(dataset.domain, [])
    rng = np.random.default_rng(derive_seed(seed, "val-split"))
    rng.shuffle(patients)
    n_val = max(1, round(val_fraction * len(patients)))
    n_val = min(n_val, len(patients) - 1)
    val = set(patients[:n_val])
    return (
        dataset.subset_by_patients([p for p in patients if p not in val]),
        dataset.subset_by_patients(sorted(val)),
    )


class _BatchSampler:
    """Uniform with-replacement batches of stacked images (and masks)."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)

    def __bool__(self) -> bool:
        return len(self.dataset) > 0

    def images(self) -> torch.Tensor:
        idx = self.rng.integers(0, len(self.dataset), size=self.batch_size)
        return torch.stack([self.dataset[int(i)].image for i in idx])

    def images_and_masks(self) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self.rng.integers(0, len(self.dataset), size=self.batch_size)
        images = torch.stack([self.dataset[int(i)].image for i in idx])
        masks = torch.stack([self.dataset[int(i)].mask for i in idx])
        return images, masks


def _soft_dice_score(seg: Segmenter, dataset: Dataset, adapter: nn.Module | None = None) -> float:
    """Mean soft dice (higher is better) over a labeled dataset."""
    vals = []
    with torch.no_grad():
        for sample in dataset:
            x = sample.image.unsqueeze(0)
            if adapter is not None:
                x = adapter(x)
            probs = seg(x)
            vals.append(-float(dice_seg_loss(probs, sample.mask.unsqueeze(0), validate=False)))
    return float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# Stage 1: source segmenter
# ---------------------------------------------------------------------------


def train_source_segmenter(
    source_labeled: Dataset,
    cfg: TrainConfig,
    seg_config: SegmenterConfig | None = None,
) -> SegTrainResult:
    """Train the source-domain segmenter on labeled source slices,
    checkpointing the best-validation model."""
    if len(source_labeled) == 0:
        raise DataError("train_source_segmenter: empty dataset")
    for s in source_labeled:
        if s.mask is None:
            raise DataError(f"train_source_segmenter: sample {s.sample_id} is unlabeled")
    seg_config = seg_config or SegmenterConfig(
        in_channels=source_labeled.domain.channels,
        num_classes=source_labeled.domain.num_classes,
    )
    seg = build_segmenter(seg_config, seed=cfg.seed)
    train_set, val_set = _split_patients(source_labeled, cfg.val_fraction, cfg.seed)
    log = TrainLog()
    opt = _make_optimizer(seg.parameters(), cfg)
    sampler = _BatchSampler(train_set, cfg.batch_size, derive_seed(cfg.seed, "src-batches"))
    best_state, best_val = None, -np.inf

    def validate(iteration: int) -> None:
        nonlocal best_state, best_val
        if len(val_set) == 0:
            return
        val_dice = _soft_dice_score(seg, val_set)
        log.add(iteration, "val_dice", val_dice)
        if val_dice > best_val:
            best_val = val_dice
            best_state = copy.deepcopy(seg.state_dict())

    for it in range(cfg.iterations):
        images, masks = sampler.images_and_masks()
        loss = dice_seg_loss(seg(images), masks, validate=False)
        _check_finite(loss, "seg_dice", it)
        log.add(it, "seg_dice", loss)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % cfg.val_every == 0:
            validate(it)
    validate(cfg.iterations)
    if best_state is not None:
        seg.load_state_dict(best_state)
    final_val = best_val if best_val > -np.inf else _soft_dice_score(seg, val_set)
    return SegTrainResult(segmenter=seg, log=log, best_val_dice=float(final_val))


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(0.5, 0.999))
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum)


# ---------------------------------------------------------------------------
# Stage 2: translation network
# ---------------------------------------------------------------------------


def train_translation(
    source_labeled: Dataset,
    target_unlabeled: Dataset,
    seg_s: Segmenter,
    cfg: TrainConfig,
    net_config: NetConfig | None = None,
) -> TranslationTrainResult:
    """Alternating generator/discriminator training of the translation
    networks; the source segmenter stays frozen and only scores the
    cycle-reconstructed images for the semantic consistency term."""
    if len(source_labeled) == 0 or len(target_unlabeled) == 0:
        raise DataError("train_translation: both domains need samples")
    for s in source_labeled:
        if s.mask is None:
            raise DataError(f"train_translation: source sample {s.sample_id} is unlabeled")
    w = cfg.loss_weights
    net_config = net_config or NetConfig()
    model = build_translation_model(
        source_labeled.domain, target_unlabeled.domain, net_config, seed=cfg.seed
    )
    _freeze(seg_s)
    opt_g = _make_optimizer(model.generator_parameters(), cfg)
    opt_d = _make_optimizer(model.discriminator_parameters(), cfg)
    src_batches = _BatchSampler(source_labeled, cfg.batch_size, derive_seed(cfg.seed, "tr-src"))
    tgt_batches = _BatchSampler(target_unlabeled, cfg.batch_size, derive_seed(cfg.seed, "tr-tgt"))
    style_gen = torch_generator(derive_seed(cfg.seed, "tr-style"))
    log = TrainLog()

    for it in range(cfg.iterations):
        x_s, y_s = src_batches.images_and_masks()
        x_t = tgt_batches.images()
        b = x_s.shape[0]
        s_t_prior = model.sample_style_prior(style_gen, batch_size=b)
        s_s_prior = model.sample_style_prior(style_gen, batch_size=b)

        # generator step
        c_s = model.encode_content(x_s, "source")
        c_t = model.encode_content(x_t, "target")
        s_s_own = model.encode_style(x_s, "source")
        s_t_own = model.encode_style(x_t, "target")
        x_s_rec = model.decode(c_s, s_s_own, "source")
        x_t_rec = model.decode(c_t, s_t_own, "target")
        x_st = model.decode(c_s, s_t_prior, "target")
        x_ts = model.decode(c_t, s_s_prior, "source")
        c_s_rec = model.encode_content(x_st, "target")
        s_t_rec = model.encode_style(x_st, "target")
        c_t_rec = model.encode_content(x_ts, "source")
        s_s_rec = model.encode_style(x_ts, "source")
        x_sts = model.decode(c_s_rec, s_s_own, "source")
        x_tst = model.decode(c_t_rec, s_t_own, "target")

        terms = TranslationLossTerms(
            recon_image_source=recon_l1(x_s_rec, x_s),
            recon_image_target=recon_l1(x_t_rec, x_t),
            recon_content_source=recon_l1(c_s_rec, c_s),
            recon_content_target=recon_l1(c_t_rec, c_t),
            recon_style_source=recon_l1(s_s_rec, s_s_prior),
            recon_style_target=recon_l1(s_t_rec, s_t_prior),
            cycle_source=recon_l1(x_sts, x_s),
            cycle_target=recon_l1(x_tst, x_t),
        )
        if w.semantic > 0:
            terms.semantic = semantic_cycle_loss(seg_s(x_sts), y_s, validate=False)
        else:
            with torch.no_grad():
                terms.semantic = semantic_cycle_loss(seg_s(x_sts), y_s, validate=False)

        gen_adv = gan_loss_g(
            model.discriminate(x_st, "target"), saturating=cfg.saturating_gan
        ) + gan_loss_g(model.discriminate(x_ts, "source"), saturating=cfg.saturating_gan)
        g_total = (
            w.gan * gen_adv
            + w.image * (terms.recon_image_source + terms.recon_image_target)
            + w.content * (terms.recon_content_source + terms.recon_content_target)
            + w.style * (terms.recon_style_source + terms.recon_style_target)
            + w.cycle * (terms.cycle_source + terms.cycle_target)
            + w.semantic * terms.semantic
        )
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()

        # discriminator step on detached fakes
        d_real_s = model.discriminate(x_s, "source")
        d_fake_s = model.discriminate(x_ts.detach(), "source")
        d_real_t = model.discriminate(x_t, "target")
        d_fake_t = model.discriminate(x_st.detach(), "target")
        loss_d = w.gan * (gan_loss_d(d_real_s, d_fake_s) + gan_loss_d(d_real_t, d_fake_t))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        with torch.no_grad():
            terms.gan_source = gan_objective(d_real_s, d_fake_s)
            terms.gan_target = gan_objective(d_real_t, d_fake_t)
        for name, value in terms.as_dict().items():
            _check_finite(value, name, it)
            log.add(it, name, value)
        _check_finite(g_total, "generator_total", it)
        _check_finite(loss_d, "discriminator_total", it)
        log.add(it, "generator_total", g_total)
        log.add(it, "discriminator_total", loss_d)
        model.iteration = it + 1

    return TranslationTrainResult(model=model, log=log)


# ---------------------------------------------------------------------------
# Stage 3: target segmenter
# ---------------------------------------------------------------------------


def train_target_segmenter(
    source_labeled: Dataset,
    target_unlabeled: Dataset,
    tm: TranslationModel | None,
    seg_s: Segmenter | None,
    cfg: TrainConfig,
    options: TargetTrainOptions = TargetTrainOptions(),
    pseudo_labeled: Dataset | None = None,
    labeled_target: Dataset | None = None,
    seg_config: SegmenterConfig | None = None,
) -> SegTrainResult:
    """Train the target-domain segmenter.

    Batches per iteration: (a) source images translated to the target style
    with a fresh style draw, supervised by the source masks; (b) real target
    images with pseudo-masks when enabled; (c) unlabeled target images under
    entropy regularization when enabled; (d) real labeled target images in
    the semi-supervised setting.
    """
    if options.use_pslab and pseudo_labeled is None:
        raise MissingStageError(
            "pseudo-labels not generated; run the pseudo-label stage before "
            "training with use_pslab"
        )
    if options.use_synth and tm is None:
        raise MissingStageError(
            "translation checkpoint missing; train the translation stage first"
        )
    if not options.use_synth and (labeled_target is None or len(labeled_target) == 0):
        raise ConfigError("nothing to train on: synthetic batches disabled and no labels")
    if tm is not None:
        _freeze(tm)
    if seg_s is not None:
        _freeze(seg_s)

    domain = target_unlabeled.domain
    seg_config = seg_config or SegmenterConfig(
        in_channels=domain.channels, num_classes=domain.num_classes
    )
    seg = build_segmenter(seg_config, seed=derive_seed(cfg.seed, "target-seg"))
    opt = _make_optimizer(seg.parameters(), cfg)
    log = TrainLog()

    # validation: real labeled target patients when available, otherwise
    # synthetic-target renderings of held-out source patients
    if labeled_target is not None and len(labeled_target) > 0:
        real_train, val_set = _split_patients(labeled_target, cfg.val_fraction, cfg.seed)
        src_train = source_labeled
        val_synth = False
    else:
        real_train = None
        src_train, src_val = _split_patients(source_labeled, cfg.val_fraction, cfg.seed)
        val_set = src_val
        val_synth = True

    val_images: list[torch.Tensor] = []
    val_masks: list[torch.Tensor] = []
    if len(val_set) > 0:
        if val_synth:
            if tm is None:
                val_images, val_masks = [], []
            else:
                gen = torch_generator(derive_seed(cfg.seed, "target-val-style"))
                with torch.no_grad():
                    for sample in val_set:
                        s_t = tm.sample_style_prior(gen)
                        val_images.append(tm.translate(sample.image, "s2t", s_t))
                        val_masks.append(sample.mask)
        else:
            val_images = [s.image for s in val_set]
            val_masks = [s.mask for s in val_set]

    def validate_now() -> float:
        if not val_images:
            return float("nan")
        vals = []
        with torch.no_grad():
            for img, msk in zip(val_images, val_masks):
                probs = seg(img.unsqueeze(0))
                vals.append(-float(dice_seg_loss(probs, msk.unsqueeze(0), validate=False)))
        return float(np.mean(vals))

    synth_batches = _BatchSampler(src_train, cfg.batch_size, derive_seed(cfg.seed, "tgt-synth"))
    style_gen = torch_generator(derive_seed(cfg.seed, "tgt-style"))
    ps_batches = (
        _BatchSampler(pseudo_labeled, cfg.batch_size, derive_seed(cfg.seed, "tgt-ps"))
        if (options.use_pslab and pseudo_labeled is not None and len(pseudo_labeled) > 0)
        else None
    )
    ent_batches = (
        _BatchSampler(target_unlabeled, cfg.batch_size, derive_seed(cfg.seed, "tgt-ent"))
        if (options.use_entmin and len(target_unlabeled) > 0)
        else None
    )
    real_batches = (
        _BatchSampler(real_train, cfg.batch_size, derive_seed(cfg.seed, "tgt-real"))
        if (real_train is not None and len(real_train) > 0)
        else None
    )

    best_state, best_val = None, -np.inf

    def maybe_checkpoint(iteration: int) -> None:
        nonlocal best_state, best_val
        v = validate_now()
        if np.isnan(v):
            return
        log.add(iteration, "val_dice", v)
        if v > best_val:
            best_val = v
            best_state = copy.deepcopy(seg.state_dict())

    for it in range(cfg.iterations):
        l_seg = torch.zeros(())
        if options.use_synth:
            x_s, y_s = synth_batches.images_and_masks()
            s_t = tm.sample_style_prior(style_gen, batch_size=x_s.shape[0])
            with torch.no_grad():
                x_synth = tm.translate(x_s, "s2t", s_t)
            loss_synth = dice_seg_loss(seg(x_synth), y_s, validate=False)
            log.add(it, "seg_synth", loss_synth)
            l_seg = l_seg + loss_synth
        if real_batches is not None:
            x_r, y_r = real_batches.images_and_masks()
            loss_real = dice_seg_loss(seg(x_r), y_r, validate=False)
            log.add(it, "seg_real", loss_real)
            l_seg = l_seg + loss_real
        if ps_batches is not None:
            x_p, y_p = ps_batches.images_and_masks()
            loss_ps = dice_seg_loss(
                seg(x_p), y_p, validate=False, mask_abstained=cfg.pslab_mask_abstained
            )
            log.add(it, "seg_pslab", loss_ps)
            l_seg = l_seg + loss_ps
        l_ent = torch.zeros(())
        if ent_batches is not None:
            x_u = ent_batches.images()
            l_ent = entropy_loss(seg(x_u), reduction=cfg.entropy_reduction)
            log.add(it, "entropy", l_ent)
        total = segmentation_total(l_seg, l_ent)
        _check_finite(total, "segmentation_total", it)
        log.add(it, "segmentation_total", total)
        opt.zero_grad()
        total.backward()
        opt.step()
        if (it + 1) % cfg.val_every == 0:
            maybe_checkpoint(it)
    maybe_checkpoint(cfg.iterations)
    if best_state is not None:
        seg.load_state_dict(best_state)
    return SegTrainResult(segmenter=seg, log=log, best_val_dice=float(best_val))


# ---------------------------------------------------------------------------
# Baseline (iii): entropy minimization without translation
# ---------------------------------------------------------------------------


class ChannelAdapter(nn.Module):
    """1x1 projection mapping target channels onto the source channel count."""

    def __init__(self, in_channels: int, out_channels: int, seed: int = 0):
        super().__init__()
        with torch.random.fork_rng():
            torch.manual_seed(derive_seed(seed, "adapter-init"))
            self.proj = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.proj(x)


def train_entmin_source_baseline(
    source_labeled: Dataset,
    target_unlabeled: Dataset,
    cfg: TrainConfig,
    allow_channel_adapter: bool = False,
    seg_config: SegmenterConfig | None = None,
) -> SegTrainResult:
    """Segmentation loss on raw source plus entropy loss on raw target.

    With unequal channel counts this baseline is ill-posed; it is rejected
    unless an explicit 1x1 channel adapter is allowed.
    """
    c_s = source_labeled.domain.channels
    c_t = target_unlabeled.domain.channels
    adapter: ChannelAdapter | None = None
    if c_s != c_t:
        if not allow_channel_adapter:
            raise ConfigError(
                f"baseline iii needs equal channel counts (source {c_s}, target {c_t}); "
                "heterogeneous domains require translation, or enable the channel "
                "adapter to force a 1x1 projection"
            )
        adapter = ChannelAdapter(c_t, c_s, seed=cfg.seed)
    seg_config = seg_config or SegmenterConfig(
        in_channels=c_s, num_classes=source_labeled.domain.num_classes
    )
    seg = build_segmenter(seg_config, seed=cfg.seed)
    params = list(seg.parameters()) + (list(adapter.parameters()) if adapter else [])
    opt = _make_optimizer(params, cfg)
    train_set, val_set = _split_patients(source_labeled, cfg.val_fraction, cfg.seed)
    src_batches = _BatchSampler(train_set, cfg.batch_size, derive_seed(cfg.seed, "adv-src"))
    tgt_batches = _BatchSampler(target_unlabeled, cfg.batch_size, derive_seed(cfg.seed, "adv-tgt"))
    log = TrainLog()
    best_state, best_val = None, -np.inf

    def maybe_checkpoint(iteration: int) -> None:
        nonlocal best_state, best_val
        if len(val_set) == 0:
            return
        v = _soft_dice_score(seg, val_set)
        log.add(iteration, "val_dice", v)
        if v > best_val:
            best_val = v
            best_state = (
                copy.deepcopy(seg.state_dict()),
                copy.deepcopy(adapter.state_dict()) if adapter else None,
            )

    for it in range(cfg.iterations):
        x_s, y_s = src_batches.images_and_masks()
        loss_seg = dice_seg_loss(seg(x_s), y_s, validate=False)
        x_t = tgt_batches.images()
        if adapter is not None:
            x_t = adapter(x_t)
        loss_ent = entropy_loss(seg(x_t), reduction=cfg.entropy_reduction)
        total = segmentation_total(loss_seg, loss_ent)
        _check_finite(total, "segmentation_total", it)
        log.add(it, "seg_dice", loss_seg)
        log.add(it, "entropy", loss_ent)
        log.add(it, "segmentation_total", total)
        opt.zero_grad()
        total.backward()
        opt.step()
        if (it + 1) % cfg.val_every == 0:
            maybe_checkpoint(it)
    maybe_checkpoint(cfg.iterations)
    if best_state is not None:
        seg.load_state_dict(best_state[0])
        if adapter is not None and best_state[1] is not None:
            adapter.load_state_dict(best_state[1])
    return SegTrainResult(
        segmenter=seg, log=log, best_val_dice=float(best_val), adapter=adapter
    )
