"""Training-stage contracts at toy scale: logging, freezing, determinism,
error paths. Real training quality is covered by the acceptance suite."""

from dataclasses import replace

import numpy as np
import pytest
import torch

from hetseg.data import Dataset, DomainSpec, SyntheticTaskConfig, generate_synthetic_task
from hetseg.errors import ConfigError, DataError, MissingStageError, TrainingDivergence
from hetseg.losses import LossWeights, TranslationLossTerms
from hetseg.pipelines import (
    TargetTrainOptions,
    TrainConfig,
    _split_patients,
    model_checksum,
    train_entmin_source_baseline,
    train_source_segmenter,
    train_target_segmenter,
    train_translation,
)
from hetseg.pseudolabel import generate_pseudolabels
from hetseg.segmentation import SegmenterConfig
from hetseg.translation import NetConfig

TASK = SyntheticTaskConfig(
    source_spec=DomainSpec("source", 3, 16, 16),
    target_spec=DomainSpec("target", 4, 16, 16),
    lesion_count_range=(1, 2),
    lesion_radius_range=(2.0, 3.5),
    channel_mixing_seed=1,
    noise_std=0.02,
    num_patients_source=4,
    num_patients_target=4,
    slices_per_patient=1,
)
NET = NetConfig(base_dim=8, content_channels=32, n_res_encoder=1, n_res_decoder=1,
                style_dim=4, mlp_hidden=8, disc_base_dim=8, disc_layers=2)
SEG_S = SegmenterConfig(in_channels=3, base_dim=8, norm_groups=4, num_down=2)
SEG_T = SegmenterConfig(in_channels=4, base_dim=8, norm_groups=4, num_down=2)


def seg_cfg(iters=4, **kw):
    base = dict(stage="segmentation", optimizer="sgd", learning_rate=0.05,
                batch_size=2, iterations=iters, val_every=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tr_cfg(iters=3, **kw):
    base = dict(stage="translation", optimizer="adam", learning_rate=1e-4,
                batch_size=2, iterations=iters, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def datasets():
    return generate_synthetic_task(TASK)


@pytest.fixture(scope="module")
def seg_source(datasets):
    source, _, _ = datasets
    return train_source_segmenter(source, seg_cfg(iters=6), SEG_S)


@pytest.fixture(scope="module")
def translation(datasets, seg_source):
    source, target_u, _ = datasets
    return train_translation(source, target_u, seg_source.segmenter, tr_cfg(), NET)


# ---------------------------------------------------------------------------
# source segmenter stage
# ---------------------------------------------------------------------------


def test_source_segmenter_rejects_unlabeled(datasets):
    _, target_u, _ = datasets
    with pytest.raises(DataError):
        train_source_segmenter(target_u, seg_cfg(), SEG_T)


def test_source_segmenter_zero_iterations(datasets):
    source, _, _ = datasets
    result = train_source_segmenter(source, seg_cfg(iters=0), SEG_S)
    assert result.segmenter is not None
    assert not any(term == "seg_dice" for _, term, _ in result.log.rows)
    assert any(term == "val_dice" for _, term, _ in result.log.rows)


def test_source_segmenter_deterministic(datasets):
    source, _, _ = datasets
    a = train_source_segmenter(source, seg_cfg(), SEG_S)
    b = train_source_segmenter(source, seg_cfg(), SEG_S)
    assert model_checksum(a.segmenter) == model_checksum(b.segmenter)
    c = train_source_segmenter(source, seg_cfg(seed=1), SEG_S)
    assert model_checksum(a.segmenter) != model_checksum(c.segmenter)


def test_source_segmenter_emits_loss_curve(datasets):
    source, _, _ = datasets
    result = train_source_segmenter(source, seg_cfg(iters=4), SEG_S)
    iters = [it for it, term, _ in result.log.rows if term == "seg_dice"]
    assert iters == [0, 1, 2, 3]


def test_patient_level_validation_split_disjoint(datasets):
    source, _, _ = datasets
    train, val = _split_patients(source, 0.25, seed=3)
    train_pats = set(train.patient_ids())
    val_pats = set(val.patient_ids())
    assert not train_pats & val_pats
    assert train_pats | val_pats == set(source.patient_ids())
    train_ids = {s.sample_id for s in train}
    val_ids = {s.sample_id for s in val}
    assert not train_ids & val_ids


# ---------------------------------------------------------------------------
# translation stage
# ---------------------------------------------------------------------------


def test_translation_logs_all_eleven_terms_per_iteration(translation):
    per_iter = {}
    for it, term, _ in translation.log.rows:
        per_iter.setdefault(it, set()).add(term)
    for it in range(3):
        assert set(TranslationLossTerms.TERM_NAMES) <= per_iter[it]


def test_translation_pure_gan_smoke(datasets, seg_source):
    source, target_u, _ = datasets
    weights = LossWeights(gan=1.0, image=0, content=0, style=0, cycle=0, semantic=0)
    result = train_translation(source, target_u, seg_source.segmenter,
                               tr_cfg(iters=2, loss_weights=weights), NET)
    assert result.model.iteration == 2


def test_translation_never_updates_source_segmenter(datasets, seg_source):
    source, target_u, _ = datasets
    before = model_checksum(seg_source.segmenter)
    train_translation(source, target_u, seg_source.segmenter, tr_cfg(iters=2), NET)
    assert model_checksum(seg_source.segmenter) == before


def test_translation_divergence_names_term(datasets, seg_source):
    source, target_u, _ = datasets
    with pytest.raises(TrainingDivergence) as exc:
        train_translation(source, target_u, seg_source.segmenter,
                          tr_cfg(iters=50, learning_rate=1e14), NET)
    assert "iteration" in str(exc.value)


def test_translation_deterministic(datasets, seg_source):
    source, target_u, _ = datasets
    a = train_translation(source, target_u, seg_source.segmenter, tr_cfg(iters=2), NET)
    b = train_translation(source, target_u, seg_source.segmenter, tr_cfg(iters=2), NET)
    assert model_checksum(a.model) == model_checksum(b.model)


# ---------------------------------------------------------------------------
# target segmenter stage
# ---------------------------------------------------------------------------


def test_target_segmenter_synth_only_has_no_entropy_term(datasets, seg_source, translation):
    source, target_u, _ = datasets
    result = train_target_segmenter(
        source, target_u, translation.model, seg_source.segmenter, seg_cfg(),
        TargetTrainOptions(use_synth=True, use_entmin=False, use_pslab=False),
        seg_config=SEG_T,
    )
    assert "entropy" not in result.log.terms()
    assert "seg_synth" in result.log.terms()


def test_target_segmenter_entmin_logs_entropy(datasets, seg_source, translation):
    source, target_u, _ = datasets
    result = train_target_segmenter(
        source, target_u, translation.model, seg_source.segmenter, seg_cfg(iters=2),
        TargetTrainOptions(use_synth=True, use_entmin=True, use_pslab=False),
        seg_config=SEG_T,
    )
    assert "entropy" in result.log.terms()


def test_target_segmenter_pslab_without_labels_errors(datasets, seg_source, translation):
    source, target_u, _ = datasets
    with pytest.raises(MissingStageError) as exc:
        train_target_segmenter(
            source, target_u, translation.model, seg_source.segmenter, seg_cfg(),
            TargetTrainOptions(use_synth=True, use_entmin=False, use_pslab=True),
            seg_config=SEG_T,
        )
    assert "pseudo-label" in str(exc.value)


def test_target_segmenter_full_method_runs(datasets, seg_source, translation):
    source, target_u, _ = datasets
    pseudo = generate_pseudolabels(target_u, translation.model, seg_source.segmenter, 0.6)
    result = train_target_segmenter(
        source, target_u, translation.model, seg_source.segmenter, seg_cfg(iters=2),
        TargetTrainOptions(use_synth=True, use_entmin=True, use_pslab=True),
        pseudo_labeled=pseudo, seg_config=SEG_T,
    )
    assert {"seg_synth", "seg_pslab", "entropy", "segmentation_total"} <= result.log.terms()


def test_target_segmenter_never_updates_translation_or_source_seg(
    datasets, seg_source, translation
):
    source, target_u, _ = datasets
    tm_before = model_checksum(translation.model)
    seg_before = model_checksum(seg_source.segmenter)
    train_target_segmenter(
        source, target_u, translation.model, seg_source.segmenter, seg_cfg(iters=2),
        TargetTrainOptions(use_synth=True, use_entmin=True, use_pslab=False),
        seg_config=SEG_T,
    )
    assert model_checksum(translation.model) == tm_before
    assert model_checksum(seg_source.segmenter) == seg_before


def test_target_segmenter_draws_fresh_style_each_iteration(datasets, seg_source, translation):
    source, target_u, _ = datasets
    tm = translation.model
    seen_styles = []
    original = tm.sample_style_prior

    def recording(*args, **kwargs):
        out = original(*args, **kwargs)
        if kwargs.get("batch_size") or (args and isinstance(args[-1], int)):
            seen_styles.append(out.detach().clone())
        return out

    tm.sample_style_prior = recording
    try:
        train_target_segmenter(
            source, target_u, tm, seg_source.segmenter, seg_cfg(iters=2),
            TargetTrainOptions(use_synth=True, use_entmin=False, use_pslab=False),
            seg_config=SEG_T,
        )
    finally:
        tm.sample_style_prior = original
    assert len(seen_styles) >= 2
    assert not torch.equal(seen_styles[0], seen_styles[1])


def test_target_segmenter_real_labels_only(datasets):
    _, _, target_h = datasets
    result = train_target_segmenter(
        Dataset(TASK.source_spec, []), target_h.without_masks(), None, None,
        seg_cfg(iters=2),
        TargetTrainOptions(use_synth=False, use_entmin=False, use_pslab=False),
        labeled_target=target_h, seg_config=SEG_T,
    )
    assert "seg_real" in result.log.terms()
    assert "seg_synth" not in result.log.terms()


def test_target_segmenter_synth_requires_translation(datasets, seg_source):
    source, target_u, _ = datasets
    with pytest.raises(MissingStageError):
        train_target_segmenter(
            source, target_u, None, seg_source.segmenter, seg_cfg(),
            TargetTrainOptions(use_synth=True, use_entmin=False, use_pslab=False),
            seg_config=SEG_T,
        )


def test_target_segmenter_nothing_to_train_on(datasets, seg_source, translation):
    source, target_u, _ = datasets
    with pytest.raises(ConfigError):
        train_target_segmenter(
            source, target_u, translation.model, seg_source.segmenter, seg_cfg(),
            TargetTrainOptions(use_synth=False, use_entmin=True, use_pslab=False),
            seg_config=SEG_T,
        )


# ---------------------------------------------------------------------------
# baseline (iii)
# ---------------------------------------------------------------------------


def test_entmin_baseline_rejects_heterogeneous_channels(datasets):
    source, target_u, _ = datasets
    with pytest.raises(ConfigError) as exc:
        train_entmin_source_baseline(source, target_u, seg_cfg(iters=2))
    assert "channel" in str(exc.value)


def test_entmin_baseline_with_adapter(datasets):
    source, target_u, _ = datasets
    result = train_entmin_source_baseline(
        source, target_u, seg_cfg(iters=2), allow_channel_adapter=True, seg_config=SEG_S
    )
    assert result.adapter is not None
    out = result.adapter(torch.randn(4, 16, 16))
    assert tuple(out.shape) == (3, 16, 16)


def test_entmin_baseline_equal_channels_needs_no_adapter():
    task = SyntheticTaskConfig(
        source_spec=DomainSpec("source", 3, 16, 16),
        target_spec=DomainSpec("target", 3, 16, 16),
        lesion_count_range=(1, 1),
        lesion_radius_range=(2.0, 3.0),
        channel_mixing_seed=2,
        num_patients_source=2,
        num_patients_target=2,
        slices_per_patient=1,
    )
    source, target_u, _ = generate_synthetic_task(task)
    result = train_entmin_source_baseline(source, target_u, seg_cfg(iters=2),
                                          seg_config=SEG_S)
    assert result.adapter is None
