"""Unsupervised domain adaptation for lesion segmentation across
heterogeneous imaging domains: stochastic cross-domain translation with
semantic cycle-consistency, pseudo-labeling through reverse translation and
entropy-regularized target training."""

from .data import (
    Dataset,
    DomainSpec,
    FoldPlan,
    Sample,
    SyntheticTaskConfig,
    generate_synthetic_task,
    load_dataset,
    make_folds,
    save_dataset,
    save_sample,
)
from .errors import (
    ConfigError,
    DataError,
    HetsegError,
    MissingStageError,
    TrainingDivergence,
)
from .experiments import ExperimentPlan, StageCache, run_experiment, sweep_supervision
from .losses import (
    LossWeights,
    TranslationLossTerms,
    dice_seg_loss,
    entropy_loss,
    gan_loss_d,
    gan_loss_g,
    recon_l1,
    segmentation_total,
    semantic_cycle_loss,
    translation_total,
)
from .metrics import (
    MetricsRecord,
    MetricsReport,
    aggregate,
    average_precision,
    lesion_preservation_score,
    pixel_metrics,
)
from .pipelines import (
    TargetTrainOptions,
    TrainConfig,
    train_source_segmenter,
    train_target_segmenter,
    train_translation,
)
from .pseudolabel import PseudoMask, StylePolicy, generate_pseudolabels, pseudo_label
from .segmentation import Segmenter, SegmenterConfig, build_segmenter, predict_hard, predict_soft
from .translation import NetConfig, TranslationModel, build_translation_model

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "Dataset",
    "DomainSpec",
    "ExperimentPlan",
    "FoldPlan",
    "HetsegError",
    "LossWeights",
    "MetricsRecord",
    "MetricsReport",
    "MissingStageError",
    "NetConfig",
    "PseudoMask",
    "Sample",
    "Segmenter",
    "SegmenterConfig",
    "StageCache",
    "StylePolicy",
    "SyntheticTaskConfig",
    "TargetTrainOptions",
    "TrainConfig",
    "TrainingDivergence",
    "TranslationLossTerms",
    "TranslationModel",
    "aggregate",
    "average_precision",
    "build_segmenter",
    "build_translation_model",
    "dice_seg_loss",
    "entropy_loss",
    "gan_loss_d",
    "gan_loss_g",
    "generate_pseudolabels",
    "generate_synthetic_task",
    "lesion_preservation_score",
    "load_dataset",
    "make_folds",
    "pixel_metrics",
    "predict_hard",
    "predict_soft",
    "pseudo_label",
    "recon_l1",
    "run_experiment",
    "save_dataset",
    "save_sample",
    "segmentation_total",
    "semantic_cycle_loss",
    "sweep_supervision",
    "train_source_segmenter",
    "train_target_segmenter",
    "train_translation",
    "translation_total",
]
