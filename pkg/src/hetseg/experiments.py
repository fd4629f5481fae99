"""Baseline experiment matrix and the semi-supervision sweep.

Folds partition the target cohort at patient level; each (fold, seed) run
trains the stages a baseline needs and evaluates on the fold's held-out
labeled patients. A shared stage cache memoizes stage results by content key
so baselines that differ only downstream (e.g. entropy regularization on or
off) reuse the same trained translation network.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch.nn as nn

from .checkpoint import save_segmenter, save_translation
from .data import Dataset, SyntheticTaskConfig, generate_task_with_target_labels, make_folds
from .errors import ConfigError
from .losses import LossWeights
from .metrics import (
    MetricsRecord,
    MetricsReport,
    aggregate,
    emit_plots,
    emit_report,
    evaluate_segmenter,
)
from .pipelines import (
    BASELINE_IDS,
    SegTrainResult,
    TargetTrainOptions,
    TrainConfig,
    TranslationTrainResult,
    model_checksum,
    train_entmin_source_baseline,
    train_source_segmenter,
    train_target_segmenter,
    train_translation,
)
from .pseudolabel import StylePolicy, generate_pseudolabels
from .segmentation import SegmenterConfig
from .seeding import derive_seed, seed_all
from .translation import NetConfig

logger = logging.getLogger(__name__)


def _stable_key(*parts) -> str:
    return json.dumps(parts, sort_keys=True, default=str)


class StageCache:
    """In-memory memoization of stage results keyed by their inputs."""

    def __init__(self) -> None:
        self._store: dict[str, object] = {}

    def get_or_run(self, key_parts: tuple, fn):
        key = _stable_key(*key_parts)
        if key not in self._store:
            self._store[key] = fn()
        return self._store[key]


@dataclass(frozen=True)
class ExperimentPlan:
    """One row of the baseline matrix on one task."""

    baseline: str
    task: SyntheticTaskConfig
    source_train: TrainConfig
    translation_train: TrainConfig
    target_train: TrainConfig
    num_folds: int = 5
    seeds: tuple[int, ...] = (0,)
    eval_folds: tuple[int, ...] | None = None
    supervision_fraction: float = 0.0
    allow_channel_adapter: bool = False
    net: NetConfig = field(default_factory=NetConfig)
    style_policy: StylePolicy = field(default_factory=StylePolicy)
    seg_base_dim: int = 16
    deterministic: bool = True
    name: str | None = None

    def __post_init__(self) -> None:
        if self.baseline not in BASELINE_IDS:
            raise ConfigError(
                f"unknown baseline {self.baseline!r}; expected one of {BASELINE_IDS}"
            )
        if not 0.0 <= self.supervision_fraction <= 1.0:
            raise ConfigError("supervision_fraction must lie in [0, 1]")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.num_folds < 2:
            raise ConfigError("num_folds must be >= 2")

    @property
    def experiment_name(self) -> str:
        if self.name:
            return self.name
        suffix = (
            f"_f{self.supervision_fraction:g}" if self.supervision_fraction > 0 else ""
        )
        return f"baseline_{self.baseline}{suffix}"

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "task": self.task.to_dict(),
            "source_train": self.source_train.to_dict(),
            "translation_train": self.translation_train.to_dict(),
            "target_train": self.target_train.to_dict(),
            "num_folds": self.num_folds,
            "seeds": list(self.seeds),
            "eval_folds": list(self.eval_folds) if self.eval_folds is not None else None,
            "supervision_fraction": self.supervision_fraction,
            "allow_channel_adapter": self.allow_channel_adapter,
            "net": self.net.to_dict(),
            "style_policy": {
                "kind": self.style_policy.kind,
                "draws": self.style_policy.draws,
                "seed": self.style_policy.seed,
            },
            "seg_base_dim": self.seg_base_dim,
            "deterministic": self.deterministic,
            "name": self.name,
        }


def _seg_config_for(domain_channels: int, num_classes: int, base_dim: int) -> SegmenterConfig:
    return SegmenterConfig(
        in_channels=domain_channels, num_classes=num_classes, base_dim=base_dim
    )


@dataclass
class _FoldData:
    heldout: Dataset
    train_labeled: Dataset
    train_unlabeled: Dataset
    revealed: Dataset | None
    remainder_unlabeled: Dataset


def _prepare_fold(
    source: Dataset,
    target_all: Dataset,
    plan: ExperimentPlan,
    fold: int,
    fold_plan,
) -> _FoldData:
    held_pats = fold_plan.patients_in(fold)
    train_pats = fold_plan.patients_not_in(fold)
    heldout = target_all.subset_by_patients(held_pats)
    train_labeled = target_all.subset_by_patients(train_pats)
    train_unlabeled = train_labeled.without_masks()

    fraction = plan.supervision_fraction
    if fraction == 0.0 and plan.baseline in ("i", "ii"):
        fraction = 1.0  # these baselines train on the full labeled cohort
    if fraction > 0.0:
        n_reveal = round(fraction * len(train_pats))
        rng = np.random.default_rng(
            derive_seed(plan.task.channel_mixing_seed, "reveal", fold, repr(float(fraction)))
        )
        order = sorted(train_pats)
        rng.shuffle(order)
        revealed_pats = sorted(order[:n_reveal])
    else:
        revealed_pats = []
    revealed = train_labeled.subset_by_patients(revealed_pats) if revealed_pats else None
    remainder_pats = [p for p in train_pats if p not in set(revealed_pats)]
    remainder_unlabeled = train_unlabeled.subset_by_patients(remainder_pats)
    return _FoldData(heldout, train_labeled, train_unlabeled, revealed, remainder_unlabeled)


class _ComposedSegmenter(nn.Module):
    """Channel adapter followed by a segmenter, for baseline (iii) evaluation."""

    def __init__(self, adapter: nn.Module, seg: nn.Module):
        super().__init__()
        self.adapter = adapter
        self.seg = seg

    def forward(self, x):
        return self.seg(self.adapter(x))


@dataclass
class RunArtifacts:
    record: MetricsRecord
    segmenter: nn.Module
    seg_source: SegTrainResult | None
    translation: TranslationTrainResult | None
    pseudo_labeled: Dataset | None
    target_result: SegTrainResult | None
    heldout: Dataset | None = None
    isolation: dict[str, bool] | None = None


def _run_single(
    plan: ExperimentPlan,
    fold: int,
    seed: int,
    source: Dataset,
    target_all: Dataset,
    fold_plan,
    cache: StageCache,
    run_dir: Path | None,
) -> RunArtifacts:
    data = _prepare_fold(source, target_all, plan, fold, fold_plan)
    task_key = plan.task.to_dict()
    baseline = plan.baseline

    seg_source_result: SegTrainResult | None = None
    translation_result: TranslationTrainResult | None = None
    pseudo_labeled: Dataset | None = None
    target_result: SegTrainResult | None = None
    checksum_seg_source = checksum_translation = None

    needs_translation = baseline in ("ii", "iv", "v", "vi", "vii", "viii")
    needs_seg_source = needs_translation

    src_key = tr_key = ps_key = None
    if needs_seg_source:
        src_cfg = replace(plan.source_train, seed=derive_seed(seed, "source-seg"))
        src_seg_config = _seg_config_for(
            source.domain.channels, source.domain.num_classes, plan.seg_base_dim
        )
        src_key = ("seg-source", task_key, src_cfg.to_dict(), src_seg_config.to_dict())
        seg_source_result = cache.get_or_run(
            src_key,
            lambda: train_source_segmenter(source, src_cfg, src_seg_config),
        )
        checksum_seg_source = model_checksum(seg_source_result.segmenter)

    if needs_translation:
        weights = plan.translation_train.loss_weights
        if baseline == "iv":
            weights = replace(weights, semantic=0.0)
        tr_cfg = replace(
            plan.translation_train,
            loss_weights=weights,
            seed=derive_seed(seed, "translation", fold),
        )
        tr_key = (
            "translation",
            task_key,
            fold,
            tr_cfg.to_dict(),
            plan.net.to_dict(),
            sorted(data.train_unlabeled.patient_ids()),
            src_key,
        )
        translation_result = cache.get_or_run(
            tr_key,
            lambda: train_translation(
                source, data.train_unlabeled, seg_source_result.segmenter, tr_cfg, plan.net
            ),
        )
        checksum_translation = model_checksum(translation_result.model)

    tgt_cfg = replace(plan.target_train, seed=derive_seed(seed, "target-seg", fold))
    tgt_seg_config = _seg_config_for(
        target_all.domain.channels, target_all.domain.num_classes, plan.seg_base_dim
    )

    use_pslab = baseline in ("vii", "viii") and len(data.remainder_unlabeled) > 0
    use_entmin = baseline in ("vi", "viii") and len(data.remainder_unlabeled) > 0

    if use_pslab:
        ps_key = (
            "pseudo-labels",
            tr_key,
            seed,
            tgt_cfg.pseudo_threshold,
            plan.style_policy.kind,
            plan.style_policy.draws,
            plan.style_policy.seed,
            sorted(data.remainder_unlabeled.patient_ids()),
        )
        pseudo_labeled = cache.get_or_run(
            ps_key,
            lambda: generate_pseudolabels(
                data.remainder_unlabeled,
                translation_result.model,
                seg_source_result.segmenter,
                tgt_cfg.pseudo_threshold,
                plan.style_policy,
            ),
        )

    if baseline == "iii":
        adv_result = train_entmin_source_baseline(
            source,
            data.train_unlabeled,
            replace(tgt_cfg, stage="segmentation"),
            allow_channel_adapter=plan.allow_channel_adapter,
            seg_config=_seg_config_for(
                source.domain.channels, source.domain.num_classes, plan.seg_base_dim
            ),
        )
        target_result = adv_result
        if adv_result.adapter is not None:
            final_seg: nn.Module = _ComposedSegmenter(adv_result.adapter, adv_result.segmenter)
        else:
            final_seg = adv_result.segmenter
    else:
        options = TargetTrainOptions(
            use_synth=baseline != "i",
            use_entmin=use_entmin,
            use_pslab=use_pslab,
        )
        labeled_target = data.revealed
        key = (
            "seg-target",
            task_key,
            fold,
            tgt_cfg.to_dict(),
            tgt_seg_config.to_dict(),
            options.use_synth,
            options.use_entmin,
            options.use_pslab,
            sorted(labeled_target.patient_ids()) if labeled_target else None,
            sorted(data.remainder_unlabeled.patient_ids()),
            tr_key,
            ps_key,
            seed,
        )
        target_result = cache.get_or_run(
            key,
            lambda: train_target_segmenter(
                source,
                data.remainder_unlabeled,
                translation_result.model if translation_result else None,
                seg_source_result.segmenter if seg_source_result else None,
                tgt_cfg,
                options,
                pseudo_labeled=pseudo_labeled,
                labeled_target=labeled_target,
                seg_config=tgt_seg_config,
            ),
        )
        final_seg = target_result.segmenter

    # audit: downstream stages must never have touched the frozen models
    isolation: dict[str, bool] = {}
    if seg_source_result is not None:
        isolation["seg_source_frozen"] = (
            model_checksum(seg_source_result.segmenter) == checksum_seg_source
        )
    if translation_result is not None:
        isolation["translation_frozen"] = (
            model_checksum(translation_result.model) == checksum_translation
        )

    metrics = evaluate_segmenter(final_seg, data.heldout)
    record = MetricsRecord(fold=fold, seed=seed, **metrics)

    if run_dir is not None:
        _write_run_dir(
            run_dir, plan, fold, seed, record,
            seg_source_result, translation_result, target_result,
        )
    return RunArtifacts(
        record=record,
        segmenter=final_seg,
        seg_source=seg_source_result,
        translation=translation_result,
        pseudo_labeled=pseudo_labeled,
        target_result=target_result,
        heldout=data.heldout,
        isolation=isolation,
    )


def _write_run_dir(
    run_dir: Path,
    plan: ExperimentPlan,
    fold: int,
    seed: int,
    record: MetricsRecord,
    seg_source: SegTrainResult | None,
    translation: TranslationTrainResult | None,
    target_result: SegTrainResult | None,
) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    config = {"plan": plan.to_dict(), "fold": fold, "seed": seed}
    (run_dir / "config.json").write_text(json.dumps(config, indent=1))
    (run_dir / "metrics.json").write_text(json.dumps(record.to_dict(), indent=1))
    ckpt_dir = run_dir / "checkpoints"
    if seg_source is not None:
        seg_source.log.write_csv(run_dir / "losses_source_segmenter.csv")
        save_segmenter(ckpt_dir / "seg_source.ckpt", seg_source.segmenter)
    if translation is not None:
        translation.log.write_csv(run_dir / "losses_translation.csv")
        save_translation(ckpt_dir / "translation.ckpt", translation.model)
    if target_result is not None:
        target_result.log.write_csv(run_dir / "losses_target_segmenter.csv")
        save_segmenter(ckpt_dir / "seg_target.ckpt", target_result.segmenter)


def run_experiment(
    plan: ExperimentPlan,
    out_root: Path | None = None,
    cache: StageCache | None = None,
    collect_artifacts: list[RunArtifacts] | None = None,
) -> MetricsReport:
    """Execute a baseline over its folds and seeds; emit and return the report.

    Pass a list as ``collect_artifacts`` to additionally receive the trained
    models and stage results of every (fold, seed) run.
    """
    if plan.deterministic:
        seed_all(derive_seed(plan.seeds[0], "experiment", plan.baseline))
    cache = cache if cache is not None else StageCache()
    source, target_all = cache.get_or_run(
        ("task-data", plan.task.to_dict()),
        lambda: generate_task_with_target_labels(plan.task),
    )
    fold_plan = make_folds(
        target_all.patient_ids(),
        plan.num_folds,
        seed=derive_seed(plan.task.channel_mixing_seed, "folds", plan.num_folds),
    )
    folds = plan.eval_folds if plan.eval_folds is not None else tuple(range(plan.num_folds))
    records = []
    for fold in folds:
        for seed in plan.seeds:
            run_dir = (
                Path(out_root) / plan.experiment_name / str(fold) / str(seed)
                if out_root is not None
                else None
            )
            art = _run_single(
                plan, fold, seed, source, target_all, fold_plan, cache, run_dir
            )
            records.append(art.record)
            if collect_artifacts is not None:
                collect_artifacts.append(art)
            logger.info(
                "%s fold=%d seed=%d dsc=%.3f", plan.experiment_name, fold, seed,
                art.record.dsc,
            )
    report = aggregate(records)
    if out_root is not None:
        emit_report(report, Path(out_root) / plan.experiment_name)
    return report


# ---------------------------------------------------------------------------
# Semi-supervision sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepEntry:
    fraction: float
    method: str
    report: MetricsReport


@dataclass
class SweepSeries:
    entries: list[SweepEntry] = field(default_factory=list)

    def series(self, method: str, metric: str = "dsc") -> list[tuple[float, float]]:
        return [
            (e.fraction, e.report.aggregate[metric]["mean"])
            for e in self.entries
            if e.method == method
        ]

    def report_for(self, method: str, fraction: float) -> MetricsReport | None:
        for e in self.entries:
            if e.method == method and e.fraction == fraction:
                return e.report
        return None

    def to_rows(self) -> list[dict]:
        rows = []
        for e in self.entries:
            for r in e.report.records:
                row = {"fraction": e.fraction, "method": e.method}
                row.update(r.to_dict())
                rows.append(row)
        return rows


def sweep_supervision(
    fractions: list[float],
    plan: ExperimentPlan,
    out_root: Path | None = None,
    cache: StageCache | None = None,
) -> SweepSeries:
    """Run the full method and the target-only baseline while revealing a
    growing fraction of target patients' labels."""
    if sorted(fractions) != list(fractions):
        raise ConfigError("fractions must be sorted ascending")
    if any(f < 0 or f > 1 for f in fractions):
        raise ConfigError("fractions must lie in [0, 1]")
    cache = cache if cache is not None else StageCache()
    source, target_all = cache.get_or_run(
        ("task-data", plan.task.to_dict()),
        lambda: generate_task_with_target_labels(plan.task),
    )
    fold_plan = make_folds(
        target_all.patient_ids(),
        plan.num_folds,
        seed=derive_seed(plan.task.channel_mixing_seed, "folds", plan.num_folds),
    )
    folds = plan.eval_folds if plan.eval_folds is not None else tuple(range(plan.num_folds))
    min_train = min(len(fold_plan.patients_not_in(f)) for f in folds)

    series = SweepSeries()
    for fraction in fractions:
        if fraction > 0 and round(fraction * min_train) < 1:
            logger.warning(
                "fraction %.3f reveals no patients (min train cohort %d); point skipped",
                fraction, min_train,
            )
            continue
        method_plan = replace(
            plan,
            baseline="viii",
            supervision_fraction=fraction,
            name=f"sweep_method_f{fraction:g}",
        )
        series.entries.append(
            SweepEntry(fraction, "method", run_experiment(method_plan, out_root, cache))
        )
        if fraction > 0:
            tonly_plan = replace(
                plan,
                baseline="i",
                supervision_fraction=fraction,
                name=f"sweep_target_only_f{fraction:g}",
            )
            series.entries.append(
                SweepEntry(
                    fraction, "target-only", run_experiment(tonly_plan, out_root, cache)
                )
            )
        else:
            logger.warning("target-only baseline undefined at fraction 0; skipped")
    if out_root is not None:
        _emit_sweep(series, Path(out_root))
    return series


def _emit_sweep(series: SweepSeries, out_root: Path) -> None:
    out_root.mkdir(parents=True, exist_ok=True)
    rows = series.to_rows()
    path = out_root / "sweep.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "method", "fold", "seed", "recall", "precision", "dsc", "ap"])
        for row in rows:
            writer.writerow(
                [row["fraction"], row["method"], row["fold"], row["seed"],
                 repr(row["recall"]), repr(row["precision"]), repr(row["dsc"]), repr(row["ap"])]
            )
    for metric in ("dsc", "ap"):
        curves = {
            m: series.series(m, metric) for m in ("method", "target-only")
            if series.series(m, metric)
        }
        if curves:
            emit_plots(curves, out_root, metric=metric)
