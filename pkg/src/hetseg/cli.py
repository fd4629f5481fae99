"""Command-line interface orchestrating the pipeline stages.

Subcommands mirror the stages: gen-data, train-source, train-translation,
pseudo-label, train-target, evaluate, plus the experiment matrix and the
semi-supervision sweep. Exit codes: 0 ok, 2 config error, 3 data error,
4 training divergence, 5 missing prerequisite stage.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, load_config
from .data import Dataset, generate_synthetic_task, load_dataset, save_dataset
from .errors import ConfigError, DataError, HetsegError, MissingStageError, TrainingDivergence
from .experiments import run_experiment, sweep_supervision
from .metrics import MetricsRecord, aggregate, emit_report, evaluate_segmenter
from .pipelines import (
    TargetTrainOptions,
    train_source_segmenter,
    train_target_segmenter,
    train_translation,
)
from .pseudolabel import generate_pseudolabels
from .segmentation import SegmenterConfig
from .seeding import derive_seed, seed_all

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_MISSING_STAGE = 5

_EXIT_BY_CATEGORY = {
    "config": EXIT_CONFIG,
    "data": EXIT_DATA,
    "divergence": EXIT_DIVERGENCE,
    "missing-stage": EXIT_MISSING_STAGE,
}


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON config file")
    p.add_argument("--preset", choices=["desk", "paper"], default=None,
                   help="configuration preset layered under the config file")
    p.add_argument("--run-root", type=Path, default=None,
                   help="output root (overrides config and HETSEG_RUN_ROOT)")
    p.add_argument("--seed", type=int, default=None, help="override the base seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hetseg",
        description="Unsupervised domain adaptation for heterogeneous lesion segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic heterogeneous task")
    _common_flags(p)

    p = sub.add_parser("train-source", help="train the source-domain segmenter")
    _common_flags(p)

    p = sub.add_parser("train-translation", help="train the cross-domain translation networks")
    _common_flags(p)

    p = sub.add_parser("pseudo-label", help="pseudo-label target images via translation")
    _common_flags(p)
    p.add_argument("--threshold", type=float, default=None,
                   help="confidence threshold (default from config)")

    p = sub.add_parser("train-target", help="train the target-domain segmenter")
    _common_flags(p)
    p.add_argument("--entmin", action=argparse.BooleanOptionalAction, default=True,
                   help="entropy regularization on unlabeled target images")
    p.add_argument("--pslab", action=argparse.BooleanOptionalAction, default=True,
                   help="supervision from pseudo-labeled target images")

    p = sub.add_parser("evaluate", help="evaluate the target segmenter on held-out data")
    _common_flags(p)

    p = sub.add_parser("experiment", help="run one baseline of the experiment matrix")
    _common_flags(p)
    p.add_argument("--baseline", default=None,
                   help="baseline id (i..viii); default from config")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker bound for fold/seed fan-out (sequential on this build)")

    p = sub.add_parser("sweep", help="semi-supervision sweep over label fractions")
    _common_flags(p)
    p.add_argument("--fractions", default=None,
                   help="comma-separated fractions in [0,1], e.g. 0,0.5,1")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker bound for fold/seed fan-out (sequential on this build)")

    return parser


def _resolve(args: argparse.Namespace) -> tuple[RunConfig, Path]:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, preset=args.preset, overrides=overrides)
    root = Path(args.run_root) if args.run_root is not None else cfg.run_root()
    return cfg, root


def _echo_config(cfg: RunConfig, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg.resolved_dict(), indent=1))


def _dataset_or_stage_error(path: Path, hint: str) -> Dataset:
    if not path.exists():
        raise MissingStageError(hint)
    return load_dataset(path)


def _require_checkpoint(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingStageError(hint)
    return path


def _cmd_gen_data(args) -> int:
    cfg, root = _resolve(args)
    seed_all(cfg.seed, cfg.deterministic)
    _echo_config(cfg, root)
    source, target_unlabeled, target_heldout = generate_synthetic_task(cfg.task)
    save_dataset(source, root / "data" / "source")
    save_dataset(target_unlabeled, root / "data" / "target_unlabeled")
    save_dataset(target_heldout, root / "data" / "target_heldout")
    print(
        f"generated task: source {len(source)} slices "
        f"[{cfg.task.source_spec.channels}x{cfg.task.source_spec.height}"
        f"x{cfg.task.source_spec.width}], target {len(target_unlabeled)} unlabeled + "
        f"{len(target_heldout)} held-out slices "
        f"[{cfg.task.target_spec.channels}x{cfg.task.target_spec.height}"
        f"x{cfg.task.target_spec.width}] -> {root / 'data'}"
    )
    return EXIT_OK


def _cmd_train_source(args) -> int:
    cfg, root = _resolve(args)
    seed_all(cfg.seed, cfg.deterministic)
    _echo_config(cfg, root)
    source = _dataset_or_stage_error(
        root / "data" / "source", "source dataset missing; run gen-data first"
    )
    train_cfg = replace(cfg.source_train, seed=derive_seed(cfg.seed, "source-seg"))
    seg_config = SegmenterConfig(
        in_channels=source.domain.channels,
        num_classes=source.domain.num_classes,
        base_dim=cfg.seg_base_dim,
    )
    result = train_source_segmenter(source, train_cfg, seg_config)
    ckpt.save_segmenter(root / "checkpoints" / "seg_source.ckpt", result.segmenter,
                        iteration=train_cfg.iterations)
    result.log.write_csv(root / "losses_source_segmenter.csv")
    print(f"source segmenter trained; best validation dice {result.best_val_dice:.4f}")
    return EXIT_OK


def _cmd_train_translation(args) -> int:
    cfg, root = _resolve(args)
    seed_all(cfg.seed, cfg.deterministic)
    _echo_config(cfg, root)
    source = _dataset_or_stage_error(
        root / "data" / "source", "source dataset missing; run gen-data first"
    )
    target = _dataset_or_stage_error(
        root / "data" / "target_unlabeled", "target dataset missing; run gen-data first"
    )
    seg_path = _require_checkpoint(
        root / "checkpoints" / "seg_source.ckpt",
        "source segmenter checkpoint missing; run train-source first",
    )
    seg_s = ckpt.load_segmenter(seg_path)
    train_cfg = replace(
        cfg.translation_train,
        loss_weights=cfg.loss_weights,
        seed=derive_seed(cfg.seed, "translation", 0),
    )
    result = train_translation(source, target, seg_s, train_cfg, cfg.net)
    ckpt.save_translation(root / "checkpoints" / "translation.ckpt", result.model)
    result.log.write_csv(root / "losses_translation.csv")
    print(f"translation networks trained for {train_cfg.iterations} iterations")
    return EXIT_OK


def _cmd_pseudo_label(args) -> int:
    cfg, root = _resolve(args)
    seed_all(cfg.seed, cfg.deterministic)
    target = _dataset_or_stage_error(
        root / "data" / "target_unlabeled", "target dataset missing; run gen-data first"
    )
    tm_path = _require_checkpoint(
        root / "checkpoints" / "translation.ckpt",
        "translation checkpoint missing; run train-translation first",
    )
    seg_path = _require_checkpoint(
        root / "checkpoints" / "seg_source.ckpt",
        "source segmenter checkpoint missing; run train-source first",
    )
    tm = ckpt.load_translation(tm_path)
    seg_s = ckpt.load_segmenter(seg_path)
    threshold = args.threshold if args.threshold is not None else cfg.pseudo_threshold
    labeled = generate_pseudolabels(target, tm, seg_s, threshold, cfg.style_policy)
    save_dataset(labeled, root / "data" / "target_pseudo")
    coverages = [s.coverage for s in labeled]
    print(
        f"pseudo-labeled {len(labeled)} slices at threshold {threshold}; "
        f"mean coverage {sum(coverages) / len(coverages):.4f}"
    )
    return EXIT_OK


def _cmd_train_target(args) -> int:
    cfg, root = _resolve(args)
    seed_all(cfg.seed, cfg.deterministic)
    _echo_config(cfg, root)
    source = _dataset_or_stage_error(
        root / "data" / "source", "source dataset missing; run gen-data first"
    )
    target = _dataset_or_stage_error(
        root / "data" / "target_unlabeled", "target dataset missing; run gen-data first"
    )
    tm_path = _require_checkpoint(
        root / "checkpoints" / "translation.ckpt",
        "translation checkpoint missing; run train-translation first",
    )
    seg_path = _require_checkpoint(
        root / "checkpoints" / "seg_source.ckpt",
        "source segmenter checkpoint missing; run train-source first",
    )
    tm = ckpt.load_translation(tm_path)
    seg_s = ckpt.load_segmenter(seg_path)
    pseudo = None
    if args.pslab:
        pseudo_dir = root / "data" / "target_pseudo"
        if not pseudo_dir.exists():
            raise MissingStageError(
                "pseudo-labels missing; run pseudo-label first (or pass --no-pslab)"
            )
        pseudo = load_dataset(pseudo_dir)
    train_cfg = replace(cfg.target_train, seed=derive_seed(cfg.seed, "target-seg", 0))
    seg_config = SegmenterConfig(
        in_channels=target.domain.channels,
        num_classes=target.domain.num_classes,
        base_dim=cfg.seg_base_dim,
    )
    result = train_target_segmenter(
        source,
        target,
        tm,
        seg_s,
        train_cfg,
        TargetTrainOptions(use_synth=True, use_entmin=args.entmin, use_pslab=args.pslab),
        pseudo_labeled=pseudo,
        seg_config=seg_config,
    )
    ckpt.save_segmenter(root / "checkpoints" / "seg_target.ckpt", result.segmenter,
                        iteration=train_cfg.iterations)
    result.log.write_csv(root / "losses_target_segmenter.csv")
    print(f"target segmenter trained; best validation dice {result.best_val_dice:.4f}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    cfg, root = _resolve(args)
    seed_all(cfg.seed, cfg.deterministic)
    heldout = _dataset_or_stage_error(
        root / "data" / "target_heldout", "held-out dataset missing; run gen-data first"
    )
    seg_path = _require_checkpoint(
        root / "checkpoints" / "seg_target.ckpt",
        "target segmenter checkpoint missing; run train-target first",
    )
    seg_t = ckpt.load_segmenter(seg_path)
    metrics = evaluate_segmenter(seg_t, heldout)
    record = MetricsRecord(fold=0, seed=cfg.seed, **metrics)
    report = aggregate([record])
    emit_report(report, root)
    for name in ("recall", "precision", "dsc", "ap"):
        print(f"{name}: {metrics[name]:.4f}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    cfg, root = _resolve(args)
    if args.jobs > 1:
        logger.info("--jobs=%d requested; running sequentially on this build", args.jobs)
    plan = cfg.make_plan(baseline=args.baseline)
    report = run_experiment(plan, out_root=root)
    for name, stats in report.aggregate.items():
        print(f"{name}: {stats['mean']:.4f} (+/- {stats['std']:.4f})")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg, root = _resolve(args)
    if args.jobs > 1:
        logger.info("--jobs=%d requested; running sequentially on this build", args.jobs)
    if args.fractions is not None:
        try:
            fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
        except ValueError:
            raise ConfigError(f"--fractions: cannot parse {args.fractions!r}")
    else:
        fractions = list(cfg.experiment.fractions)
    plan = cfg.make_plan(baseline="viii")
    series = sweep_supervision(fractions, plan, out_root=root)
    for entry in series.entries:
        stats = entry.report.aggregate["dsc"]
        print(
            f"fraction {entry.fraction:g} [{entry.method}]: "
            f"dsc {stats['mean']:.4f} (+/- {stats['std']:.4f})"
        )
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-source": _cmd_train_source,
    "train-translation": _cmd_train_translation,
    "pseudo-label": _cmd_pseudo_label,
    "train-target": _cmd_train_target,
    "evaluate": _cmd_evaluate,
    "experiment": _cmd_experiment,
    "sweep": _cmd_sweep,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except HetsegError as exc:
        msg = str(exc).splitlines()[0] if str(exc) else exc.category
        print(f"error: {exc.category}: {msg}", file=sys.stderr)
        return _EXIT_BY_CATEGORY.get(exc.category, 1)


if __name__ == "__main__":
    sys.exit(main())
