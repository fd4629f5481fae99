"""Run configuration: JSON files, layered presets, schema validation.

A config file is a JSON object layered on top of a named preset (``desk`` by
default, ``paper`` for the full-scale training schedule). Validation is
aggregated: every violation is reported with its key path rather than just
the first one.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import DomainSpec, SyntheticTaskConfig
from .errors import ConfigError
from .experiments import ExperimentPlan
from .losses import LossWeights
from .pipelines import BASELINE_IDS, TrainConfig
from .pseudolabel import StylePolicy
from .translation import NetConfig

RUN_ROOT_ENV = "HETSEG_RUN_ROOT"

_DESK = {
    "seed": 0,
    "deterministic": True,
    "output_root": "runs",
    "task": {
        "source_spec": {"name": "source", "channels": 5, "height": 32, "width": 32,
                        "num_classes": 2},
        "target_spec": {"name": "target", "channels": 15, "height": 32, "width": 32,
                        "num_classes": 2},
        "lesion_count_range": [1, 3],
        "lesion_radius_range": [2.5, 5.5],
        "channel_mixing_seed": 7,
        "noise_std": 0.02,
        "num_patients_source": 20,
        "num_patients_target": 20,
        "slices_per_patient": 2,
    },
    "net": {
        "base_dim": 16,
        "content_channels": 64,
        "downsample_factor": 4,
        "n_res_encoder": 2,
        "n_res_decoder": 2,
        "style_dim": 8,
        "mlp_hidden": 32,
        "disc_base_dim": 16,
        "disc_layers": 3,
        "norm_eps": 1e-5,
        "least_squares_gan": False,
    },
    "seg_base_dim": 16,
    "loss_weights": {"gan": 1.0, "image": 10.0, "content": 1.0, "style": 1.0,
                     "cycle": 10.0, "semantic": 10.0},
    "source_train": {"optimizer": "sgd", "learning_rate": 0.05, "batch_size": 8,
                     "iterations": 500},
    "translation_train": {"optimizer": "adam", "learning_rate": 1e-4, "batch_size": 8,
                          "iterations": 2000},
    "target_train": {"optimizer": "sgd", "learning_rate": 0.05, "batch_size": 8,
                     "iterations": 500},
    "pseudo": {"threshold": 0.8, "style_policy": "zeros", "draws": 8},
    "experiment": {
        "baseline": "viii",
        "num_folds": 5,
        "seeds": [0],
        "eval_folds": None,
        "fractions": [0.0, 0.25, 0.5, 1.0],
        "allow_channel_adapter": False,
    },
}

_PAPER_OVERRIDES = {
    "source_train": {"optimizer": "sgd", "learning_rate": 0.05, "batch_size": 32,
                     "iterations": 10_000},
    "translation_train": {"optimizer": "adam", "learning_rate": 1e-4, "batch_size": 32,
                          "iterations": 50_000},
    "target_train": {"optimizer": "sgd", "learning_rate": 0.05, "batch_size": 32,
                     "iterations": 10_000},
}

PRESETS = {
    "desk": _DESK,
    "paper": None,  # built below
}


def _deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PRESETS["paper"] = _deep_merge(_DESK, _PAPER_OVERRIDES)


@dataclass
class ExperimentSettings:
    baseline: str = "viii"
    num_folds: int = 5
    seeds: tuple[int, ...] = (0,)
    eval_folds: tuple[int, ...] | None = None
    fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0)
    allow_channel_adapter: bool = False


@dataclass
class RunConfig:
    """Fully resolved run configuration."""

    preset: str
    seed: int
    deterministic: bool
    output_root: Path
    task: SyntheticTaskConfig
    net: NetConfig
    seg_base_dim: int
    loss_weights: LossWeights
    source_train: TrainConfig
    translation_train: TrainConfig
    target_train: TrainConfig
    pseudo_threshold: float
    style_policy: StylePolicy
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    def resolved_dict(self) -> dict:
        """Echo of the full configuration, re-parseable by validate_config."""
        return {
            "preset": self.preset,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "output_root": str(self.output_root),
            "task": self.task.to_dict(),
            "net": self.net.to_dict(),
            "seg_base_dim": self.seg_base_dim,
            "loss_weights": self.loss_weights.to_dict(),
            "source_train": self.source_train.to_dict(),
            "translation_train": self.translation_train.to_dict(),
            "target_train": self.target_train.to_dict(),
            "pseudo": {
                "threshold": self.pseudo_threshold,
                "style_policy": self.style_policy.kind,
                "draws": self.style_policy.draws,
            },
            "experiment": {
                "baseline": self.experiment.baseline,
                "num_folds": self.experiment.num_folds,
                "seeds": list(self.experiment.seeds),
                "eval_folds": list(self.experiment.eval_folds)
                if self.experiment.eval_folds is not None else None,
                "fractions": list(self.experiment.fractions),
                "allow_channel_adapter": self.experiment.allow_channel_adapter,
            },
        }

    def run_root(self) -> Path:
        env = os.environ.get(RUN_ROOT_ENV)
        return Path(env) if env else Path(self.output_root)

    def make_plan(self, baseline: str | None = None) -> ExperimentPlan:
        return ExperimentPlan(
            baseline=baseline or self.experiment.baseline,
            task=self.task,
            source_train=self.source_train,
            translation_train=self.translation_train,
            target_train=self.target_train,
            num_folds=self.experiment.num_folds,
            seeds=tuple(self.experiment.seeds),
            eval_folds=self.experiment.eval_folds,
            allow_channel_adapter=self.experiment.allow_channel_adapter,
            net=self.net,
            style_policy=self.style_policy,
            seg_base_dim=self.seg_base_dim,
            deterministic=self.deterministic,
        )


_TOP_KEYS = {
    "preset", "seed", "deterministic", "output_root", "task", "net", "seg_base_dim",
    "loss_weights", "source_train", "translation_train", "target_train", "pseudo",
    "experiment",
}
_TRAIN_KEYS = {
    "optimizer", "learning_rate", "batch_size", "iterations", "val_fraction",
    "val_every", "momentum", "saturating_gan", "pslab_mask_abstained",
    "entropy_reduction", "stage", "seed", "pseudo_threshold", "loss_weights",
}


def _check_unknown(d: dict, allowed: set, path: str, errors: list[str]) -> None:
    for k in d:
        if k not in allowed:
            errors.append(f"{path}{k}: unknown key")


def validate_config(text: str) -> tuple[RunConfig | None, list[str]]:
    """Parse and validate a JSON config; returns (config, errors).

    On any error the config is None and every violation is listed with its
    key path.
    """
    errors: list[str] = []
    text = text.strip()
    if not text:
        raw: dict = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            return None, [f"config: invalid JSON: {exc}"]
    if not isinstance(raw, dict):
        return None, ["config: top level must be a JSON object"]

    preset_name = raw.get("preset", "desk")
    if preset_name not in PRESETS:
        return None, [f"preset: unknown preset {preset_name!r}; expected one of "
                      f"{sorted(PRESETS)}"]
    merged = _deep_merge(PRESETS[preset_name], {k: v for k, v in raw.items() if k != "preset"})
    _check_unknown(merged, _TOP_KEYS - {"preset"}, "", errors)

    def section(name: str) -> dict:
        v = merged.get(name, {})
        if not isinstance(v, dict):
            errors.append(f"{name}: must be an object")
            return {}
        return v

    # scalars
    seed = merged.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or abs(seed) >= 2**63:
        errors.append("seed: must be a 64-bit integer")
        seed = 0
    deterministic = merged.get("deterministic", True)
    if not isinstance(deterministic, bool):
        errors.append("deterministic: must be a boolean")
        deterministic = True
    output_root = merged.get("output_root", "runs")
    if not isinstance(output_root, str):
        errors.append("output_root: must be a string path")
        output_root = "runs"
    seg_base_dim = merged.get("seg_base_dim", 16)
    if not isinstance(seg_base_dim, int) or seg_base_dim < 8:
        errors.append("seg_base_dim: must be an integer >= 8")
        seg_base_dim = 16

    # loss weights
    weights = None
    lw = section("loss_weights")
    _check_unknown(lw, {"gan", "image", "content", "style", "cycle", "semantic"},
                   "loss_weights.", errors)
    try:
        weights = LossWeights(**{k: v for k, v in lw.items()
                                 if k in ("gan", "image", "content", "style", "cycle",
                                          "semantic")})
    except ConfigError as exc:
        errors.extend(exc.errors)
    except TypeError as exc:
        errors.append(f"loss_weights: {exc}")

    # task
    task = None
    try:
        task = SyntheticTaskConfig.from_dict(section("task"))
        task.validate()
    except ConfigError as exc:
        errors.extend(f"task.{e}" for e in exc.errors)
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"task: {exc!r}")

    # networks
    net = None
    try:
        net = NetConfig.from_dict(section("net"))
    except ConfigError as exc:
        errors.extend(f"net.{e}" for e in exc.errors)
    except (KeyError, TypeError, ValueError) as exc:
        errors.append(f"net: {exc!r}")

    # training sections
    def train_section(name: str, stage: str) -> TrainConfig | None:
        d = section(name)
        _check_unknown(d, _TRAIN_KEYS, f"{name}.", errors)
        pseudo = section("pseudo")
        try:
            return TrainConfig(
                stage=stage,
                optimizer=d.get("optimizer", "adam"),
                learning_rate=float(d.get("learning_rate", 1e-4)),
                batch_size=int(d.get("batch_size", 32)),
                iterations=int(d.get("iterations", 1000)),
                loss_weights=weights or LossWeights(),
                pseudo_threshold=float(pseudo.get("threshold", 0.8)),
                seed=seed,
                val_fraction=float(d.get("val_fraction", 0.2)),
                val_every=int(d.get("val_every", 50)),
                momentum=float(d.get("momentum", 0.9)),
                saturating_gan=bool(d.get("saturating_gan", True)),
                pslab_mask_abstained=bool(d.get("pslab_mask_abstained", False)),
                entropy_reduction=str(d.get("entropy_reduction", "mean")),
            )
        except ConfigError as exc:
            errors.extend(f"{name}.{e}" for e in exc.errors)
        except (TypeError, ValueError) as exc:
            errors.append(f"{name}: {exc!r}")
        return None

    source_train = train_section("source_train", "segmentation")
    translation_train = train_section("translation_train", "translation")
    target_train = train_section("target_train", "segmentation")

    # pseudo-labeling
    pseudo = section("pseudo")
    _check_unknown(pseudo, {"threshold", "style_policy", "draws"}, "pseudo.", errors)
    threshold = pseudo.get("threshold", 0.8)
    if not isinstance(threshold, (int, float)) or not 0.5 < float(threshold) < 1.0:
        errors.append("pseudo.threshold: must lie in (0.5, 1) for two classes")
        threshold = 0.8
    style_policy = None
    try:
        style_policy = StylePolicy(
            kind=pseudo.get("style_policy", "zeros"),
            draws=int(pseudo.get("draws", 8)),
            seed=seed,
        )
    except ConfigError as exc:
        errors.extend(f"pseudo.{e}" for e in exc.errors)

    # experiment settings
    exp = section("experiment")
    _check_unknown(exp, {"baseline", "num_folds", "seeds", "eval_folds", "fractions",
                         "allow_channel_adapter"}, "experiment.", errors)
    baseline = exp.get("baseline", "viii")
    if baseline not in BASELINE_IDS:
        errors.append(
            f"experiment.baseline: unknown baseline {baseline!r}; expected one of "
            f"{list(BASELINE_IDS)}"
        )
    num_folds = exp.get("num_folds", 5)
    if not isinstance(num_folds, int) or num_folds < 2:
        errors.append("experiment.num_folds: must be an integer >= 2")
        num_folds = 5
    seeds = exp.get("seeds", [0])
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds)):
        errors.append("experiment.seeds: must be a non-empty list of integers")
        seeds = [0]
    eval_folds = exp.get("eval_folds")
    if eval_folds is not None:
        if (not isinstance(eval_folds, list)
                or not all(isinstance(f, int) and 0 <= f < num_folds for f in eval_folds)):
            errors.append("experiment.eval_folds: must be null or a list of valid fold indices")
            eval_folds = None
    fractions = exp.get("fractions", [0.0, 0.25, 0.5, 1.0])
    if (not isinstance(fractions, list)
            or not all(isinstance(f, (int, float)) and 0 <= f <= 1 for f in fractions)
            or sorted(fractions) != fractions):
        errors.append("experiment.fractions: must be a sorted list of reals in [0, 1]")
        fractions = [0.0, 1.0]
    allow_adapter = exp.get("allow_channel_adapter", False)
    if not isinstance(allow_adapter, bool):
        errors.append("experiment.allow_channel_adapter: must be a boolean")
        allow_adapter = False

    if errors:
        return None, errors
    config = RunConfig(
        preset=preset_name,
        seed=seed,
        deterministic=deterministic,
        output_root=Path(output_root),
        task=task,
        net=net,
        seg_base_dim=seg_base_dim,
        loss_weights=weights,
        source_train=source_train,
        translation_train=translation_train,
        target_train=target_train,
        pseudo_threshold=float(threshold),
        style_policy=style_policy,
        experiment=ExperimentSettings(
            baseline=baseline,
            num_folds=num_folds,
            seeds=tuple(seeds),
            eval_folds=tuple(eval_folds) if eval_folds is not None else None,
            fractions=tuple(float(f) for f in fractions),
            allow_channel_adapter=allow_adapter,
        ),
    )
    return config, []


def load_config(path: Path | None = None, preset: str | None = None,
                overrides: dict | None = None) -> RunConfig:
    """Load a config file (or a bare preset) and apply flag overrides."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text()) if p.read_text().strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON: {exc}")
    if preset is not None:
        raw["preset"] = preset
    if overrides:
        raw = _deep_merge(raw, overrides)
    config, errors = validate_config(json.dumps(raw))
    if config is None:
        raise ConfigError(errors)
    return config
