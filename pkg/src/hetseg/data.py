"""Data model, on-disk sample format, fold splitting and the synthetic task.

A sample is one multi-channel 2D slice. On disk it is a pair of files:
``<name>.bin`` holds little-endian float32 values in (channel, row, column)
order, ``<name>.json`` is a sidecar with the shape and provenance. Masks are
stored the same way with shape [num_classes, H, W] and values exactly 0.0 or
1.0. A dataset root is a flat directory of such pairs plus ``manifest.json``.

The synthetic task generator stands in for clinical data: both domains are
rendered from one latent "tissue" map through fixed per-channel monotone
nonlinearities, so a content-preserving cross-domain translation exists and
adaptation is learnable at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

MIN_IMAGE_SIDE = 16  # networks need two clean downsamplings
LESION_CONTRAST = 0.3  # latent bump inside lesions; small enough that naive
# translation can lose them, large enough that a source segmenter finds them


@dataclass(frozen=True)
class DomainSpec:
    """Names a domain and fixes its tensor geometry."""

    name: str
    channels: int
    height: int
    width: int
    num_classes: int = 2

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ConfigError(f"domain {self.name}: channels must be >= 1")
        if self.height < 1 or self.width < 1:
            raise ConfigError(f"domain {self.name}: height and width must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"domain {self.name}: num_classes must be >= 2")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def mask_shape(self) -> tuple[int, int, int]:
        return (self.num_classes, self.height, self.width)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "DomainSpec":
        return DomainSpec(
            name=str(d["name"]),
            channels=int(d["channels"]),
            height=int(d["height"]),
            width=int(d["width"]),
            num_classes=int(d["num_classes"]),
        )


@dataclass
class Sample:
    """One 2D slice with an optional one-hot mask.

    ``pseudo`` marks masks produced by the pseudo-labeling stage, whose pixel
    columns may be all-zero (abstained) instead of one-hot.
    """

    image: torch.Tensor
    patient_id: str
    domain: DomainSpec
    mask: torch.Tensor | None = None
    sample_id: str = ""
    pseudo: bool = False
    threshold: float | None = None
    coverage: float | None = None

    def __post_init__(self) -> None:
        if not self.sample_id:
            self.sample_id = self.patient_id
        self.validate()

    def validate(self) -> None:
        if tuple(self.image.shape) != self.domain.image_shape:
            raise DataError(
                f"sample {self.sample_id}: image shape {tuple(self.image.shape)} "
                f"does not match domain {self.domain.name} {self.domain.image_shape}"
            )
        if self.image.dtype != torch.float32:
            raise DataError(f"sample {self.sample_id}: image must be float32")
        if self.mask is not None:
            if tuple(self.mask.shape) != self.domain.mask_shape:
                raise DataError(
                    f"sample {self.sample_id}: mask shape {tuple(self.mask.shape)} "
                    f"does not match {self.domain.mask_shape}"
                )
            vals = torch.unique(self.mask)
            if not all(float(v) in (0.0, 1.0) for v in vals):
                raise DataError(f"sample {self.sample_id}: mask values must be exactly 0.0 or 1.0")
            col = self.mask.sum(dim=0)
            if self.pseudo:
                ok = ((col == 0.0) | (col == 1.0)).all()
                if not ok:
                    raise DataError(
                        f"sample {self.sample_id}: pseudo-mask columns must sum to 0 or 1"
                    )
            elif not (col == 1.0).all():
                raise DataError(f"sample {self.sample_id}: mask columns must be one-hot")

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass
class Dataset:
    """Immutable-after-load collection of samples from one domain."""

    domain: DomainSpec
    samples: list[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx: int) -> Sample:
        return self.samples[idx]

    def patient_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.patient_id, None)
        return list(seen)

    def subset_by_patients(self, patients) -> "Dataset":
        keep = set(patients)
        return Dataset(self.domain, [s for s in self.samples if s.patient_id in keep])

    def without_masks(self) -> "Dataset":
        strip = [
            replace(s, mask=None, pseudo=False, threshold=None, coverage=None)
            for s in self.samples
        ]
        return Dataset(self.domain, strip)

    def all_labeled(self) -> bool:
        return all(s.labeled for s in self.samples)


@dataclass(frozen=True)
class FoldPlan:
    """Patient-level partition into k folds."""

    num_folds: int
    assignment: dict[str, int]

    def __post_init__(self) -> None:
        folds = set(self.assignment.values())
        if folds and (min(folds) < 0 or max(folds) >= self.num_folds):
            raise DataError("fold indices out of range")
        sizes = self.fold_sizes()
        if sizes and max(sizes) - min(sizes) > 1:
            raise DataError(f"fold sizes differ by more than 1: {sizes}")

    def fold_sizes(self) -> list[int]:
        sizes = [0] * self.num_folds
        for f in self.assignment.values():
            sizes[f] += 1
        return sizes

    def patients_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f == fold)

    def patients_not_in(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.assignment.items() if f != fold)


def make_folds(patient_ids: list[str], k: int, seed: int) -> FoldPlan:
    """Shuffle patients deterministically and deal them round-robin into k folds."""
    if k < 2:
        raise ConfigError("make_folds: k must be >= 2")
    if len(set(patient_ids)) != len(patient_ids):
        dupes = sorted({p for p in patient_ids if patient_ids.count(p) > 1})
        raise DataError(f"make_folds: duplicate patient ids {dupes}")
    if len(patient_ids) < k:
        raise DataError(f"make_folds: need at least {k} patients, got {len(patient_ids)}")
    rng = np.random.default_rng(seed)
    order = sorted(patient_ids)
    rng.shuffle(order)
    assignment = {pid: i % k for i, pid in enumerate(order)}
    return FoldPlan(num_folds=k, assignment=assignment)


# ---------------------------------------------------------------------------
# Synthetic heterogeneous task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Configuration of the synthetic stand-in task.

    The last ~25% of target patients form the labeled held-out evaluation
    split; the rest are the unlabeled training split.
    """

    source_spec: DomainSpec
    target_spec: DomainSpec
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (2.5, 5.0)
    channel_mixing_seed: int = 0
    noise_std: float = 0.02
    num_patients_source: int = 20
    num_patients_target: int = 20
    slices_per_patient: int = 2

    def validate(self) -> None:
        src, tgt = self.source_spec, self.target_spec
        if (src.height, src.width) != (tgt.height, tgt.width):
            raise ConfigError("source and target must share height and width")
        if src.height < MIN_IMAGE_SIDE or src.width < MIN_IMAGE_SIDE:
            raise ConfigError(
                f"height and width must be >= {MIN_IMAGE_SIDE} (two downsamplings needed)"
            )
        if src.num_classes != 2 or tgt.num_classes != 2:
            raise ConfigError("synthetic task supports num_classes == 2 only")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ConfigError("lesion_count_range must satisfy 0 <= lo <= hi")
        rlo, rhi = self.lesion_radius_range
        if rlo <= 0 or rhi < rlo:
            raise ConfigError("lesion radii must be strictly positive and ordered")
        if self.channel_mixing_seed < 0:
            raise ConfigError("channel_mixing_seed must be nonnegative")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.num_patients_source < 1 or self.num_patients_target < 1:
            raise ConfigError("patient counts must be positive")
        if self.slices_per_patient < 1:
            raise ConfigError("slices_per_patient must be positive")

    @property
    def num_patients_target_heldout(self) -> int:
        return max(1, math.ceil(self.num_patients_target / 4))

    def to_dict(self) -> dict:
        return {
            "source_spec": self.source_spec.to_dict(),
            "target_spec": self.target_spec.to_dict(),
            "lesion_count_range": list(self.lesion_count_range),
            "lesion_radius_range": list(self.lesion_radius_range),
            "channel_mixing_seed": self.channel_mixing_seed,
            "noise_std": self.noise_std,
            "num_patients_source": self.num_patients_source,
            "num_patients_target": self.num_patients_target,
            "slices_per_patient": self.slices_per_patient,
        }

    @staticmethod
    def from_dict(d: dict) -> "SyntheticTaskConfig":
        return SyntheticTaskConfig(
            source_spec=DomainSpec.from_dict(d["source_spec"]),
            target_spec=DomainSpec.from_dict(d["target_spec"]),
            lesion_count_range=tuple(d["lesion_count_range"]),
            lesion_radius_range=tuple(d["lesion_radius_range"]),
            channel_mixing_seed=int(d["channel_mixing_seed"]),
            noise_std=float(d["noise_std"]),
            num_patients_source=int(d["num_patients_source"]),
            num_patients_target=int(d["num_patients_target"]),
            slices_per_patient=int(d["slices_per_patient"]),
        )


def _latent_slice(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth background field in [0.25, 0.75]."""
    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    field_ = np.zeros((h, w), dtype=np.float64)
    for _ in range(3):
        amp = rng.uniform(0.5, 1.0)
        fu, fv = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += amp * np.cos(2 * np.pi * (fu * hh / h + fv * ww / w) + phase)
    lo, hi = field_.min(), field_.max()
    return 0.25 + 0.5 * (field_ - lo) / (hi - lo + 1e-12)


def _stamp_lesions(
    rng: np.random.Generator, latent: np.ndarray, cfg: SyntheticTaskConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Add elliptical bumps to the latent; return the binary lesion mask."""
    h, w = latent.shape
    n = int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1))
    mask = np.zeros((h, w), dtype=bool)
    hh, ww = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(n):
        ra = rng.uniform(*cfg.lesion_radius_range)
        rb = rng.uniform(*cfg.lesion_radius_range)
        rmax = max(ra, rb)
        ch = rng.uniform(rmax, h - rmax)
        cw = rng.uniform(rmax, w - rmax)
        theta = rng.uniform(0, np.pi)
        dh, dw = hh - ch, ww - cw
        u = dh * np.cos(theta) + dw * np.sin(theta)
        v = -dh * np.sin(theta) + dw * np.cos(theta)
        inside = (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
        mask |= inside
    latent = latent.copy()
    latent[mask] += LESION_CONTRAST
    return latent, mask


@dataclass(frozen=True)
class _ChannelMaps:
    """Fixed per-channel monotone nonlinearities for one task."""

    src_exp: np.ndarray
    src_gain: np.ndarray
    src_off: np.ndarray
    tgt_mid: np.ndarray
    tgt_temp: np.ndarray
    tgt_gain: np.ndarray
    tgt_off: np.ndarray

    @staticmethod
    def draw(rng: np.random.Generator, c_src: int, c_tgt: int) -> "_ChannelMaps":
        return _ChannelMaps(
            src_exp=rng.uniform(0.6, 1.8, c_src),
            src_gain=rng.uniform(0.7, 1.3, c_src),
            src_off=rng.uniform(-0.2, 0.2, c_src),
            tgt_mid=rng.uniform(0.3, 0.8, c_tgt),
            tgt_temp=rng.uniform(0.08, 0.22, c_tgt),
            tgt_gain=rng.uniform(0.7, 1.3, c_tgt),
            tgt_off=rng.uniform(-0.2, 0.2, c_tgt),
        )

    def render_source(self, latent: np.ndarray) -> np.ndarray:
        x = np.clip(latent, 0.0, None)[None, :, :]
        e = self.src_exp[:, None, None]
        return self.src_gain[:, None, None] * x**e + self.src_off[:, None, None]

    def render_target(self, latent: np.ndarray) -> np.ndarray:
        x = latent[None, :, :]
        m = self.tgt_mid[:, None, None]
        t = self.tgt_temp[:, None, None]
        sig = 1.0 / (1.0 + np.exp(-(x - m) / t))
        return self.tgt_gain[:, None, None] * sig + self.tgt_off[:, None, None]


def _render_patient(
    rng: np.random.Generator,
    cfg: SyntheticTaskConfig,
    maps: _ChannelMaps,
    spec: DomainSpec,
    patient_id: str,
    target_style: bool,
) -> list[Sample]:
    samples = []
    h, w = spec.height, spec.width
    for s_idx in range(cfg.slices_per_patient):
        latent = _latent_slice(rng, h, w)
        latent, lesion = _stamp_lesions(rng, latent, cfg)
        if target_style:
            img = maps.render_target(latent)
            gain = 1.0 + 0.15 * rng.standard_normal()
            offset = 0.10 * rng.standard_normal()
            img = gain * img + offset
        else:
            img = maps.render_source(latent)
        if cfg.noise_std > 0:
            img = img + rng.normal(0.0, cfg.noise_std, img.shape)
        mask = np.zeros((2, h, w), dtype=np.float32)
        mask[1] = lesion.astype(np.float32)
        mask[0] = 1.0 - mask[1]
        samples.append(
            Sample(
                image=torch.from_numpy(img.astype(np.float32)),
                mask=torch.from_numpy(mask),
                patient_id=patient_id,
                domain=spec,
                sample_id=f"{patient_id}_s{s_idx:02d}",
            )
        )
    return samples


def _generate_all(cfg: SyntheticTaskConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Fully labeled (source, target-train, target-heldout) datasets."""
    cfg.validate()
    root_ss = np.random.SeedSequence(cfg.channel_mixing_seed)
    chan_ss, src_ss, tgt_ss = root_ss.spawn(3)
    maps = _ChannelMaps.draw(
        np.random.default_rng(chan_ss), cfg.source_spec.channels, cfg.target_spec.channels
    )

    source = Dataset(cfg.source_spec)
    for i, child in enumerate(src_ss.spawn(cfg.num_patients_source)):
        pid = f"src{i:03d}"
        source.samples.extend(
            _render_patient(np.random.default_rng(child), cfg, maps, cfg.source_spec, pid, False)
        )

    n_held = cfg.num_patients_target_heldout
    n_train = cfg.num_patients_target - n_held
    if n_train < 1:
        raise ConfigError(
            "num_patients_target too small: no unlabeled training patients remain "
            f"after holding out {n_held}"
        )
    tgt_train = Dataset(cfg.target_spec)
    tgt_held = Dataset(cfg.target_spec)
    for i, child in enumerate(tgt_ss.spawn(cfg.num_patients_target)):
        pid = f"tgt{i:03d}"
        dest = tgt_train if i < n_train else tgt_held
        dest.samples.extend(
            _render_patient(np.random.default_rng(child), cfg, maps, cfg.target_spec, pid, True)
        )
    return source, tgt_train, tgt_held


def generate_synthetic_task(cfg: SyntheticTaskConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Generate (source labeled, target unlabeled, target held-out labeled).

    Pure function of cfg: the same config yields bit-identical datasets.
    """
    source, tgt_train, tgt_held = _generate_all(cfg)
    return source, tgt_train.without_masks(), tgt_held


def synthetic_target_labels(cfg: SyntheticTaskConfig) -> Dataset:
    """Labeled twin of the unlabeled target training split.

    Only the oracle and semi-supervised baselines may consume this; the
    unsupervised pipelines never see it.
    """
    _, tgt_train, _ = _generate_all(cfg)
    return tgt_train


def generate_task_with_target_labels(cfg: SyntheticTaskConfig) -> tuple[Dataset, Dataset]:
    """(source labeled, all target patients labeled) for cross-validation.

    The experiment harness folds the full target cohort itself: each fold's
    patients become the evaluation set and the rest are stripped of masks for
    unsupervised training.
    """
    source, tgt_train, tgt_held = _generate_all(cfg)
    target_all = Dataset(cfg.target_spec, tgt_train.samples + tgt_held.samples)
    return source, target_all


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------


def _write_tensor(path: Path, tensor: torch.Tensor) -> None:
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np.float32)
    path.write_bytes(arr.astype("<f4").tobytes())


def _read_tensor(path: Path, shape: tuple[int, ...]) -> torch.Tensor:
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise DataError(
            f"{path.name}: expected {expected} bytes for shape {list(shape)}, got {len(raw)}"
        )
    arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return torch.from_numpy(arr)


def save_sample(sample: Sample, root: Path) -> tuple[Path, Path]:
    """Write ``<sample_id>.bin`` + ``.json`` (and a mask pair when labeled)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    sample.validate()
    stem = sample.sample_id
    bin_path = root / f"{stem}.bin"
    json_path = root / f"{stem}.json"
    _write_tensor(bin_path, sample.image)
    mask_rel = None
    if sample.mask is not None:
        mask_rel = f"{stem}_mask.bin"
        _write_tensor(root / mask_rel, sample.mask)
        mask_meta = {
            "shape": list(sample.mask.shape),
            "patient_id": sample.patient_id,
            "domain": sample.domain.name,
            "mask": None,
        }
        if sample.pseudo:
            mask_meta["pseudo"] = True
            mask_meta["threshold"] = sample.threshold
            mask_meta["coverage"] = sample.coverage
        (root / f"{stem}_mask.json").write_text(json.dumps(mask_meta, indent=1))
    meta = {
        "shape": list(sample.image.shape),
        "patient_id": sample.patient_id,
        "domain": sample.domain.name,
        "mask": mask_rel,
    }
    json_path.write_text(json.dumps(meta, indent=1))
    return bin_path, json_path


def save_dataset(dataset: Dataset, root: Path) -> Path:
    """Write every sample plus the dataset manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stems = []
    for sample in dataset.samples:
        save_sample(sample, root)
        stems.append(sample.sample_id)
    manifest = {
        "format_version": 1,
        "domain": dataset.domain.to_dict(),
        "samples": sorted(stems),
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def _load_sample(root: Path, stem: str, domain: DomainSpec) -> Sample:
    json_path = root / f"{stem}.json"
    if not json_path.exists():
        raise DataError(f"{json_path.name}: sidecar missing")
    meta = json.loads(json_path.read_text())
    shape = tuple(int(v) for v in meta["shape"])
    image = _read_tensor(root / f"{stem}.bin", shape)
    mask = None
    pseudo = False
    threshold = coverage = None
    if meta.get("mask"):
        mask_bin = root / meta["mask"]
        mask_json = mask_bin.with_suffix(".json")
        if not mask_bin.exists():
            raise DataError(f"{mask_bin.name}: mask file missing")
        mask_meta = json.loads(mask_json.read_text()) if mask_json.exists() else {}
        mask_shape = tuple(int(v) for v in mask_meta.get("shape", domain.mask_shape))
        mask = _read_tensor(mask_bin, mask_shape)
        pseudo = bool(mask_meta.get("pseudo", False))
        threshold = mask_meta.get("threshold")
        coverage = mask_meta.get("coverage")
    return Sample(
        image=image,
        mask=mask,
        patient_id=str(meta["patient_id"]),
        domain=domain,
        sample_id=stem,
        pseudo=pseudo,
        threshold=threshold,
        coverage=coverage,
    )


def load_dataset(root: Path) -> Dataset:
    """Load a dataset directory; samples come back ordered by filename."""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not root.exists():
        raise DataError(f"dataset root {root} does not exist")
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: manifest missing")
    manifest = json.loads(manifest_path.read_text())
    domain = DomainSpec.from_dict(manifest["domain"])
    samples = [_load_sample(root, stem, domain) for stem in sorted(manifest["samples"])]
    return Dataset(domain, samples)
