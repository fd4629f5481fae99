"""Model checkpoints: one zip archive per model.

The archive holds a ``header.json`` (model kind, configuration, training
iteration, tensor shapes) plus one ``.bin`` per named tensor in the same
little-endian float32 layout as the sample format. Round trips are bit-exact
for float32 models.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .data import DomainSpec
from .errors import DataError, MissingStageError
from .segmentation import Segmenter, SegmenterConfig
from .translation import NetConfig, TranslationModel

FORMAT_VERSION = 1


def save_checkpoint(
    path: Path,
    kind: str,
    config: dict,
    tensors: dict[str, torch.Tensor],
    iteration: int = 0,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "iteration": int(iteration),
        "tensors": {name: list(t.shape) for name, t in tensors.items()},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=1))
        for name, t in tensors.items():
            arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype=np.float32)
            zf.writestr(f"{name}.bin", arr.astype("<f4").tobytes())
    return path


def load_checkpoint(path: Path) -> tuple[str, dict, dict[str, torch.Tensor], int]:
    path = Path(path)
    if not path.exists():
        raise MissingStageError(f"checkpoint missing: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            tensors = {}
            for name, shape in header["tensors"].items():
                raw = zf.read(f"{name}.bin")
                expected = int(np.prod(shape)) * 4 if shape else 4
                if len(raw) != expected:
                    raise DataError(
                        f"{path.name}:{name}: expected {expected} bytes for "
                        f"shape {shape}, got {len(raw)}"
                    )
                arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
                tensors[name] = torch.from_numpy(arr)
    except zipfile.BadZipFile as exc:
        raise DataError(f"{path}: not a valid checkpoint archive") from exc
    return header["kind"], header["config"], tensors, int(header.get("iteration", 0))


def save_translation(path: Path, model: TranslationModel) -> Path:
    config = {
        "net": model.config.to_dict(),
        "source_spec": model.source_spec.to_dict(),
        "target_spec": model.target_spec.to_dict(),
    }
    return save_checkpoint(
        path, "translation", config, model.named_tensors(), model.iteration
    )


def load_translation(path: Path) -> TranslationModel:
    kind, config, tensors, iteration = load_checkpoint(path)
    if kind != "translation":
        raise DataError(f"{path}: expected a translation checkpoint, found {kind!r}")
    model = TranslationModel(
        source_spec=DomainSpec.from_dict(config["source_spec"]),
        target_spec=DomainSpec.from_dict(config["target_spec"]),
        config=NetConfig.from_dict(config["net"]),
    )
    model.load_tensors(tensors)
    model.iteration = iteration
    return model


def save_segmenter(path: Path, seg: Segmenter, iteration: int = 0) -> Path:
    return save_checkpoint(
        path, "segmenter", seg.config.to_dict(), dict(seg.state_dict()), iteration
    )


def load_segmenter(path: Path) -> Segmenter:
    kind, config, tensors, _ = load_checkpoint(path)
    if kind != "segmenter":
        raise DataError(f"{path}: expected a segmenter checkpoint, found {kind!r}")
    seg = Segmenter(SegmenterConfig.from_dict(config))
    seg.load_state_dict(tensors)
    return seg
