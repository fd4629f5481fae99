"""Encoder-decoder segmentation network with per-pixel softmax output.

The encoder is a shallow residual network (stem plus three strided stages at
the desk preset); the decoder mirrors it with nearest-neighbor upsampling and
convolutions. Group normalization keeps behavior independent of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, DataError
from .seeding import derive_seed


@dataclass(frozen=True)
class SegmenterConfig:
    in_channels: int
    num_classes: int = 2
    base_dim: int = 16
    num_down: int = 3
    norm_groups: int = 8
    norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        if self.in_channels < 1:
            raise ConfigError("segmenter: in_channels must be positive")
        if self.num_classes < 2:
            raise ConfigError("segmenter: num_classes must be >= 2")
        if self.base_dim < self.norm_groups or self.base_dim % self.norm_groups:
            raise ConfigError("segmenter: base_dim must be a multiple of norm_groups")
        if self.num_down < 1:
            raise ConfigError("segmenter: num_down must be >= 1")

    @property
    def total_stride(self) -> int:
        return 2**self.num_down

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_dim": self.base_dim,
            "num_down": self.num_down,
            "norm_groups": self.norm_groups,
            "norm_eps": self.norm_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "SegmenterConfig":
        return SegmenterConfig(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            base_dim=int(d["base_dim"]),
            num_down=int(d["num_down"]),
            norm_groups=int(d["norm_groups"]),
            norm_eps=float(d["norm_eps"]),
        )


class _ResBlock(nn.Module):
    def __init__(self, dim: int, groups: int, eps: float):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.GroupNorm(groups, dim, eps=eps),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, padding=1),
            nn.GroupNorm(groups, dim, eps=eps),
        )
        self.act = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.act(x + self.block(x))


class Segmenter(nn.Module):
    """Maps [in_channels, H, W] to a per-pixel probability simplex."""

    def __init__(self, config: SegmenterConfig):
        super().__init__()
        self.config = config
        g, eps = config.norm_groups, config.norm_eps
        dim = config.base_dim
        enc: list[nn.Module] = [
            nn.Conv2d(config.in_channels, dim, 3, padding=1),
            nn.GroupNorm(g, dim, eps=eps),
            nn.ReLU(inplace=True),
        ]
        for _ in range(config.num_down):
            enc += [
                _ResBlock(dim, g, eps),
                nn.Conv2d(dim, dim * 2, 3, stride=2, padding=1),
                nn.GroupNorm(g, dim * 2, eps=eps),
                nn.ReLU(inplace=True),
            ]
            dim *= 2
        enc += [_ResBlock(dim, g, eps)]
        self.encoder = nn.Sequential(*enc)
        dec: list[nn.Module] = []
        for _ in range(config.num_down):
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(dim, dim // 2, 3, padding=1),
                nn.GroupNorm(g, dim // 2, eps=eps),
                nn.ReLU(inplace=True),
            ]
            dim //= 2
        dec += [nn.Conv2d(dim, config.num_classes, 1)]
        self.decoder = nn.Sequential(*dec)

    def _check_input(self, x: torch.Tensor) -> None:
        channels = x.shape[0] if x.dim() == 3 else x.shape[1]
        if channels != self.config.in_channels:
            raise DataError(
                f"segmenter expects {self.config.in_channels} input channels, got {channels}"
            )
        h, w = x.shape[-2], x.shape[-1]
        stride = self.config.total_stride
        if h % stride or w % stride:
            raise DataError(
                f"segmenter input {h}x{w} must be divisible by the total stride {stride}"
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        logits = self.decoder(self.encoder(x))
        probs = torch.softmax(logits, dim=1)
        return probs.squeeze(0) if squeeze else probs


def build_segmenter(config: SegmenterConfig, seed: int = 0) -> Segmenter:
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "segmenter-init"))
        return Segmenter(config)


def predict_soft(seg: Segmenter, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities, without building an autograd graph."""
    with torch.no_grad():
        return seg(image)


def predict_hard(seg: Segmenter, image: torch.Tensor) -> torch.Tensor:
    """One-hot mask via per-pixel argmax; exact ties break toward the lower
    class index."""
    probs = predict_soft(seg, image)
    return hard_from_soft(probs)


def hard_from_soft(probs: torch.Tensor) -> torch.Tensor:
    """Argmax a probability map into a one-hot mask, lowest index on ties."""
    channel_dim = 0 if probs.dim() == 3 else 1
    num_classes = probs.shape[channel_dim]
    top = probs.max(dim=channel_dim, keepdim=True).values
    is_top = (probs == top).to(probs.dtype)
    # weight ties so the smallest class index wins the argmax
    shape = [1] * probs.dim()
    shape[channel_dim] = num_classes
    weights = torch.arange(num_classes, 0, -1, dtype=probs.dtype).reshape(shape)
    idx = (is_top * weights).argmax(dim=channel_dim, keepdim=True)
    hard = torch.zeros_like(probs)
    hard.scatter_(channel_dim, idx, 1.0)
    return hard
