"""Stochastic cross-domain translation networks.

Per-domain content encoders, style encoders and AdaIN decoders plus
patch discriminators. The two content encoders share a latent space: both
emit content codes of identical shape, downsampled spatially by
``downsample_factor``. Style codes are low-dimensional vectors with a
standard normal prior; decoding the same content with different style draws
yields one-to-many translation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import DomainSpec
from .errors import ConfigError, DataError
from .seeding import derive_seed

INSTANCE_NORM_EPS = 1e-5
SCORE_CLAMP = 1e-6  # keeps sigmoid scores strictly inside (0, 1) in float32


@dataclass(frozen=True)
class NetConfig:
    """Widths and depths of all translation networks."""

    base_dim: int = 16
    content_channels: int = 64
    downsample_factor: int = 4
    n_res_encoder: int = 2
    n_res_decoder: int = 2
    style_dim: int = 8
    mlp_hidden: int = 32
    disc_base_dim: int = 16
    disc_layers: int = 3
    norm_eps: float = INSTANCE_NORM_EPS
    least_squares_gan: bool = False

    def __post_init__(self) -> None:
        f = self.downsample_factor
        if f < 2 or (f & (f - 1)) != 0:
            raise ConfigError("downsample_factor must be a power of two >= 2")
        for name in ("base_dim", "content_channels", "style_dim", "mlp_hidden",
                     "disc_base_dim", "disc_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"net config: {name} must be positive")

    @property
    def n_downsample(self) -> int:
        return int(math.log2(self.downsample_factor))

    @property
    def patch_factor(self) -> int:
        return 2**self.disc_layers

    def to_dict(self) -> dict:
        return {
            "base_dim": self.base_dim,
            "content_channels": self.content_channels,
            "downsample_factor": self.downsample_factor,
            "n_res_encoder": self.n_res_encoder,
            "n_res_decoder": self.n_res_decoder,
            "style_dim": self.style_dim,
            "mlp_hidden": self.mlp_hidden,
            "disc_base_dim": self.disc_base_dim,
            "disc_layers": self.disc_layers,
            "norm_eps": self.norm_eps,
            "least_squares_gan": self.least_squares_gan,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetConfig":
        return NetConfig(
            base_dim=int(d["base_dim"]),
            content_channels=int(d["content_channels"]),
            downsample_factor=int(d["downsample_factor"]),
            n_res_encoder=int(d["n_res_encoder"]),
            n_res_decoder=int(d["n_res_decoder"]),
            style_dim=int(d["style_dim"]),
            mlp_hidden=int(d["mlp_hidden"]),
            disc_base_dim=int(d["disc_base_dim"]),
            disc_layers=int(d["disc_layers"]),
            norm_eps=float(d["norm_eps"]),
            least_squares_gan=bool(d["least_squares_gan"]),
        )


def instance_norm_2d(x: torch.Tensor, eps: float = INSTANCE_NORM_EPS) -> torch.Tensor:
    """Per-sample, per-channel normalization over the spatial axes
    (biased variance)."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


class AdaIN2d(nn.Module):
    """Adaptive instance normalization: gamma * IN(x) + beta with per-channel
    affine parameters supplied externally (computed from a style code)."""

    def __init__(self, num_channels: int, eps: float = INSTANCE_NORM_EPS):
        super().__init__()
        self.num_channels = num_channels
        self.eps = eps

    def forward(self, x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
        normed = instance_norm_2d(x, self.eps)
        gamma = gamma.reshape(-1, self.num_channels, 1, 1)
        beta = beta.reshape(-1, self.num_channels, 1, 1)
        return gamma * normed + beta


class ResBlock(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim, eps=eps),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(dim, dim, 3),
            nn.InstanceNorm2d(dim, eps=eps),
        )

    def forward(self, x):
        return x + self.block(x)


class AdaINResBlock(nn.Module):
    """Residual block whose normalizations are style-conditioned."""

    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv1 = nn.Conv2d(dim, dim, 3)
        self.conv2 = nn.Conv2d(dim, dim, 3)
        self.adain1 = AdaIN2d(dim, eps)
        self.adain2 = AdaIN2d(dim, eps)

    def forward(self, x, params: torch.Tensor):
        dim = self.conv1.out_channels
        g1, b1, g2, b2 = params.split([dim, dim, dim, dim], dim=1)
        out = self.adain1(self.conv1(self.pad(x)), g1, b1)
        out = F.relu(out)
        out = self.adain2(self.conv2(self.pad(out)), g2, b2)
        return x + out


class ContentEncoder(nn.Module):
    """Convolutions and residual blocks with instance normalization; maps an
    image to a spatial, domain-invariant content code."""

    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        dim = cfg.base_dim
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, dim, 7),
            nn.InstanceNorm2d(dim, eps=cfg.norm_eps),
            nn.ReLU(inplace=True),
        ]
        for _ in range(cfg.n_downsample):
            layers += [
                nn.Conv2d(dim, dim * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(dim * 2, eps=cfg.norm_eps),
                nn.ReLU(inplace=True),
            ]
            dim *= 2
        if dim != cfg.content_channels:
            layers += [
                nn.Conv2d(dim, cfg.content_channels, 1),
                nn.InstanceNorm2d(cfg.content_channels, eps=cfg.norm_eps),
                nn.ReLU(inplace=True),
            ]
            dim = cfg.content_channels
        layers += [ResBlock(dim, cfg.norm_eps) for _ in range(cfg.n_res_encoder)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class StyleEncoder(nn.Module):
    """Convolutional layers followed by fully connected layers; no instance
    normalization so that global image statistics survive into the code."""

    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        dim = cfg.base_dim
        layers: list[nn.Module] = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, dim, 7),
            nn.ReLU(inplace=True),
        ]
        for _ in range(cfg.n_downsample):
            layers += [nn.Conv2d(dim, dim * 2, 4, stride=2, padding=1), nn.ReLU(inplace=True)]
            dim *= 2
        layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten()]
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Sequential(
            nn.Linear(dim, dim),
            nn.ReLU(inplace=True),
            nn.Linear(dim, cfg.style_dim),
        )

    def forward(self, x):
        return self.fc(self.conv(x))


class Decoder(nn.Module):
    """AdaIN residual blocks followed by upsampling convolutions.

    A small fully connected mapper (one hidden layer) turns the style code
    into the per-channel scales and shifts of every AdaIN layer; scales are
    parameterized as 1 + delta so the decoder starts near identity styling.
    """

    def __init__(self, out_channels: int, cfg: NetConfig):
        super().__init__()
        dim = cfg.content_channels
        self.res_blocks = nn.ModuleList(
            [AdaINResBlock(dim, cfg.norm_eps) for _ in range(cfg.n_res_decoder)]
        )
        self.params_per_block = 4 * dim
        n_params = self.params_per_block * cfg.n_res_decoder
        self.mlp = nn.Sequential(
            nn.Linear(cfg.style_dim, cfg.mlp_hidden),
            nn.ReLU(inplace=True),
            nn.Linear(cfg.mlp_hidden, n_params),
        )
        nn.init.normal_(self.mlp[-1].weight, std=0.01)
        nn.init.zeros_(self.mlp[-1].bias)
        up: list[nn.Module] = []
        for _ in range(cfg.n_downsample):
            up += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(dim, dim // 2, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
            dim //= 2
        up += [nn.ReflectionPad2d(2), nn.Conv2d(dim, out_channels, 5)]
        self.up = nn.Sequential(*up)
        self.n_res = cfg.n_res_decoder

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        params = self.mlp(style)
        x = content
        for i, block in enumerate(self.res_blocks):
            p = params[:, i * self.params_per_block : (i + 1) * self.params_per_block]
            dim = block.conv1.out_channels
            g1, b1, g2, b2 = p.split([dim, dim, dim, dim], dim=1)
            p = torch.cat([1.0 + g1, b1, 1.0 + g2, b2], dim=1)
            x = block(x, p)
        return self.up(x)


class PatchDiscriminator(nn.Module):
    """Stacked strided convolutions ending in a per-patch probability map.

    Scores are squashed through a sigmoid and clamped a hair inside (0, 1)
    so that the log-form adversarial loss stays finite in float32.
    """

    def __init__(self, in_channels: int, cfg: NetConfig):
        super().__init__()
        dim = cfg.disc_base_dim
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, dim, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for _ in range(cfg.disc_layers - 1):
            layers += [
                nn.Conv2d(dim, dim * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(dim * 2, eps=cfg.norm_eps),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            dim *= 2
        layers += [nn.Conv2d(dim, 1, 3, padding=1)]
        self.model = nn.Sequential(*layers)
        self.least_squares = cfg.least_squares_gan

    def forward(self, x):
        logits = self.model(x)
        if self.least_squares:
            return logits
        return torch.sigmoid(logits).clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise DataError(f"expected [C,H,W] or [B,C,H,W], got {tuple(x.shape)}")


@dataclass
class TranslationModel:
    """The six translation networks plus the two discriminators."""

    source_spec: DomainSpec
    target_spec: DomainSpec
    config: NetConfig
    content_encoder: dict[str, ContentEncoder] = field(init=False)
    style_encoder: dict[str, StyleEncoder] = field(init=False)
    decoder: dict[str, Decoder] = field(init=False)
    discriminator: dict[str, PatchDiscriminator] = field(init=False)
    iteration: int = 0

    def __post_init__(self) -> None:
        cfg = self.config
        chans = {"source": self.source_spec.channels, "target": self.target_spec.channels}
        self.content_encoder = {d: ContentEncoder(c, cfg) for d, c in chans.items()}
        self.style_encoder = {d: StyleEncoder(c, cfg) for d, c in chans.items()}
        self.decoder = {d: Decoder(c, cfg) for d, c in chans.items()}
        self.discriminator = {d: PatchDiscriminator(c, cfg) for d, c in chans.items()}

    # -- plumbing ----------------------------------------------------------

    def _spec(self, domain: str) -> DomainSpec:
        if domain == "source":
            return self.source_spec
        if domain == "target":
            return self.target_spec
        raise DataError(f"unknown domain {domain!r}; expected 'source' or 'target'")

    def _check_channels(self, x: torch.Tensor, domain: str, op: str) -> None:
        spec = self._spec(domain)
        channels = x.shape[0] if x.dim() == 3 else x.shape[1]
        if channels != spec.channels:
            raise DataError(
                f"{op}: input has {channels} channels but domain "
                f"{spec.name!r} expects {spec.channels}"
            )

    def generator_modules(self) -> list[nn.Module]:
        return [
            *self.content_encoder.values(),
            *self.style_encoder.values(),
            *self.decoder.values(),
        ]

    def discriminator_modules(self) -> list[nn.Module]:
        return list(self.discriminator.values())

    def all_modules(self) -> list[nn.Module]:
        return self.generator_modules() + self.discriminator_modules()

    def generator_parameters(self):
        for m in self.generator_modules():
            yield from m.parameters()

    def discriminator_parameters(self):
        for m in self.discriminator_modules():
            yield from m.parameters()

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out: dict[str, torch.Tensor] = {}
        groups = {
            "content_encoder": self.content_encoder,
            "style_encoder": self.style_encoder,
            "decoder": self.decoder,
            "discriminator": self.discriminator,
        }
        for gname, group in groups.items():
            for domain, module in group.items():
                for pname, tensor in module.state_dict().items():
                    out[f"{gname}.{domain}.{pname}"] = tensor
        return out

    def load_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        groups = {
            "content_encoder": self.content_encoder,
            "style_encoder": self.style_encoder,
            "decoder": self.decoder,
            "discriminator": self.discriminator,
        }
        for gname, group in groups.items():
            for domain, module in group.items():
                prefix = f"{gname}.{domain}."
                state = {
                    k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)
                }
                module.load_state_dict(state)

    def freeze(self) -> None:
        for m in self.all_modules():
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    # -- operations ---------------------------------------------------------

    def encode_content(self, x: torch.Tensor, domain: str) -> torch.Tensor:
        self._check_channels(x, domain, "encode_content")
        xb, squeeze = _as_batch(x)
        c = self.content_encoder[domain](xb)
        return c.squeeze(0) if squeeze else c

    def encode_style(self, x: torch.Tensor, domain: str) -> torch.Tensor:
        self._check_channels(x, domain, "encode_style")
        xb, squeeze = _as_batch(x)
        s = self.style_encoder[domain](xb)
        return s.squeeze(0) if squeeze else s

    def sample_style_prior(
        self, generator: torch.Generator | None = None, batch_size: int | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> torch.Tensor:
        """I.i.d. standard normal style code(s); deterministic under a seeded
        generator."""
        shape = (self.config.style_dim,) if batch_size is None else (batch_size, self.config.style_dim)
        return torch.randn(*shape, generator=generator, dtype=dtype)

    def decode(self, content: torch.Tensor, style: torch.Tensor, domain: str) -> torch.Tensor:
        self._spec(domain)
        cb, squeeze = _as_batch(content)
        sb = style.unsqueeze(0) if style.dim() == 1 else style
        if cb.shape[1] != self.config.content_channels:
            raise DataError(
                f"decode: content has {cb.shape[1]} channels, expected "
                f"{self.config.content_channels}"
            )
        if sb.shape[-1] != self.config.style_dim:
            raise DataError(
                f"decode: style has dimension {sb.shape[-1]}, expected {self.config.style_dim}"
            )
        if sb.shape[0] == 1 and cb.shape[0] > 1:
            sb = sb.expand(cb.shape[0], -1)
        out = self.decoder[domain](cb, sb)
        return out.squeeze(0) if squeeze else out

    def translate(self, x: torch.Tensor, direction: str, style: torch.Tensor) -> torch.Tensor:
        """Map an image to the other domain with the given style code."""
        if direction == "s2t":
            src, dst = "source", "target"
        elif direction == "t2s":
            src, dst = "target", "source"
        else:
            raise DataError(f"unknown direction {direction!r}; expected 's2t' or 't2s'")
        content = self.encode_content(x, src)
        return self.decode(content, style, dst)

    def cycle(self, x: torch.Tensor, origin: str, style_other: torch.Tensor) -> torch.Tensor:
        """Round trip through the other domain, restoring the original style.

        For a source image: G_S applied to the re-encoded content of the
        source-to-target translation, styled with the image's own style code.
        """
        other = "target" if origin == "source" else "source"
        direction = "s2t" if origin == "source" else "t2s"
        back = "t2s" if origin == "source" else "s2t"
        own_style = self.encode_style(x, origin)
        crossed = self.translate(x, direction, style_other)
        return self.translate(crossed, back, own_style)

    def discriminate(self, x: torch.Tensor, domain: str) -> torch.Tensor:
        self._check_channels(x, domain, "discriminate")
        xb, squeeze = _as_batch(x)
        scores = self.discriminator[domain](xb)
        return scores.squeeze(0) if squeeze else scores

    def to_dtype(self, dtype: torch.dtype) -> "TranslationModel":
        for m in self.all_modules():
            m.to(dtype)
        return self


def build_translation_model(
    source_spec: DomainSpec,
    target_spec: DomainSpec,
    config: NetConfig | None = None,
    seed: int = 0,
) -> TranslationModel:
    """Construct all eight networks with seeded, reproducible initialization."""
    if (source_spec.height, source_spec.width) != (target_spec.height, target_spec.width):
        raise ConfigError("translation requires pixel-aligned domains (same H, W)")
    config = config or NetConfig()
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "translation-init"))
        return TranslationModel(source_spec=source_spec, target_spec=target_spec, config=config)
