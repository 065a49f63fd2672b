"""Encoder, decoder, and statistics (critic) networks.

Two families: a small convolutional stack for 32x32 digit images, and
single-hidden-layer MLPs for the rotated-digit comparison. The statistics
network embeds the image with an encoder-like trunk, concatenates the style
vector, and maps to a scalar score.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
from torch import Tensor, nn

from .errors import ShapeError
from .gaussians import DiagonalGaussian


@dataclass
class EncoderOutput:
    content: DiagonalGaussian
    style: DiagonalGaussian


def _check_image_shape(x: Tensor, channels: int, hw: int):
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2] != hw or x.shape[3] != hw:
        raise ShapeError(
            f"expected images of shape (B, {channels}, {hw}, {hw}), got {tuple(x.shape)}"
        )


class ConvEncoder(nn.Module):
    def __init__(self, d_c: int, d_s: int, in_channels: int = 1, in_hw: int = 32):
        super().__init__()
        self.d_c, self.d_s = d_c, d_s
        self.in_channels, self.in_hw = in_channels, in_hw
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, 32, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        feat = 128 * (in_hw // 8) ** 2
        self.content_head = nn.Linear(feat, 2 * d_c)
        self.style_head = nn.Linear(feat, 2 * d_s)

    def forward(self, x: Tensor) -> EncoderOutput:
        _check_image_shape(x, self.in_channels, self.in_hw)
        h = self.trunk(x)
        c = self.content_head(h)
        s = self.style_head(h)
        return EncoderOutput(
            content=DiagonalGaussian(c[:, : self.d_c], c[:, self.d_c :]),
            style=DiagonalGaussian(s[:, : self.d_s], s[:, self.d_s :]),
        )


class ConvDecoder(nn.Module):
    def __init__(self, d_c: int, d_s: int, out_channels: int = 1, out_hw: int = 32):
        super().__init__()
        self.d_c, self.d_s = d_c, d_s
        self.out_channels, self.out_hw = out_channels, out_hw
        self.base_hw = out_hw // 8
        self.fc = nn.Linear(d_c + d_s, 128 * self.base_hw**2)
        self.deconv = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose2d(128, 64, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(64, 32, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.ConvTranspose2d(32, out_channels, 4, stride=2, padding=1),
        )

    def forward(self, c: Tensor, s: Tensor) -> Tensor:
        if c.shape[-1] != self.d_c or s.shape[-1] != self.d_s:
            raise ShapeError(
                f"latent dims ({c.shape[-1]}, {s.shape[-1]}) != ({self.d_c}, {self.d_s})"
            )
        z = torch.cat([c, s], dim=-1)
        h = self.fc(z).view(-1, 128, self.base_hw, self.base_hw)
        return self.deconv(h)


class ConvStatisticsNet(nn.Module):
    """Scores (image, style) pairs; unbounded scalar output."""

    def __init__(self, d_s: int, in_channels: int = 1, in_hw: int = 32, feat_dim: int = 128):
        super().__init__()
        self.d_s = d_s
        self.in_channels, self.in_hw = in_channels, in_hw
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, 32, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(128 * (in_hw // 8) ** 2, feat_dim),
            nn.ReLU(),
        )
        self.head = nn.Sequential(
            nn.Linear(feat_dim + d_s, 256),
            nn.ReLU(),
            nn.Linear(256, 1),
        )

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        _check_image_shape(x, self.in_channels, self.in_hw)
        if s.shape[-1] != self.d_s:
            raise ShapeError(f"style dim {s.shape[-1]} != {self.d_s}")
        h = self.trunk(x)
        return self.head(torch.cat([h, s], dim=-1)).squeeze(-1)


class MLPEncoder(nn.Module):
    def __init__(self, d_c: int, d_s: int, in_channels: int = 1, in_hw: int = 32,
                 hidden: int = 512):
        super().__init__()
        self.d_c, self.d_s = d_c, d_s
        self.in_channels, self.in_hw = in_channels, in_hw
        in_dim = in_channels * in_hw**2
        self.trunk = nn.Sequential(nn.Flatten(), nn.Linear(in_dim, hidden), nn.ReLU())
        self.content_head = nn.Linear(hidden, 2 * d_c)
        self.style_head = nn.Linear(hidden, 2 * d_s)

    def forward(self, x: Tensor) -> EncoderOutput:
        _check_image_shape(x, self.in_channels, self.in_hw)
        h = self.trunk(x)
        c = self.content_head(h)
        s = self.style_head(h)
        return EncoderOutput(
            content=DiagonalGaussian(c[:, : self.d_c], c[:, self.d_c :]),
            style=DiagonalGaussian(s[:, : self.d_s], s[:, self.d_s :]),
        )


class MLPDecoder(nn.Module):
    def __init__(self, d_c: int, d_s: int, out_channels: int = 1, out_hw: int = 32,
                 hidden: int = 512):
        super().__init__()
        self.d_c, self.d_s = d_c, d_s
        self.out_channels, self.out_hw = out_channels, out_hw
        self.net = nn.Sequential(
            nn.Linear(d_c + d_s, hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_channels * out_hw**2),
        )

    def forward(self, c: Tensor, s: Tensor) -> Tensor:
        if c.shape[-1] != self.d_c or s.shape[-1] != self.d_s:
            raise ShapeError(
                f"latent dims ({c.shape[-1]}, {s.shape[-1]}) != ({self.d_c}, {self.d_s})"
            )
        out = self.net(torch.cat([c, s], dim=-1))
        return out.view(-1, self.out_channels, self.out_hw, self.out_hw)


class MLPStatisticsNet(nn.Module):
    def __init__(self, d_s: int, in_channels: int = 1, in_hw: int = 32,
                 hidden: int = 512, feat_dim: int = 128):
        super().__init__()
        self.d_s = d_s
        self.in_channels, self.in_hw = in_channels, in_hw
        in_dim = in_channels * in_hw**2
        self.trunk = nn.Sequential(
            nn.Flatten(), nn.Linear(in_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, feat_dim), nn.ReLU(),
        )
        self.head = nn.Sequential(
            nn.Linear(feat_dim + d_s, 256), nn.ReLU(), nn.Linear(256, 1)
        )

    def forward(self, x: Tensor, s: Tensor) -> Tensor:
        _check_image_shape(x, self.in_channels, self.in_hw)
        if s.shape[-1] != self.d_s:
            raise ShapeError(f"style dim {s.shape[-1]} != {self.d_s}")
        h = self.trunk(x)
        return self.head(torch.cat([h, s], dim=-1)).squeeze(-1)


def build_networks(config) -> tuple[nn.Module, nn.Module, nn.Module]:
    """Instantiate (encoder, decoder, critic) from a RunConfig-like object."""
    d_c, d_s = config.d_c, config.d_s
    if config.arch == "conv":
        return (
            ConvEncoder(d_c, d_s),
            ConvDecoder(d_c, d_s),
            ConvStatisticsNet(d_s),
        )
    if config.arch == "mlp":
        h = config.hidden_units
        return (
            MLPEncoder(d_c, d_s, hidden=h),
            MLPDecoder(d_c, d_s, hidden=h),
            MLPStatisticsNet(d_s, hidden=h),
        )
    raise ValueError(f"unknown architecture {config.arch!r}")


@dataclass
class ModelBundle:
    """Everything needed to resume or evaluate one trained model."""

    encoder: nn.Module
    decoder: nn.Module
    critic: nn.Module
    lambda_value: float
    config: Any  # RunConfig; kept loose to avoid an import cycle


def save_checkpoint(bundle: ModelBundle, path, optimizer_states: dict | None = None):
    """Self-describing archive of named tensors plus the full run config."""
    payload = {
        "encoder": bundle.encoder.state_dict(),
        "decoder": bundle.decoder.state_dict(),
        "critic": bundle.critic.state_dict(),
        "lambda": float(bundle.lambda_value),
        "config": bundle.config.to_dict(),
        "optimizers": optimizer_states or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[ModelBundle, dict]:
    from .training import RunConfig

    payload = torch.load(path, map_location="cpu", weights_only=False)
    config = RunConfig.from_dict(payload["config"])
    encoder, decoder, critic = build_networks(config)
    encoder.load_state_dict(payload["encoder"])
    decoder.load_state_dict(payload["decoder"])
    critic.load_state_dict(payload["critic"])
    bundle = ModelBundle(encoder, decoder, critic, payload["lambda"], config)
    return bundle, payload.get("optimizers", {})
