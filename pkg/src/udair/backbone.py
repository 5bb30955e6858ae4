"""Encoder/decoder restoration network with degradation-feature injection, and the full model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .adaptation import DomainAdaptationModule
from .config import ModelConfig
from .daam import DAAM, DegradationFeature
from .errors import ConfigurationError, ShapeError

PARAM_GROUPS = {"theta_r": "restorer.", "theta_a": "daam.", "theta_da": "dam."}


class ConvBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class ChannelLayerNorm(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class TransformerBlock(nn.Module):
    """Pre-norm block: windowed multi-head self-attention then a pointwise MLP."""

    def __init__(self, dim: int, heads: int = 2, window: int = 8, mlp_ratio: float = 2.0):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"dim {dim} not divisible by heads {heads}")
        self.heads, self.window = heads, window
        self.norm1 = ChannelLayerNorm(dim)
        self.qkv = nn.Conv2d(dim, 3 * dim, 1)
        self.proj = nn.Conv2d(dim, dim, 1)
        self.norm2 = ChannelLayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Conv2d(dim, hidden, 1), nn.GELU(), nn.Conv2d(hidden, dim, 1))

    def attend(self, x):
        b, c, h, w = x.shape
        ws = math.gcd(min(self.window, h, w), math.gcd(h, w))
        q, k, v = self.qkv(x).chunk(3, dim=1)

        def windows(t):
            t = t.reshape(b, self.heads, c // self.heads, h // ws, ws, w // ws, ws)
            return t.permute(0, 3, 5, 1, 4, 6, 2).reshape(-1, self.heads, ws * ws, c // self.heads)

        out = F.scaled_dot_product_attention(windows(q), windows(k), windows(v))
        out = out.reshape(b, h // ws, w // ws, self.heads, ws, ws, c // self.heads)
        out = out.permute(0, 3, 6, 1, 4, 2, 5).reshape(b, c, h, w)
        return self.proj(out)

    def forward(self, x):
        x = x + self.attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def make_blocks(cfg: ModelConfig, dim: int) -> nn.Sequential:
    if cfg.block_kind == "conv":
        return nn.Sequential(*[ConvBlock(dim) for _ in range(cfg.blocks_per_level)])
    heads = cfg.heads if dim % cfg.heads == 0 else 1
    return nn.Sequential(*[TransformerBlock(dim, heads, cfg.window, cfg.mlp_ratio)
                           for _ in range(cfg.blocks_per_level)])


@dataclass
class EncoderOutput:
    bottleneck: torch.Tensor
    skips: list  # finest first


class Restorer(nn.Module):
    """U-shaped encoder/decoder; channels double per level, bottleneck at ``2**levels`` x base.

    When ``deg_dim > 0`` each decoder level concatenates the upsampled deeper features,
    the encoder skip and the degradation map (nearest-resampled), then fuses with a 1x1 conv.
    """

    def __init__(self, cfg: ModelConfig, deg_dim: int = 0):
        super().__init__()
        self.levels = cfg.levels
        self.deg_dim = deg_dim
        c = cfg.base_dim
        self.stem = nn.Conv2d(3, c, 3, padding=1)
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(cfg.levels):
            self.enc_blocks.append(make_blocks(cfg, c * 2 ** i))
            self.downs.append(nn.Conv2d(c * 2 ** i, c * 2 ** (i + 1), 4, stride=2, padding=1))
        top = c * 2 ** cfg.levels
        self.bottleneck = make_blocks(cfg, top)
        self.ups = nn.ModuleList()
        self.fuse = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            width = c * 2 ** i
            self.ups.append(nn.ConvTranspose2d(width * 2, width, 2, stride=2))
            self.fuse.append(nn.Conv2d(2 * width + deg_dim, width, 1))
            self.dec_blocks.append(make_blocks(cfg, width))
        self.head = nn.Conv2d(c, 3, 3, padding=1)

    def encode(self, image: torch.Tensor) -> EncoderOutput:
        factor = 2 ** self.levels
        if image.shape[-1] % factor or image.shape[-2] % factor:
            raise ShapeError(f"image {tuple(image.shape[-2:])} not divisible by {factor}")
        x = self.stem(image)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            x = block(x)
            skips.append(x)
            x = down(x)
        return EncoderOutput(self.bottleneck(x), skips)

    def decode(self, enc: EncoderOutput, deg_map: torch.Tensor | None, image: torch.Tensor) -> torch.Tensor:
        if (deg_map is None) != (self.deg_dim == 0):
            raise ConfigurationError("degradation features given to a decoder built without injection"
                                     if deg_map is not None else "decoder expects degradation features")
        if deg_map is not None and deg_map.shape[1] != self.deg_dim:
            raise ConfigurationError(f"degradation map has {deg_map.shape[1]} channels, decoder expects {self.deg_dim}")
        x = enc.bottleneck
        for up, fuse, block, skip in zip(self.ups, self.fuse, self.dec_blocks, reversed(enc.skips)):
            x = up(x)
            parts = [x, skip]
            if deg_map is not None:
                parts.append(F.interpolate(deg_map, size=skip.shape[-2:], mode="nearest"))
            x = block(fuse(torch.cat(parts, dim=1)))
        return image + self.head(x)


class UDAIR(nn.Module):
    """Restoration network guided by codebook degradation features.

    Parameter groups: ``restorer`` (theta_r), ``daam`` (theta_a), ``dam`` (theta_da).
    ``forward`` never touches ``dam``; test-time adaptation passes an adapter explicitly.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.variant = cfg.variant
        d = cfg.daam
        inject = cfg.variant != "baseline"
        self.restorer = Restorer(cfg, deg_dim=d.dim if inject else 0)
        self.daam = DAAM(d.dim, d.codebook_size, d.hidden, cfg.levels, d.eps)
        self.dam = DomainAdaptationModule(d.dim, cfg.dam.expand, cfg.dam.se_reduction)

    @property
    def uses_codebook(self) -> bool:
        return self.variant in ("full", "no_cscl")

    def degradation_features(self, image: torch.Tensor) -> DegradationFeature:
        return self.daam(image, use_codebook=self.uses_codebook)

    def encode(self, image):
        return self.restorer.encode(image)

    def forward(self, image: torch.Tensor, adapter: nn.Module | None = None):
        """Returns ``(restored, features)``; features is None for the baseline variant."""
        enc = self.restorer.encode(image)
        if self.variant == "baseline":
            return self.restorer.decode(enc, None, image), None
        feat = self.degradation_features(image)
        if adapter is not None:
            feat = feat.with_map(adapter(feat.map))
        return self.restorer.decode(enc, feat.map, image), feat

    def param_groups(self) -> dict:
        groups = {k: [] for k in PARAM_GROUPS}
        for name, p in self.named_parameters():
            for group, prefix in PARAM_GROUPS.items():
                if name.startswith(prefix):
                    groups[group].append((name, p))
        return groups


def forward_restore(model: UDAIR, image: torch.Tensor):
    """Inference without adaptation: clamped restoration plus degradation features."""
    with torch.no_grad():
        out, feat = model(image)
    return out.clamp(0, 1), feat
