"""Degradation awareness: CNN latent extractor, codebook quantizer and channel gate."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import NumericError, ShapeError

log = logging.getLogger(__name__)


@dataclass
class DegradationFeature:
    """Gated degradation features for a batch.

    ``map`` is ``(B, D, h, w)``; ``flat`` and ``pooled`` are views derived from it.
    ``latent``/``quantized`` keep the pre-gate tensors for the codebook losses.
    """
    map: torch.Tensor
    indices: torch.Tensor | None
    latent: torch.Tensor
    quantized: torch.Tensor

    @property
    def flat(self) -> torch.Tensor:
        return self.map.flatten(1)

    @property
    def pooled(self) -> torch.Tensor:
        return self.map.mean(dim=(2, 3))

    def rows(self) -> torch.Tensor:
        """Spatial feature vectors as ``(B*h*w, D)`` rows."""
        return spatial_rows(self.map)

    def with_map(self, new_map: torch.Tensor) -> "DegradationFeature":
        return DegradationFeature(new_map, self.indices, self.latent, self.quantized)


def spatial_rows(fmap: torch.Tensor) -> torch.Tensor:
    b, d, h, w = fmap.shape
    return fmap.permute(0, 2, 3, 1).reshape(b * h * w, d)


class LatentExtractor(nn.Module):
    """Strided convolutions down to a ``dim``-channel map at ``1/2**levels`` resolution."""

    def __init__(self, dim: int, hidden: int, levels: int = 3, in_channels: int = 3):
        super().__init__()
        self.levels = levels
        layers = [nn.Conv2d(in_channels, hidden, 3, padding=1), nn.GELU()]
        for _ in range(levels):
            layers += [nn.Conv2d(hidden, hidden, 4, stride=2, padding=1), nn.GELU()]
        layers += [nn.Conv2d(hidden, dim, 1)]
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        factor = 2 ** self.levels
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by {factor}")
        return self.body(x)


def nearest_code(z_e: torch.Tensor, codes: torch.Tensor) -> torch.Tensor:
    """Index of the closest codebook row under Euclidean distance.

    ``z_e`` is ``(..., D)``; returns indices of shape ``(...)``. Ties resolve to
    the lowest index (``argmin`` returns the first minimum).
    """
    if z_e.shape[-1] != codes.shape[-1]:
        raise ShapeError(f"vector dim {z_e.shape[-1]} != code dim {codes.shape[-1]}")
    flat = z_e.reshape(-1, z_e.shape[-1])
    # exact differences rather than the expanded |a|^2 - 2ab + |b|^2 form, so that
    # equidistant codes compare equal and the tie rule is honoured
    chunk = max(1, (1 << 22) // max(1, codes.numel()))
    out = [(part[:, None, :] - codes[None, :, :]).pow(2).sum(-1).argmin(dim=1)
           for part in flat.split(chunk)]
    idx = torch.cat(out) if out else flat.new_zeros(0, dtype=torch.long)
    return idx.reshape(z_e.shape[:-1])


class Codebook(nn.Module):
    def __init__(self, num_codes: int, dim: int):
        super().__init__()
        if num_codes < 2:
            raise ShapeError("codebook needs at least two codes")
        self.codes = nn.Parameter(torch.empty(num_codes, dim))
        nn.init.uniform_(self.codes, -1.0 / num_codes, 1.0 / num_codes)
        self.register_buffer("usage", torch.zeros(num_codes, dtype=torch.long))
        # never reset; feeds the usage histogram export
        self.register_buffer("total_usage", torch.zeros(num_codes, dtype=torch.long))

    @property
    def num_codes(self) -> int:
        return self.codes.shape[0]

    def quantize(self, latent: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Replace each spatial vector of ``(B, D, h, w)`` by its nearest code.

        The returned tensor carries straight-through gradients to ``latent``;
        the codes themselves get no gradient from it.
        """
        b, d, h, w = latent.shape
        if d != self.codes.shape[1]:
            raise ShapeError(f"latent channels {d} != code dim {self.codes.shape[1]}")
        vectors = latent.detach().permute(0, 2, 3, 1)
        idx = nearest_code(vectors, self.codes.detach())
        z_q = self.codes.detach()[idx].permute(0, 3, 1, 2)
        if self.training:
            counts = torch.bincount(idx.flatten(), minlength=self.num_codes)
            self.usage += counts
            self.total_usage += counts
        return latent + (z_q - latent).detach(), idx

    def lookup(self, idx: torch.Tensor) -> torch.Tensor:
        """Codes for an index grid ``(B, h, w)`` as ``(B, D, h, w)``; differentiable w.r.t. the codes."""
        return self.codes[idx].permute(0, 3, 1, 2)

    @torch.no_grad()
    def reseed_dead_codes(self, candidates: torch.Tensor, generator: torch.Generator | None = None) -> int:
        """Move codes with zero usage onto randomly chosen encoder outputs; resets usage."""
        dead = (self.usage == 0).nonzero().flatten()
        if len(dead) and len(candidates):
            pick = torch.randint(len(candidates), (len(dead),), generator=generator)
            self.codes[dead] = candidates[pick].to(self.codes.dtype)
            log.info("re-seeded %d unused codes", len(dead))
        self.usage.zero_()
        return len(dead)


def quantize(latent: torch.Tensor, codes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional nearest-code quantization of a ``(B, D, h, w)`` map (no gradient tricks)."""
    idx = nearest_code(latent.permute(0, 2, 3, 1), codes)
    return codes[idx].permute(0, 3, 1, 2), idx


def gate(x: torch.Tensor, lam: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
         eps: float = 1e-5) -> torch.Tensor:
    """Energy-normalized channel gate.

    E_c = lam * sqrt(sum_hw x^2 + eps), N = sqrt(mean_c E_c^2 + eps),
    g_c = 1 + tanh(gamma_c * E_c / N + beta_c), output x * g.
    """
    if not torch.isfinite(x).all():
        raise NumericError("non-finite input to gate")
    energy = lam * torch.sqrt(x.pow(2).sum(dim=(2, 3), keepdim=True) + eps)
    norm = torch.sqrt(energy.pow(2).mean(dim=1, keepdim=True) + eps)
    g = 1.0 + torch.tanh(gamma.view(1, -1, 1, 1) * energy / norm + beta.view(1, -1, 1, 1))
    return x * g


class ChannelGate(nn.Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.eps = eps
        self.lam = nn.Parameter(torch.ones(1))
        self.gamma = nn.Parameter(torch.zeros(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return gate(x, self.lam, self.gamma, self.beta, self.eps)


def codebook_losses(z_e: torch.Tensor, z_q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(codebook, commitment) losses; the first trains the codes, the second the encoder."""
    if z_e.shape != z_q.shape:
        raise ShapeError(f"shape mismatch {tuple(z_e.shape)} vs {tuple(z_q.shape)}")
    codebook = (z_e.detach() - z_q).pow(2).mean()
    commitment = (z_e - z_q.detach()).pow(2).mean()
    return codebook, commitment


class DAAM(nn.Module):
    """Extract -> quantize -> gate. Holds the degradation-identification parameters."""

    def __init__(self, dim: int, codebook_size: int, hidden: int, levels: int = 3, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.extractor = LatentExtractor(dim, hidden, levels)
        self.codebook = Codebook(codebook_size, dim)
        self.gate = ChannelGate(dim, eps)

    def extract_latent(self, image: torch.Tensor) -> torch.Tensor:
        return self.extractor(image)

    def forward(self, image: torch.Tensor, use_codebook: bool = True) -> DegradationFeature:
        z_e = self.extractor(image)
        if use_codebook:
            z_st, idx = self.codebook.quantize(z_e)
            z_q = self.codebook.lookup(idx)
        else:
            z_st, idx, z_q = z_e, None, z_e
        return DegradationFeature(self.gate(z_st), idx, z_e, z_q)
