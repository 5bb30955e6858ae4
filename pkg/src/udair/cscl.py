"""Cross-sample contrastive learning over task-grouped degradation features."""
from __future__ import annotations

import torch

from .config import CsclConfig
from .errors import ConfigurationError, ShapeError


def group_by_task(flat: torch.Tensor, n_tasks: int, samples_per_task: int) -> torch.Tensor:
    """Reshape a task-major ``(B, F)`` batch to ``(n_tasks, samples_per_task, F)``."""
    if flat.dim() != 2 or flat.shape[0] != n_tasks * samples_per_task:
        raise ShapeError(f"batch of {flat.shape[0]} does not match plan {n_tasks}x{samples_per_task}")
    return flat.reshape(n_tasks, samples_per_task, flat.shape[1])


def shuffle_within_task(grouped: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    perms = [torch.randperm(grouped.shape[1], generator=generator) for _ in range(grouped.shape[0])]
    return torch.stack([grouped[i, p] for i, p in enumerate(perms)])


def aggregate(grouped: torch.Tensor) -> torch.Tensor:
    """Concatenate each task's sample rows into one row: ``(T, S, F) -> (T, S*F)``."""
    return grouped.reshape(grouped.shape[0], -1)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    an = a / a.norm(dim=1, keepdim=True).clamp_min(eps)
    bn = b / b.norm(dim=1, keepdim=True).clamp_min(eps)
    return an @ bn.T


def cscl_loss(f_g: torch.Tensor, f_s: torch.Tensor, cfg: CsclConfig | None = None) -> torch.Tensor:
    """Contrast each task's aggregate with its own shuffled aggregate against other tasks'.

    ``literal`` mode normalizes by the negatives only; ``infonce`` adds the positive
    to the denominator.
    """
    cfg = cfg or CsclConfig()
    if f_g.shape != f_s.shape:
        raise ShapeError(f"shape mismatch {tuple(f_g.shape)} vs {tuple(f_s.shape)}")
    n = f_g.shape[0]
    if n < 2:
        raise ConfigurationError("contrastive loss needs at least two tasks")
    logits = cosine_matrix(f_g, f_s, cfg.eps) / cfg.tau
    positive = logits.diagonal()
    if cfg.denominator_mode == "literal":
        eye = torch.eye(n, dtype=torch.bool, device=logits.device)
        denom = torch.logsumexp(logits.masked_fill(eye, float("-inf")), dim=1)
    elif cfg.denominator_mode == "infonce":
        denom = torch.logsumexp(logits, dim=1)
    else:
        raise ConfigurationError(f"unknown denominator_mode {cfg.denominator_mode!r}")
    return -(positive - denom).mean()


def cscl_from_batch(flat: torch.Tensor, n_tasks: int, samples_per_task: int, cfg: CsclConfig,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    grouped = group_by_task(flat, n_tasks, samples_per_task)
    return cscl_loss(aggregate(grouped), aggregate(shuffle_within_task(grouped, generator)), cfg)
