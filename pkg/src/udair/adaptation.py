"""Test-time domain adaptation: the adapter module, CORAL alignment and the TTA driver."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .daam import spatial_rows
from .errors import ConfigurationError, NumericError, SampleCountError, ShapeError


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.expand = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool2d(x, 1)
        return x * torch.sigmoid(self.expand(F.gelu(self.reduce(s))))


class DomainAdaptationModule(nn.Module):
    """Residual adapter: 1x1 expand, 3x3 depthwise, squeeze-excite, 1x1 project.

    The projection starts at zero so a fresh module is the identity on features.
    ``calls`` counts forward invocations of this instance, ``total_calls`` of all instances.
    """

    total_calls = 0

    def __init__(self, dim: int, expand: int = 2, se_reduction: int = 4):
        super().__init__()
        wide = dim * expand
        self.dim = dim
        self.expand = nn.Conv2d(dim, wide, 1)
        self.depthwise = nn.Conv2d(wide, wide, 3, padding=1, groups=wide)
        self.se = SqueezeExcite(wide, se_reduction)
        self.project = nn.Conv2d(wide, dim, 1)
        self.calls = 0
        self.reset_parameters()

    def reset_parameters(self):
        for m in (self.expand, self.depthwise, self.se.reduce, self.se.expand):
            m.reset_parameters()
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.shape[1] != self.dim:
            raise ShapeError(f"adapter expects {self.dim} channels, got {feat.shape[1]}")
        self.calls += 1
        DomainAdaptationModule.total_calls += 1
        adapted = F.gelu(self.depthwise(F.gelu(self.expand(feat))))
        return feat + self.project(self.se(adapted))


def covariance(rows: torch.Tensor) -> torch.Tensor:
    """Unbiased covariance (X^T X - (X^T 1)(1^T X)/n) / (n - 1) of an ``(n, D)`` matrix."""
    n = rows.shape[0]
    if n < 2:
        raise SampleCountError(f"covariance needs at least 2 rows, got {n}")
    colsum = rows.sum(dim=0, keepdim=True)
    return (rows.T @ rows - colsum.T @ colsum / n) / (n - 1)


def coral_loss(c_target: torch.Tensor, c_source: torch.Tensor, d: int | None = None) -> torch.Tensor:
    if c_target.shape != c_source.shape or c_target.dim() != 2 or c_target.shape[0] != c_target.shape[1]:
        raise ShapeError(f"covariance shapes {tuple(c_target.shape)} and {tuple(c_source.shape)} differ")
    d = c_target.shape[0] if d is None else d
    return (c_source - c_target).pow(2).sum() / (4 * d * d)


@dataclass
class AnchorSet:
    means: torch.Tensor        # (T, D)
    covariances: torch.Tensor  # (T, D, D)
    counts: torch.Tensor       # (T,)
    tasks: list = field(default_factory=list)

    def __len__(self):
        return self.means.shape[0]

    def arrays(self) -> dict:
        return {"anchors/means": self.means, "anchors/covariances": self.covariances,
                "anchors/counts": self.counts}

    @classmethod
    def from_arrays(cls, arrays: dict, tasks) -> "AnchorSet":
        return cls(arrays["anchors/means"], arrays["anchors/covariances"], arrays["anchors/counts"], list(tasks))


@torch.no_grad()
def compute_anchors(model, datasets, tasks, batch_size: int = 16) -> AnchorSet:
    """Per-task mean and covariance of all spatial DAAM feature rows over ``datasets``.

    ``datasets`` is one sequence of images per task (``(H, W, 3)`` arrays or SamplePairs).
    """
    was_training = model.training
    model.eval()
    means, covs, counts = [], [], []
    for task, images in zip(tasks, datasets):
        rows = []
        for i in range(0, len(images), batch_size):
            chunk = [getattr(im, "degraded", im) for im in images[i:i + batch_size]]
            x = torch.from_numpy(np.stack([np.transpose(c, (2, 0, 1)) for c in chunk])).float()
            rows.append(model.degradation_features(x).rows().double())
        if not rows:
            raise SampleCountError(f"task {task!r} has no samples for anchors")
        rows = torch.cat(rows)
        if rows.shape[0] < 2:
            raise SampleCountError(f"task {task!r} has {rows.shape[0]} feature rows; need >= 2")
        means.append(rows.mean(0))
        covs.append(covariance(rows))
        counts.append(rows.shape[0])
    model.train(was_training)
    return AnchorSet(torch.stack(means), torch.stack(covs), torch.tensor(counts), list(tasks))


def select_anchor(pooled: torch.Tensor, anchors: AnchorSet) -> int:
    """Anchor whose mean has the highest cosine similarity with ``pooled``; ties -> lowest index."""
    pooled = pooled.reshape(-1).double()
    if len(anchors) == 0:
        raise ConfigurationError("empty anchor set")
    norm = pooled.norm()
    if norm == 0:
        raise NumericError("zero pooled feature has no direction")
    means = anchors.means.double()
    sims = means @ pooled / (means.norm(dim=1).clamp_min(1e-12) * norm)
    return int(torch.argmax(sims))


@dataclass
class TtaReport:
    selected_task: int
    coral_per_step: list
    kl_before: float | None = None
    kl_after: float | None = None
    seconds: float | None = None

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


def tta_adapt(model, image: torch.Tensor, anchors: AnchorSet, cfg, adapter: nn.Module | None = None):
    """Adapt the domain-adaptation weights to one target image by CORAL to its anchor.

    Returns ``(adapter, report)``. With ``cfg.reset_per_sample`` the adapter is a fresh copy
    of the model's template; otherwise ``adapter`` (or the template itself) is updated in place.
    Only adapter parameters are optimized; the rest of the model is left untouched.
    """
    if cfg.steps < 0:
        raise ConfigurationError("tta steps must be >= 0")
    if adapter is None:
        adapter = copy.deepcopy(model.dam) if cfg.reset_per_sample else model.dam
    if cfg.reset_per_sample:
        adapter.calls = 0
    was_training = model.training
    model.eval()
    with torch.no_grad():
        feat = model.degradation_features(image)
    model.train(was_training)
    fmap = feat.map.detach()
    if fmap.shape[0] * fmap.shape[2] * fmap.shape[3] < 2:
        raise SampleCountError("need at least 2 spatial feature rows for covariance")
    params = list(adapter.parameters())
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=cfg.lr)
    else:
        opt = torch.optim.Adam(params, lr=cfg.lr)
    selected = None
    trajectory = []
    for step in range(cfg.steps + 1):
        out = adapter(fmap)
        if selected is None:
            selected = select_anchor(out.detach().mean(dim=(0, 2, 3)), anchors)
            target_cov = anchors.covariances[selected].to(out.dtype)
        rows = spatial_rows(out)
        loss = coral_loss(covariance(rows), target_cov)
        trajectory.append(float(loss.detach()))
        if step == cfg.steps:
            break
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return adapter, TtaReport(selected, trajectory)


def restore_with_tta(model, image: torch.Tensor, anchors: AnchorSet, cfg):
    """Adapt on ``image`` then restore it with the adapted features. Returns ``(restored, report)``."""
    adapter, report = tta_adapt(model, image, anchors, cfg)
    with torch.no_grad():
        restored, _ = model(image, adapter=adapter)
    return restored.clamp(0, 1), report
