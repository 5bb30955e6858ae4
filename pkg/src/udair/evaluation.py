"""Full-reference metrics, feature-distribution statistics, feature export and parameter counts."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from .backbone import PARAM_GROUPS
from .errors import ConfigurationError, NumericError, ShapeError, SizeError

PSNR_CAP = 99.0
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricRecord:
    sample_id: str
    task: str
    psnr: float
    ssim: float
    domain_tag: str
    tta_enabled: bool


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return cap
    return float(min(cap, 10.0 * math.log10(1.0 / mse)))


def _window(size: int, kind: str) -> np.ndarray:
    if kind == "uniform":
        w = np.ones((size, size))
    elif kind == "gaussian":
        ax = np.arange(size) - (size - 1) / 2
        g = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
        w = np.outer(g, g)
    else:
        raise ConfigurationError(f"unknown SSIM window kind {kind!r}")
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, window: int = 8, kind: str = "uniform", data_range: float = 1.0) -> float:
    """Mean SSIM over all valid windows and channels.

    Local statistics use the (weighted) population moments inside each window.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < window or a.shape[1] < window:
        raise SizeError(f"image {a.shape[:2]} smaller than SSIM window {window}")
    w = _window(window, kind)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[2]):
        pa = sliding_window_view(a[..., ch], (window, window))
        pb = sliding_window_view(b[..., ch], (window, window))
        mu_a = np.einsum("ijkl,kl->ij", pa, w)
        mu_b = np.einsum("ijkl,kl->ij", pb, w)
        var_a = np.einsum("ijkl,kl->ij", pa * pa, w) - mu_a ** 2
        var_b = np.einsum("ijkl,kl->ij", pb * pb, w) - mu_b ** 2
        cov = np.einsum("ijkl,kl->ij", pa * pb, w) - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
        scores.append(s.mean())
    return float(np.clip(np.mean(scores), -1.0, 1.0))


def feature_density_kl(source, other, bins: int = 64, eps: float = 1e-8) -> dict:
    """Histograms of all feature values on a shared support and KL(source || other), natural log."""
    p_vals = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in _as_list(source)])
    q_vals = np.concatenate([np.asarray(x, dtype=np.float64).ravel() for x in _as_list(other)])
    if p_vals.size == 0 or q_vals.size == 0:
        raise ValueError("feature collections must be non-empty")
    if not (np.isfinite(p_vals).all() and np.isfinite(q_vals).all()):
        raise NumericError("feature values must be finite")
    lo = min(p_vals.min(), q_vals.min())
    hi = max(p_vals.max(), q_vals.max())
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(p_vals, edges)[0].astype(np.float64)
    q = np.histogram(q_vals, edges)[0].astype(np.float64)
    p, q = _smooth(p, eps), _smooth(q, eps)
    return {"edges": edges.tolist(), "p": p.tolist(), "q": q.tolist(), "kl": kl_divergence(p, q)}


def _as_list(x):
    if isinstance(x, (list, tuple)):
        return [v.detach().cpu().numpy() if torch.is_tensor(v) else v for v in x]
    return [x.detach().cpu().numpy() if torch.is_tensor(x) else x]


def _smooth(h: np.ndarray, eps: float) -> np.ndarray:
    h = h / h.sum() + eps
    return h / h.sum()


def kl_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    mask = p > 0
    return float(max(0.0, np.sum(p[mask] * np.log(p[mask] / q[mask]))))


def cluster_margin(features, labels) -> tuple[float, float, float]:
    """(intra, inter, intra - inter) mean pairwise cosine similarity."""
    x = np.asarray(features.detach().cpu() if torch.is_tensor(features) else features, dtype=np.float64)
    labels = np.asarray(labels)
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2 or counts.min() < 2:
        raise ValueError("need at least two labels with at least two samples each")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    xn = x / np.maximum(norms, 1e-12)
    sim = xn @ xn.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(x), dtype=bool)
    intra = float(sim[same & off].mean())
    inter = float(sim[~same].mean())
    return intra, inter, intra - inter


def count_params(model: torch.nn.Module, group: str | None = None) -> int:
    if group is None:
        return sum(p.numel() for p in model.parameters())
    if group not in PARAM_GROUPS:
        raise ConfigurationError(f"unknown parameter group {group!r}")
    prefix = PARAM_GROUPS[group]
    return sum(p.numel() for n, p in model.named_parameters() if n.startswith(prefix))


@torch.no_grad()
def pooled_features(model, images, batch_size: int = 16, adapter=None) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.stack([np.transpose(im, (2, 0, 1)) for im in images[i:i + batch_size]])).float()
        feat = model.degradation_features(x)
        fmap = adapter(feat.map) if adapter is not None else feat.map
        out.append(fmap.mean(dim=(2, 3)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.cfg.daam.dim))


def export_features(path, names, labels, pooled: np.ndarray) -> None:
    """Tab-separated: sample id, label, then one column per feature dimension."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["sample_id", "label"] + [f"f{i}" for i in range(pooled.shape[1])])
        for name, label, row in zip(names, labels, pooled):
            writer.writerow([name, label] + [repr(float(v)) for v in row])


def read_features(path) -> tuple[list, list, np.ndarray]:
    with open(path) as fh:
        rows = list(csv.reader(fh, delimiter="\t"))[1:]
    names = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    return names, labels, np.array([[float(v) for v in r[2:]] for r in rows])


def aggregate_records(records) -> list[dict]:
    """Mean PSNR/SSIM per (task, domain, tta) group."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.task, r.domain_tag, r.tta_enabled)].append(r)
    rows = []
    for (task, domain, tta), items in sorted(groups.items()):
        rows.append({"task": task, "domain": domain, "tta": tta, "count": len(items),
                     "psnr": float(np.mean([r.psnr for r in items])),
                     "ssim": float(np.mean([r.ssim for r in items]))})
    return rows


def write_aggregate_csv(path, records) -> list[dict]:
    rows = aggregate_records(records)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "domain", "tta", "count", "psnr", "ssim"])
        writer.writeheader()
        writer.writerows(rows)
    return rows


def record_dict(r: MetricRecord) -> dict:
    return asdict(r)
