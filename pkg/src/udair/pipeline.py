"""End-to-end runs shared by the CLI and the acceptance checks."""
from __future__ import annotations

import json
import logging
import time
import warnings
from pathlib import Path

import numpy as np
import torch

from .adaptation import AnchorSet, DomainAdaptationModule, compute_anchors, restore_with_tta, tta_adapt
from .backbone import forward_restore
from .config import RunConfig, save_config
from .data import DOMAINS, check_ranges, load_folder_dataset, split_by_task, synthesize_split
from .errors import ConfigurationError
from .evaluation import (MetricRecord, cluster_margin, export_features, feature_density_kl, psnr,
                         record_dict, ssim, write_aggregate_csv)
from .training import Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.udair"


def to_tensor(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(np.transpose(img, (2, 0, 1))))[None].float()


def to_image(t: torch.Tensor) -> np.ndarray:
    return np.transpose(t[0].detach().cpu().numpy(), (1, 2, 0))


def synth_data(cfg: RunConfig, out: Path) -> dict:
    """Write ``out/source/<task>/{train,test}`` and ``out/target/<task>/test``."""
    check_ranges(cfg.data)
    counts = {}
    for task in cfg.data.tasks:
        synthesize_split(out / "source", task, "train", "source", cfg.data.n_train, cfg.data, cfg.seed)
        synthesize_split(out / "source", task, "test", "source", cfg.data.n_test, cfg.data, cfg.seed)
        synthesize_split(out / "target", task, "test", "target", cfg.data.n_test, cfg.data, cfg.seed)
        counts[task] = {"train": cfg.data.n_train, "test": cfg.data.n_test}
    return counts


def load_domain(cfg: RunConfig, domain: str, split: str) -> list[list]:
    if domain not in DOMAINS:
        raise ConfigurationError(f"unknown domain {domain!r}")
    root = Path(cfg.data.root) / domain
    pairs = load_folder_dataset(root, split, domain)
    return split_by_task(pairs, cfg.data.tasks)


def anchor_sets(cfg: RunConfig, per_task) -> list[list]:
    return [[p.degraded for p in items] for items in per_task]


def train(cfg: RunConfig, out: Path, train_sets=None, resume: str | Path | None = None,
          with_anchors: bool = True) -> Trainer:
    out.mkdir(parents=True, exist_ok=True)
    if train_sets is None:
        train_sets = load_domain(cfg, "source", "train")
    model = None
    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck.model
    trainer = Trainer(cfg, train_sets, model=model)
    if resume is not None:
        trainer.step = ck.step
        trainer.load_optimizer_arrays(ck.optimizer_arrays, ck.optimizer_meta)
    trainer.fit(metrics_path=out / "metrics.jsonl")
    anchors = None
    if with_anchors and cfg.model.variant != "baseline":
        anchors = compute_anchors(trainer.model, anchor_sets(cfg, train_sets), cfg.data.tasks)
    save_checkpoint(out / CHECKPOINT_NAME, trainer.model, cfg, anchors, trainer=trainer)
    write_usage(out / "code_usage.tsv", trainer.model)
    return trainer


def write_usage(path: Path, model) -> None:
    usage = model.daam.codebook.total_usage.tolist()
    with open(path, "w") as fh:
        fh.write("code\tcount\n")
        for i, c in enumerate(usage):
            fh.write(f"{i}\t{c}\n")


def evaluate(model, per_task, cfg: RunConfig, domain: str, tta: bool, anchors: AnchorSet | None,
             out: Path | None = None) -> tuple[list[MetricRecord], list[dict]]:
    """Restore every sample; with ``tta`` each target sample first adapts its own adapter copy."""
    if tta and domain == "source":
        warnings.warn("test-time adaptation is only applied to target-domain data; disabled for source",
                      stacklevel=2)
        tta = False
    if tta and anchors is None:
        raise ConfigurationError("test-time adaptation needs a checkpoint with anchors")
    if tta and model.variant == "baseline":
        raise ConfigurationError("the baseline variant has no degradation features to adapt")
    model.eval()
    records, reports = [], []
    for task, items in zip(cfg.data.tasks, per_task):
        for pair in items:
            x = to_tensor(pair.degraded)
            if tta:
                start = time.perf_counter()
                restored, report = restore_with_tta(model, x, anchors, cfg.tta)
                report.seconds = time.perf_counter() - start
                reports.append({"sample_id": pair.name, "task": task, **report.to_dict()})
            else:
                restored, _ = forward_restore(model, x)
            img = to_image(restored)
            if pair.clean is None:
                continue
            records.append(MetricRecord(pair.name, task, psnr(img, pair.clean, cfg.eval.psnr_cap),
                                        ssim(img, pair.clean, cfg.eval.ssim_window, cfg.eval.ssim_kind),
                                        domain, tta))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(record_dict(r)) + "\n")
        write_aggregate_csv(out / "aggregate.csv", records)
        if tta:
            with open(out / "tta_reports.jsonl", "w") as fh:
                for r in reports:
                    fh.write(json.dumps(r) + "\n")
    return records, reports


@torch.no_grad()
def feature_maps(model, images) -> list[torch.Tensor]:
    model.eval()
    return [model.degradation_features(to_tensor(im)).map for im in images]


def adapted_maps(model, images, anchors, cfg: RunConfig) -> tuple[list[torch.Tensor], list]:
    maps, reports = [], []
    for im in images:
        x = to_tensor(im)
        adapter, report = tta_adapt(model, x, anchors, cfg.tta)
        with torch.no_grad():
            maps.append(adapter(model.degradation_features(x).map))
        reports.append(report)
    return maps, reports


def analyze_features(model, source_sets, target_sets, cfg: RunConfig, anchors: AnchorSet | None,
                     out: Path | None = None) -> dict:
    """Per-task value-density KL of source vs raw / adapted target features, plus cluster margins."""
    tasks = cfg.data.tasks
    bins = cfg.eval.kl_bins
    report = {"tasks": {}, "cluster_margin": {}}
    pooled = {"source": [], "target_raw": [], "target_adapted": []}
    labels = {"source": [], "target": []}
    names = {"source": [], "target": []}
    if anchors is None:
        warnings.warn("no anchors in checkpoint; adapted-target statistics omitted", stacklevel=2)
    for t, (task, src, tgt) in enumerate(zip(tasks, source_sets, target_sets)):
        src_maps = feature_maps(model, [p.degraded for p in src])
        tgt_maps = feature_maps(model, [p.degraded for p in tgt])
        entry = {}
        raw = feature_density_kl(src_maps, tgt_maps, bins)
        entry["kl_source_vs_raw"] = raw["kl"]
        entry["histogram"] = {"edges": raw["edges"], "source": raw["p"], "target_raw": raw["q"]}
        pooled["source"] += [m.mean(dim=(2, 3))[0].numpy() for m in src_maps]
        pooled["target_raw"] += [m.mean(dim=(2, 3))[0].numpy() for m in tgt_maps]
        labels["source"] += [t] * len(src_maps)
        labels["target"] += [t] * len(tgt_maps)
        names["source"] += [p.name for p in src]
        names["target"] += [p.name for p in tgt]
        if anchors is not None:
            ada_maps, _ = adapted_maps(model, [p.degraded for p in tgt], anchors, cfg)
            ada = feature_density_kl(src_maps, ada_maps, bins)
            entry["kl_source_vs_adapted"] = ada["kl"]
            entry["histogram_adapted"] = {"edges": ada["edges"], "source": ada["p"], "target_adapted": ada["q"]}
            pooled["target_adapted"] += [m.mean(dim=(2, 3))[0].numpy() for m in ada_maps]
        report["tasks"][task] = entry
    for key, lab in (("source", "source"), ("target_raw", "target"), ("target_adapted", "target")):
        if pooled[key]:
            try:
                intra, inter, margin = cluster_margin(np.stack(pooled[key]), labels[lab])
                report["cluster_margin"][key] = {"intra": intra, "inter": inter, "margin": margin}
            except ValueError as exc:
                log.warning("cluster margin for %s skipped: %s", key, exc)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "density_report.json", "w") as fh:
            json.dump(report, fh, indent=1)
        for key, lab in (("source", "source"), ("target_raw", "target"), ("target_adapted", "target")):
            if pooled[key]:
                export_features(out / f"features_{key}.tsv", names[lab], labels[lab], np.stack(pooled[key]))
    return report


def dam_call_count() -> int:
    return DomainAdaptationModule.total_calls


def snapshot(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
