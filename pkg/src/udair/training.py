"""Joint multi-task training: loss composition, cosine schedule, driver and checkpoints."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .adaptation import AnchorSet
from .backbone import UDAIR
from .config import RunConfig, config_from_dict
from .cscl import aggregate, cscl_loss, group_by_task, shuffle_within_task
from .daam import codebook_losses
from .data import BatchPlan, SamplePair, augment, collate
from .errors import CheckpointFormatError, ConfigurationError, DivergenceError, IntegrityError, ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UDAIRCKP"
CHECKPOINT_VERSION = 1


def mae_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    return (pred - target).abs().mean()


def combine_losses(terms: dict, cfg) -> tuple[torch.Tensor, dict]:
    """Weighted sum of whichever terms are present. ``cfg`` is a TrainConfig."""
    weights = {"mae": cfg.alpha, "cscl": cfg.beta, "codebook": cfg.codebook_weight,
               "commitment": cfg.commitment_weight}
    total = 0.0
    breakdown = {}
    for name, value in terms.items():
        if value is None:
            continue
        total = total + weights[name] * value
        breakdown[name] = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    breakdown["total"] = float(total.detach())
    return total, breakdown


def total_loss(pred, target, f_g, f_s, z_e, z_q, cfg: RunConfig, variant: str | None = None):
    """alpha*MAE + beta*CSCL + codebook + 0.25*commitment, dropping terms per ablation variant.

    Pass ``None`` for ``f_g``/``f_s`` or ``z_e``/``z_q`` when the corresponding branch is absent.
    """
    variant = variant or cfg.model.variant
    terms = {"mae": mae_loss(pred, target)}
    if variant in ("full", "no_codebook") and f_g is not None:
        terms["cscl"] = cscl_loss(f_g, f_s, cfg.cscl)
    if variant in ("full", "no_cscl") and z_e is not None:
        terms["codebook"], terms["commitment"] = codebook_losses(z_e, z_q)
    return combine_losses(terms, cfg.train)


def cosine_lr(step: int, total: int, lr0: float, floor: float) -> float:
    if total <= 0:
        return lr0
    t = min(max(step, 0), total) / total
    return floor + (lr0 - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)


class Trainer:
    """Owns the model, optimizer and the deterministic batch schedule.

    Batch contents for step ``s`` depend only on ``(seed, s)``, so resuming from a
    checkpoint at step ``s`` replays the identical stream.
    """

    def __init__(self, cfg: RunConfig, train_sets: Sequence[Sequence[SamplePair]], model: UDAIR | None = None):
        self.cfg = cfg
        self.train_sets = [list(s) for s in train_sets]
        self.plan = BatchPlan(len(self.train_sets), cfg.data.samples_per_task)
        sizes = [len(s) for s in self.train_sets]
        if not sizes or min(sizes) == 0:
            raise ConfigurationError(f"every task needs training samples (sizes {sizes})")
        self.largest = max(sizes)
        self.steps_per_epoch = max(1, self.largest // self.plan.samples_per_task)
        if model is None:
            set_seed(cfg.seed)
            model = UDAIR(cfg.model)
        self.model = model
        t = cfg.train
        params = [p for n, p in model.named_parameters() if not n.startswith("dam.")]
        self.optimizer = torch.optim.AdamW(params, lr=t.lr, betas=tuple(t.betas), weight_decay=t.weight_decay)
        self.step = 0
        self._epoch_cache = (None, None)
        self._last_latent = None

    def _orders(self, epoch: int):
        if self._epoch_cache[0] != epoch:
            rng = np.random.default_rng([self.cfg.seed, 0, epoch])
            orders = [rng.permutation(len(s)) if len(s) == self.largest
                      else rng.integers(0, len(s), size=self.largest) for s in self.train_sets]
            self._epoch_cache = (epoch, orders)
        return self._epoch_cache[1]

    def batch_at(self, step: int) -> list[SamplePair]:
        epoch, b = divmod(step, self.steps_per_epoch)
        orders = self._orders(epoch)
        n = self.plan.samples_per_task
        chosen = [self.train_sets[t][i] for t in range(self.plan.n_tasks) for i in orders[t][b * n:(b + 1) * n]]
        rng = np.random.default_rng([self.cfg.seed, 1, step]) if self.cfg.data.augment else None
        return [augment(p, self.cfg.data.crop, rng) for p in chosen]

    def losses(self, degraded: torch.Tensor, clean: torch.Tensor, step: int):
        cfg = self.cfg
        variant = cfg.model.variant
        pred, feat = self.model(degraded)
        f_g = f_s = z_e = z_q = None
        if feat is not None:
            if variant in ("full", "no_codebook"):
                gen = torch.Generator().manual_seed(cfg.seed * 1_000_003 + step)
                grouped = group_by_task(feat.flat, self.plan.n_tasks, self.plan.samples_per_task)
                f_g, f_s = aggregate(grouped), aggregate(shuffle_within_task(grouped, gen))
            if self.model.uses_codebook:
                z_e, z_q = feat.latent, feat.quantized
                self._last_latent = feat.latent.detach()
        return total_loss(pred, clean, f_g, f_s, z_e, z_q, cfg)

    def train_step(self, batch: Sequence[SamplePair] | None = None) -> dict:
        batch = self.batch_at(self.step) if batch is None else batch
        degraded, clean, _ = collate(batch)
        degraded, clean = torch.from_numpy(degraded), torch.from_numpy(clean)
        t = self.cfg.train
        lr = cosine_lr(self.step, t.steps, t.lr, t.lr_floor)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        loss, breakdown = self.losses(degraded, clean, self.step)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {self.step}", {"step": self.step, **breakdown})
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()
        record = {"step": self.step, "lr": lr, **breakdown}
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self._end_epoch()
        return record

    def _end_epoch(self):
        codebook = self.model.daam.codebook
        if not (self.model.uses_codebook and self.cfg.model.daam.dead_code_reseed):
            return
        if self._last_latent is None:
            return
        rows = self._last_latent.permute(0, 2, 3, 1).reshape(-1, codebook.codes.shape[1])
        gen = torch.Generator().manual_seed(self.cfg.seed * 7919 + self.step)
        codebook.reseed_dead_codes(rows, gen)

    def fit(self, steps: int | None = None, metrics_path: str | Path | None = None,
            log_every: int | None = None) -> list[dict]:
        steps = self.cfg.train.steps - self.step if steps is None else steps
        log_every = log_every or self.cfg.train.log_every
        records = []
        fh = open(metrics_path, "a") if metrics_path else None
        try:
            start = time.perf_counter()
            for _ in range(steps):
                try:
                    rec = self.train_step()
                except DivergenceError as exc:
                    if metrics_path:
                        dump = Path(metrics_path).with_name("divergence.json")
                        dump.write_text(json.dumps(exc.diagnostics, indent=1))
                    raise
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                if rec["step"] % log_every == 0:
                    log.info("step %d loss %.4f mae %.4f (%.1fs)", rec["step"], rec["total"],
                             rec["mae"], time.perf_counter() - start)
        finally:
            if fh:
                fh.close()
        return records

    def optimizer_arrays(self) -> tuple[dict, dict]:
        arrays, meta = {}, {}
        state = self.optimizer.state_dict()
        for pid, st in state["state"].items():
            for key, value in st.items():
                if torch.is_tensor(value):
                    arrays[f"optim/{pid}/{key}"] = value
                else:
                    meta[f"{pid}/{key}"] = value
        return arrays, meta

    def load_optimizer_arrays(self, arrays: dict, meta: dict):
        state = self.optimizer.state_dict()
        new_state = {}
        for name, value in arrays.items():
            _, pid, key = name.split("/", 2)
            new_state.setdefault(int(pid), {})[key] = value
        for name, value in meta.items():
            pid, key = name.split("/", 1)
            new_state.setdefault(int(pid), {})[key] = value
        state["state"] = new_state
        self.optimizer.load_state_dict(state)


def param_digest(model: torch.nn.Module, groups: Sequence[str] | None = None) -> str:
    """SHA-256 over the named parameters (optionally restricted to parameter groups)."""
    from .backbone import PARAM_GROUPS
    prefixes = tuple(PARAM_GROUPS[g] for g in groups) if groups else ("",)
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if name.startswith(prefixes):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --- checkpoint container ---------------------------------------------------
# layout: MAGIC | u32 little-endian header length | JSON header | payload
# header records every array's dtype (explicit little-endian), shape, offset and
# size, plus a SHA-256 of the payload.

def write_container(path, arrays: dict, metadata: dict, version: int = CHECKPOINT_VERSION) -> None:
    records, chunks, offset = [], [], 0
    for name, value in arrays.items():
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        records.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": version, "endianness": "little", "arrays": records,
              "payload_sha256": hashlib.sha256(payload).hexdigest(), "payload_bytes": len(payload),
              "metadata": metadata}
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_container(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 4 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: version {header.get('version')} != {CHECKPOINT_VERSION}")
    payload = data[12 + hlen:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload truncated or corrupted")
    arrays = {}
    for rec in header["arrays"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(rec["dtype"])).reshape(rec["shape"])
        arrays[rec["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    return arrays, header["metadata"]


@dataclass
class LoadedCheckpoint:
    model: UDAIR
    config: RunConfig
    anchors: AnchorSet | None
    step: int
    optimizer_arrays: dict
    optimizer_meta: dict


def save_checkpoint(path, model: UDAIR, cfg: RunConfig, anchors: AnchorSet | None = None,
                    trainer: Trainer | None = None, step: int | None = None) -> None:
    arrays = {f"model/{k}": v for k, v in model.state_dict().items()}
    metadata = {"config": cfg.to_dict(), "step": trainer.step if trainer else (step or 0),
                "rng": {"seed": cfg.seed}, "optimizer": {}}
    if trainer is not None:
        opt_arrays, opt_meta = trainer.optimizer_arrays()
        arrays.update(opt_arrays)
        metadata["optimizer"] = opt_meta
    arrays["rng/torch"] = torch.get_rng_state()
    if anchors is not None:
        arrays.update(anchors.arrays())
        metadata["anchor_tasks"] = list(anchors.tasks)
    write_container(path, arrays, metadata)


def load_checkpoint(path) -> LoadedCheckpoint:
    arrays, meta = read_container(path)
    cfg = config_from_dict(meta["config"])
    model = UDAIR(cfg.model)
    state = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
    model.load_state_dict(state)
    anchors = None
    if "anchors/means" in arrays:
        anchors = AnchorSet.from_arrays(arrays, meta.get("anchor_tasks", []))
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("optim/")}
    return LoadedCheckpoint(model, cfg, anchors, int(meta["step"]), opt_arrays, meta.get("optimizer", {}))
