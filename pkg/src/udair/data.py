"""Synthetic paired degradations, folder datasets, paired augmentation and balanced batching.

Images are ``float32`` arrays of shape ``(H, W, 3)`` with values in ``[0, 1]``.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .config import TASKS, DataConfig
from .errors import ConfigurationError, ImageFormatError, PairingError, ParameterRangeError, SizeError

log = logging.getLogger(__name__)

DOMAINS = ("source", "target")
TASK_INDEX = {t: i for i, t in enumerate(TASKS)}

REQUIRED_PARAMS = {
    "noise": ("sigma",),
    "haze": ("t", "airlight"),
    "rain": ("density", "angle", "intensity"),
    "lowlight": ("gamma", "gain"),
    "underwater": ("atten_r", "atten_g", "atten_b", "cast"),
}
UNDERWATER_TINT = np.array([0.05, 0.55, 0.65], dtype=np.float64)
RAIN_STREAK_LENGTH = 9


@dataclass(frozen=True)
class DegradationSpec:
    task: str
    params: dict
    domain_tag: str = "source"

    def __post_init__(self):
        validate_spec(self)

    def to_dict(self) -> dict:
        return {"task": self.task, "params": dict(self.params), "domain_tag": self.domain_tag}


@dataclass(frozen=True)
class SamplePair:
    degraded: np.ndarray
    clean: np.ndarray | None
    task_label: int
    domain_tag: str = "source"
    name: str = ""

    def __post_init__(self):
        if self.clean is not None and self.clean.shape != self.degraded.shape:
            raise PairingError(f"{self.name}: degraded {self.degraded.shape} vs clean {self.clean.shape}")
        for arr in (self.degraded, self.clean):
            if arr is not None:
                arr.setflags(write=False)


@dataclass(frozen=True)
class BatchPlan:
    n_tasks: int
    samples_per_task: int

    @property
    def batch_size(self) -> int:
        return self.n_tasks * self.samples_per_task

    def labels(self) -> list[int]:
        return [t for t in range(self.n_tasks) for _ in range(self.samples_per_task)]


def _check(cond, msg):
    if not cond:
        raise ParameterRangeError(msg)


def validate_spec(spec: DegradationSpec) -> None:
    if spec.task not in REQUIRED_PARAMS:
        raise ParameterRangeError(f"unknown task {spec.task!r}")
    if spec.domain_tag not in DOMAINS:
        raise ParameterRangeError(f"unknown domain_tag {spec.domain_tag!r}")
    p = spec.params
    missing = [k for k in REQUIRED_PARAMS[spec.task] if k not in p]
    _check(not missing, f"{spec.task}: missing parameters {missing}")
    for k, v in p.items():
        _check(math.isfinite(float(v)), f"{spec.task}: parameter {k} is not finite")
    if spec.task == "noise":
        _check(p["sigma"] >= 0, "sigma must be >= 0")
    elif spec.task == "haze":
        _check(0 < p["t"] <= 1, "haze transmission must lie in (0, 1]")
        _check(0 <= p["airlight"] <= 1, "airlight must lie in [0, 1]")
    elif spec.task == "rain":
        _check(0 <= p["density"] <= 1, "rain density must lie in [0, 1]")
        _check(0 <= p["intensity"] <= 1, "rain intensity must lie in [0, 1]")
    elif spec.task == "lowlight":
        _check(p["gamma"] > 0, "gamma must be > 0")
        _check(p["gain"] >= 0, "gain must be >= 0")
    elif spec.task == "underwater":
        for k in ("atten_r", "atten_g", "atten_b", "cast"):
            _check(0 <= p[k] <= 1, f"{k} must lie in [0, 1]")
    if "contrast" in p:
        _check(p["contrast"] > 0, "contrast must be > 0")


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _rain_kernel(angle_deg: float, length: int = RAIN_STREAK_LENGTH) -> np.ndarray:
    k = np.zeros((length, length))
    c = (length - 1) / 2
    theta = math.radians(angle_deg)
    # streaks fall downward, tilted by angle from vertical
    dx, dy = math.sin(theta), math.cos(theta)
    for s in np.linspace(-c, c, 4 * length):
        x, y = int(round(c + s * dx)), int(round(c + s * dy))
        k[y, x] = 1.0
    return k / k.sum()


def synthesize_degradation(clean: np.ndarray, spec: DegradationSpec, rng) -> np.ndarray:
    """Apply ``spec`` to ``clean``; deterministic given the rng seed."""
    validate_spec(spec)
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise SizeError(f"expected an HxWx3 image, got {clean.shape}")
    rng = _as_rng(rng)
    p = spec.params
    x = clean
    if spec.task == "noise":
        y = x + rng.normal(0.0, 1.0, size=x.shape) * p["sigma"]
    elif spec.task == "haze":
        y = p["t"] * x + (1.0 - p["t"]) * p["airlight"]
    elif spec.task == "rain":
        h, w, _ = x.shape
        seeds = (rng.random((h, w)) < p["density"]).astype(np.float64)
        mask = ndimage.convolve(seeds, _rain_kernel(p["angle"]), mode="wrap") * RAIN_STREAK_LENGTH
        mask = np.clip(mask, 0.0, 1.0)[..., None] * p["intensity"]
        y = x * (1.0 - mask) + mask
    elif spec.task == "lowlight":
        y = p["gain"] * np.power(np.clip(x, 0.0, 1.0), p["gamma"])
    else:
        atten = np.array([p["atten_r"], p["atten_g"], p["atten_b"]])
        y = x * atten + p["cast"] * UNDERWATER_TINT
    y = np.clip(y, 0.0, 1.0)
    if "contrast" in p:
        shift = np.array([p.get("shift_r", 0.0), p.get("shift_g", 0.0), p.get("shift_b", 0.0)])
        mean = y.mean(axis=(0, 1), keepdims=True)
        y = np.clip((y - mean) * p["contrast"] + mean + shift, 0.0, 1.0)
    return y.astype(np.float32)


def sample_spec(task: str, domain: str, cfg: DataConfig, rng) -> DegradationSpec:
    rng = _as_rng(rng)
    try:
        ranges = cfg.ranges[task][domain]
    except KeyError as exc:
        raise ConfigurationError(f"no parameter ranges for {task}/{domain}") from exc
    params = {}
    for name in REQUIRED_PARAMS[task]:
        lo, hi = ranges[name]
        params[name] = float(rng.uniform(lo, hi))
    if domain == "target":
        lo, hi = cfg.target_contrast
        params["contrast"] = float(rng.uniform(lo, hi))
        for ch in "rgb":
            params[f"shift_{ch}"] = float(rng.uniform(-cfg.target_color_shift, cfg.target_color_shift))
    return DegradationSpec(task, params, domain)


def check_ranges(cfg: DataConfig) -> None:
    """Reject malformed ranges and, under ``strict_shift``, overlapping source/target ranges."""
    for task in cfg.tasks:
        if task not in cfg.ranges:
            raise ConfigurationError(f"no ranges configured for task {task!r}")
        for domain in DOMAINS:
            for name in REQUIRED_PARAMS[task]:
                try:
                    lo, hi = cfg.ranges[task][domain][name]
                except (KeyError, TypeError, ValueError) as exc:
                    raise ConfigurationError(f"bad range for {task}/{domain}/{name}") from exc
                if lo > hi:
                    raise ConfigurationError(f"empty range for {task}/{domain}/{name}: [{lo}, {hi}]")
        if cfg.strict_shift:
            for name in REQUIRED_PARAMS[task]:
                (a, b), (c, d) = cfg.ranges[task]["source"][name], cfg.ranges[task]["target"][name]
                if not (b < c or d < a):
                    raise ConfigurationError(
                        f"source and target ranges overlap for {task}/{name}: [{a}, {b}] vs [{c}, {d}]")


def generate_clean_image(size: int, rng) -> np.ndarray:
    """Procedural scene: smooth colour field, a few flat shapes and a sinusoidal texture."""
    rng = _as_rng(rng)
    coarse = rng.random((4, 4, 3))
    img = ndimage.zoom(coarse, (size / 4, size / 4, 1), order=1)[:size, :size]
    yy, xx = np.mgrid[0:size, 0:size] / size
    for _ in range(rng.integers(2, 5)):
        color = rng.random(3)
        cy, cx, r = rng.random(), rng.random(), rng.uniform(0.1, 0.3)
        if rng.random() < 0.5:
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
        else:
            m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.5, 1.5))
        img[m] = 0.3 * img[m] + 0.7 * color
    freq, phase = rng.uniform(4, 16), rng.uniform(0, 2 * np.pi)
    theta = rng.uniform(0, np.pi)
    tex = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = img + 0.08 * tex[..., None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(pair: SamplePair, crop: int, rng) -> SamplePair:
    """Random flips, 90-degree rotation and a crop, applied identically to both images.

    Draw order: horizontal flip, vertical flip, rotation count, crop top, crop left.
    With ``rng=None`` no transform is drawn and the top-left window is taken.
    """
    h, w = pair.degraded.shape[:2]
    if h < crop or w < crop:
        raise SizeError(f"image {h}x{w} is smaller than crop {crop}")
    if rng is None:
        hflip = vflip = False
        k = top = left = 0
    else:
        hflip = rng.random() < 0.5
        vflip = rng.random() < 0.5
        k = int(rng.integers(0, 4))
        # rotate before cropping; odd k swaps the axes
        rh, rw = (w, h) if k % 2 else (h, w)
        top = int(rng.integers(0, rh - crop + 1))
        left = int(rng.integers(0, rw - crop + 1))

    def apply(img):
        if img is None:
            return None
        if hflip:
            img = img[:, ::-1]
        if vflip:
            img = img[::-1]
        img = np.rot90(img, k)
        return np.ascontiguousarray(img[top:top + crop, left:left + crop])

    return SamplePair(apply(pair.degraded), apply(pair.clean), pair.task_label, pair.domain_tag, pair.name)


def make_balanced_batches(datasets: Sequence[Sequence[SamplePair]], plan: BatchPlan, rng,
                          epochs: int | None = None) -> Iterator[list[SamplePair]]:
    """Yield task-major batches; every task is resampled to the size of the largest one per epoch.

    The largest task is visited as a permutation; smaller tasks are drawn with replacement.
    ``epochs=None`` streams forever.
    """
    if len(datasets) != plan.n_tasks:
        raise ConfigurationError(f"plan expects {plan.n_tasks} tasks, got {len(datasets)}")
    sizes = [len(d) for d in datasets]
    if min(sizes) == 0:
        raise ConfigurationError(f"empty task dataset (sizes {sizes})")
    rng = _as_rng(rng)
    n = max(sizes)
    per_epoch = n // plan.samples_per_task
    if per_epoch == 0:
        raise ConfigurationError(f"largest task has {n} samples < samples_per_task {plan.samples_per_task}")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = [rng.permutation(s) if s == n else rng.integers(0, s, size=n) for s in sizes]
        for b in range(per_epoch):
            lo, hi = b * plan.samples_per_task, (b + 1) * plan.samples_per_task
            yield [datasets[t][i] for t in range(plan.n_tasks) for i in order[t][lo:hi]]
        epoch += 1


def steps_per_epoch(datasets: Sequence[Sequence], plan: BatchPlan) -> int:
    return max(len(d) for d in datasets) // plan.samples_per_task


def collate(batch: Sequence[SamplePair]):
    """Stack a batch into NCHW float32 arrays plus an integer label vector."""
    degraded = np.stack([np.transpose(p.degraded, (2, 0, 1)) for p in batch]).astype(np.float32)
    clean = np.stack([np.transpose(p.clean, (2, 0, 1)) for p in batch]).astype(np.float32)
    labels = np.array([p.task_label for p in batch], dtype=np.int64)
    return degraded, clean, labels


# --- on-disk layout: <root>/<task>/<split>/{input,target}/*.png + spec.json ---

def save_image(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageFormatError(f"cannot decode image {path}: {exc}") from exc
    return arr


def image_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def quantize_8bit(img: np.ndarray) -> np.ndarray:
    """What an image looks like after a PNG round trip."""
    return (np.clip(np.rint(np.asarray(img) * 255.0), 0, 255) / 255.0).astype(np.float32)


def synthesize_pairs(task: str, split: str, domain: str, count: int, cfg: DataConfig,
                     seed: int) -> list[tuple[SamplePair, dict]]:
    """In-memory split, identical to what ``synthesize_split`` writes and the loader reads back."""
    keys = (DOMAINS.index(domain), TASK_INDEX[task], ("train", "test").index(split))
    out = []
    for i in range(count):
        s = image_seed(seed, *keys, i)
        rng = np.random.default_rng(s)
        clean = generate_clean_image(cfg.image_size, rng)
        spec = sample_spec(task, domain, cfg, rng)
        degraded = synthesize_degradation(clean, spec, rng)
        pair = SamplePair(quantize_8bit(degraded), quantize_8bit(clean), TASK_INDEX[task], domain,
                          f"{task}/{i:05d}.png")
        out.append((pair, {**spec.to_dict(), "seed": s}))
    return out


def synthesize_split(root: Path, task: str, split: str, domain: str, count: int,
                     cfg: DataConfig, seed: int) -> list[dict]:
    out = Path(root) / task / split
    (out / "input").mkdir(parents=True, exist_ok=True)
    (out / "target").mkdir(parents=True, exist_ok=True)
    records = {}
    for pair, record in synthesize_pairs(task, split, domain, count, cfg, seed):
        name = pair.name.split("/", 1)[1]
        save_image(out / "input" / name, pair.degraded)
        save_image(out / "target" / name, pair.clean)
        records[name] = record
    with open(out / "spec.json", "w") as fh:
        json.dump(records, fh, indent=1, sort_keys=True)
    return list(records.values())


def load_folder_dataset(root, split: str, domain_tag: str | None = None,
                        require_target: bool = True) -> list[SamplePair]:
    """Read ``root/<task>/<split>/{input,target}/*.png`` in lexicographic order.

    Degraded and clean images are paired by identical filename. When ``spec.json``
    is present its ``domain_tag`` wins over the ``domain_tag`` argument.
    """
    root = Path(root)
    pairs: list[SamplePair] = []
    task_dirs = sorted(p for p in root.iterdir() if p.is_dir()) if root.is_dir() else []
    for task_dir in task_dirs:
        if task_dir.name not in TASK_INDEX:
            log.debug("skipping non-task directory %s", task_dir)
            continue
        split_dir = task_dir / split
        in_dir, tgt_dir = split_dir / "input", split_dir / "target"
        if not in_dir.is_dir():
            continue
        sidecar = {}
        if (split_dir / "spec.json").exists():
            with open(split_dir / "spec.json") as fh:
                sidecar = json.load(fh)
        inputs = sorted(p.name for p in in_dir.iterdir() if p.is_file())
        has_target = tgt_dir.is_dir()
        targets = set(p.name for p in tgt_dir.iterdir() if p.is_file()) if has_target else set()
        if (has_target or require_target) and set(inputs) != targets:
            missing = sorted(set(inputs) ^ targets)
            raise PairingError(f"{split_dir}: unpaired files {missing[:5]}")
        for name in inputs:
            degraded = read_image(in_dir / name)
            clean = read_image(tgt_dir / name) if has_target else None
            tag = sidecar.get(name, {}).get("domain_tag", domain_tag or "source")
            pairs.append(SamplePair(degraded, clean, TASK_INDEX[task_dir.name], tag,
                                    f"{task_dir.name}/{name}"))
    if not pairs:
        warnings.warn(f"no samples found under {root} for split {split!r}", stacklevel=2)
    return pairs


def split_by_task(pairs: Sequence[SamplePair], tasks: Sequence[str] = TASKS) -> list[list[SamplePair]]:
    """Group samples per configured task, preserving order."""
    return [[p for p in pairs if p.task_label == TASK_INDEX[t]] for t in tasks]
