import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udair.config import TASKS, DataConfig
from udair.data import (BatchPlan, DegradationSpec, SamplePair, augment, generate_clean_image,
                        load_folder_dataset, make_balanced_batches, sample_spec, save_image,
                        synthesize_degradation, synthesize_pairs, synthesize_split, REQUIRED_PARAMS)
from udair.errors import ConfigurationError, ImageFormatError, PairingError, ParameterRangeError, SizeError


@pytest.fixture
def image():
    return generate_clean_image(32, np.random.default_rng(3))


def test_zero_noise_is_identity(image):
    out = synthesize_degradation(image, DegradationSpec("noise", {"sigma": 0.0}), 0)
    np.testing.assert_array_equal(out, image)


def test_unit_lowlight_is_identity(image):
    out = synthesize_degradation(image, DegradationSpec("lowlight", {"gamma": 1.0, "gain": 1.0}), 0)
    np.testing.assert_allclose(out, image, atol=1e-7)


def test_haze_on_constant_image():
    x = np.full((8, 8, 3), 0.2, dtype=np.float32)
    out = synthesize_degradation(x, DegradationSpec("haze", {"t": 0.5, "airlight": 1.0}), 0)
    np.testing.assert_allclose(out, 0.6, atol=1e-6)


@pytest.mark.parametrize("task,params", [
    ("noise", {"sigma": -0.1}),
    ("haze", {"t": 0.0, "airlight": 0.5}),
    ("haze", {"t": 0.5, "airlight": 1.5}),
    ("lowlight", {"gamma": 0.0, "gain": 1.0}),
    ("underwater", {"atten_r": 1.2, "atten_g": 0.5, "atten_b": 0.5, "cast": 0.1}),
    ("rain", {"density": 0.01, "angle": 0.0}),
])
def test_invalid_params_rejected(task, params):
    with pytest.raises(ParameterRangeError):
        DegradationSpec(task, params)


@pytest.mark.parametrize("task", TASKS)
def test_synthesis_is_deterministic(task, image):
    cfg = DataConfig()
    spec = sample_spec(task, "target", cfg, np.random.default_rng(1))
    a = synthesize_degradation(image, spec, 42)
    b = synthesize_degradation(image, spec, 42)
    assert a.shape == image.shape
    assert a.tobytes() == b.tobytes()


@settings(max_examples=60, deadline=None)
@given(task=st.sampled_from(TASKS), domain=st.sampled_from(["source", "target"]), seed=st.integers(0, 2**31))
def test_outputs_stay_in_unit_range(task, domain, seed):
    rng = np.random.default_rng(seed)
    img = generate_clean_image(16, rng)
    out = synthesize_degradation(img, sample_spec(task, domain, DataConfig(), rng), rng)
    assert np.isfinite(out).all() and out.min() >= 0.0 and out.max() <= 1.0
    pair = augment(SamplePair(out, img, 0), 8, rng)
    assert pair.degraded.min() >= 0.0 and pair.degraded.max() <= 1.0


@pytest.mark.parametrize("task", TASKS)
def test_source_and_target_draws_fall_in_disjoint_ranges(task):
    cfg = DataConfig()
    rng = np.random.default_rng(0)
    for _ in range(1000):
        for domain in ("source", "target"):
            spec = sample_spec(task, domain, cfg, rng)
            for name in REQUIRED_PARAMS[task]:
                lo, hi = cfg.ranges[task][domain][name]
                assert lo <= spec.params[name] <= hi
    for name in REQUIRED_PARAMS[task]:
        (a, b), (c, d) = cfg.ranges[task]["source"][name], cfg.ranges[task]["target"][name]
        assert b < c or d < a


class ScriptedRng:
    """Stands in for a Generator: fixed draws for random() and integers()."""

    def __init__(self, uniform=0.9, integer=0):
        self.uniform, self.integer = uniform, integer

    def random(self):
        return self.uniform

    def integers(self, lo, hi=None):
        return self.integer


def test_augment_identity_branch_takes_top_left_window(image):
    pair = SamplePair(image, image * 0.5, 1)
    out = augment(pair, 16, ScriptedRng())
    np.testing.assert_array_equal(out.degraded, image[:16, :16])
    np.testing.assert_array_equal(out.clean, (image * 0.5)[:16, :16])


def test_augment_applies_same_transform_to_both(image):
    rng = np.random.default_rng(5)
    for _ in range(50):
        out = augment(SamplePair(image, image.copy(), 0), 16, rng)
        assert out.degraded.shape == (16, 16, 3)
        np.testing.assert_array_equal(out.degraded, out.clean)


def test_augment_rejects_small_images():
    small = np.zeros((64, 64, 3), dtype=np.float32)
    with pytest.raises(SizeError):
        augment(SamplePair(small, small, 0), 128, np.random.default_rng(0))


def _pairs(task, n):
    return [SamplePair(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4, 3), np.float32), task, name=f"{task}-{i}")
            for i in range(n)]


def test_balanced_batches_are_task_major():
    plan = BatchPlan(5, 2)
    data = [_pairs(t, 3 + t) for t in range(5)]
    stream = make_balanced_batches(data, plan, np.random.default_rng(0), epochs=2)
    batches = list(stream)
    assert batches
    for batch in batches:
        assert [p.task_label for p in batch] == [0, 0, 1, 1, 2, 2, 3, 3, 4, 4]


def test_small_task_resampled_to_largest():
    plan = BatchPlan(2, 1)
    data = [_pairs(0, 10), _pairs(1, 2)]
    batches = list(make_balanced_batches(data, plan, np.random.default_rng(7), epochs=1))
    draws = Counter(b[1].name for b in batches)
    big = Counter(b[0].name for b in batches)
    assert sum(draws.values()) == 10
    assert set(draws) <= {"1-0", "1-1"}
    # largest task visits every sample exactly once per epoch
    assert all(v == 1 for v in big.values()) and len(big) == 10


def test_batches_deterministic_given_seed():
    plan = BatchPlan(2, 2)
    data = [_pairs(0, 6), _pairs(1, 3)]
    a = [[p.name for p in b] for b in make_balanced_batches(data, plan, np.random.default_rng(3), epochs=3)]
    b = [[p.name for p in b] for b in make_balanced_batches(data, plan, np.random.default_rng(3), epochs=3)]
    assert a == b


def test_empty_task_is_configuration_error():
    with pytest.raises(ConfigurationError):
        next(make_balanced_batches([_pairs(0, 3), []], BatchPlan(2, 1), np.random.default_rng(0)))


# --- folder datasets ---

def _write_pairs(root, task, names, with_target=True):
    for sub in ("input", "target") if with_target else ("input",):
        (root / task / "test" / sub).mkdir(parents=True, exist_ok=True)
    for name in names:
        img = generate_clean_image(16, np.random.default_rng(len(name)))
        save_image(root / task / "test" / "input" / name, img)
        if with_target:
            save_image(root / task / "test" / "target" / name, img)


def test_load_three_pairs(tmp_path):
    _write_pairs(tmp_path, "haze", ["b.png", "a.png", "c.png"])
    pairs = load_folder_dataset(tmp_path, "test")
    assert [p.name for p in pairs] == ["haze/a.png", "haze/b.png", "haze/c.png"]
    assert all(p.task_label == 1 for p in pairs)


def test_missing_counterpart_is_pairing_error(tmp_path):
    _write_pairs(tmp_path, "noise", ["a.png", "b.png"])
    (tmp_path / "noise" / "test" / "target" / "b.png").unlink()
    with pytest.raises(PairingError):
        load_folder_dataset(tmp_path, "test")


def test_empty_folder_warns(tmp_path):
    with pytest.warns(UserWarning):
        assert load_folder_dataset(tmp_path, "test") == []


def test_undecodable_image(tmp_path):
    _write_pairs(tmp_path, "rain", ["a.png"])
    (tmp_path / "rain" / "test" / "input" / "a.png").write_bytes(b"not an image")
    with pytest.raises(ImageFormatError):
        load_folder_dataset(tmp_path, "test")


def test_synthesized_split_round_trips(tmp_path):
    cfg = DataConfig(image_size=16)
    synthesize_split(tmp_path, "underwater", "test", "target", 3, cfg, seed=11)
    sidecar = json.loads((tmp_path / "underwater" / "test" / "spec.json").read_text())
    assert len(sidecar) == 3 and all(r["domain_tag"] == "target" for r in sidecar.values())
    pairs = load_folder_dataset(tmp_path, "test")
    assert len(pairs) == 3 and pairs[0].domain_tag == "target"
    first = (tmp_path / "underwater" / "test" / "input" / "00000.png").read_bytes()
    synthesize_split(tmp_path, "underwater", "test", "target", 3, cfg, seed=11)
    assert (tmp_path / "underwater" / "test" / "input" / "00000.png").read_bytes() == first


def test_in_memory_pairs_match_disk_round_trip(tmp_path):
    cfg = DataConfig(image_size=16)
    synthesize_split(tmp_path, "rain", "train", "source", 3, cfg, seed=5)
    loaded = load_folder_dataset(tmp_path, "train")
    memory = [p for p, _ in synthesize_pairs("rain", "train", "source", 3, cfg, seed=5)]
    for a, b in zip(loaded, memory):
        assert a.name == b.name and a.task_label == b.task_label
        np.testing.assert_array_equal(a.degraded, b.degraded)
        np.testing.assert_array_equal(a.clean, b.clean)
