import json
import os

import numpy as np
import pytest
import torch

from changen import datagen, toydata
from changen.core import make_rng, read_manifest, write_manifest
from changen.datagen import (LAYOUT, generate_dataset, load_bitemporal, sample_scp, synthesize_large,
                             tiling_discrepancy)
from changen.eventsim import EventConfig, replay
from changen.gennet import Generator, GeneratorConfig


@pytest.fixture(scope="module")
def gen():
    torch.manual_seed(0)
    return Generator(GeneratorConfig(num_classes=3, width_scale=0.0625)).eval()


@pytest.fixture(scope="module")
def scenes():
    return toydata.scenes(10, 32, seed=2)


def test_null_event_chain(gen, scenes):
    img, mask = scenes[0]
    (s,) = sample_scp(img, mask, gen, EventConfig(p_create=0, p_remove=0), make_rng(0), n=1)
    assert not s.change.any() and np.array_equal(s.mask_t1, s.mask_t)


@pytest.mark.parametrize("condition", ["generated", "real"])
def test_chain_replays_and_ranges(gen, scenes, condition):
    img, mask = scenes[1]
    samples = sample_scp(img, mask, gen, EventConfig(), make_rng(1), n=3, condition=condition)
    assert len(samples) == 3
    prev_mask, prev_img = mask, img
    for s in samples:
        s.check()
        assert np.array_equal(s.mask_t, prev_mask)
        assert np.array_equal(replay(s.mask_t, s.events), s.mask_t1)
        assert s.image_t1.min() >= -1 and s.image_t1.max() <= 1
        assert np.array_equal(s.image_t, prev_img)
        prev_mask, prev_img = s.mask_t1, s.image_t1
    # fresh noise per step: a repeated mask still gets a new image
    same = sample_scp(img, mask, gen, EventConfig(p_create=0, p_remove=0), make_rng(2), n=2, condition="real")
    assert np.abs(same[0].image_t1 - same[1].image_t1).mean() > 0


def test_chain_argument_errors(gen, scenes):
    img, mask = scenes[0]
    with pytest.raises(ValueError):
        sample_scp(img, mask, gen, EventConfig(), make_rng(0), n=0)
    with pytest.raises(ValueError):
        sample_scp(img, mask, gen, EventConfig(), make_rng(0), condition="other")


@pytest.mark.parametrize("n", [1, 2])
def test_generate_dataset_count_and_consistency(tmp_path, gen, scenes, n):
    manifest = generate_dataset(scenes, gen, EventConfig(), n, tmp_path, seed=0)
    recs = read_manifest(manifest)
    assert len(recs) == len(scenes) * n
    assert len({r["id"] for r in recs}) == len(recs)
    for d in LAYOUT:
        assert (tmp_path / d).is_dir()
    for item in load_bitemporal(manifest, with_events=True):
        assert np.array_equal(item["change"] != 0, item["mask_t"] != item["mask_t1"])
        assert np.array_equal(replay(item["mask_t"], item["events"]), item["mask_t1"])
    for r in recs:
        assert set(r) == {"id", "t0_image", "t0_mask", "t1_image", "t1_mask", "change", "events"}


def _snapshot(root):
    return {p: os.path.getmtime(p) for p in root.rglob("*") if p.is_file()}


def test_generate_dataset_idempotent_and_resumable(tmp_path, gen, scenes):
    manifest = generate_dataset(scenes[:4], gen, EventConfig(), 2, tmp_path, seed=0)
    full = read_manifest(manifest)
    before = _snapshot(tmp_path)
    generate_dataset(scenes[:4], gen, EventConfig(), 2, tmp_path, seed=0)
    assert _snapshot(tmp_path) == before
    # simulate an interrupted run: drop the last three records
    write_manifest(manifest, full[:-3])
    generate_dataset(scenes[:4], gen, EventConfig(), 2, tmp_path, seed=0)
    again = read_manifest(manifest)
    assert sorted(r["id"] for r in again) == sorted(r["id"] for r in full)
    a = {i["id"]: i for i in load_bitemporal(manifest)}
    b = {i["id"]: i for i in load_bitemporal(manifest)}
    assert all(np.array_equal(a[k]["mask_t1"], b[k]["mask_t1"]) for k in a)


def test_generate_dataset_deterministic(tmp_path, gen, scenes):
    m1 = generate_dataset(scenes[:3], gen, EventConfig(), 1, tmp_path / "a", seed=5)
    m2 = generate_dataset(scenes[:3], gen, EventConfig(), 1, tmp_path / "b", seed=5)
    for x, y in zip(load_bitemporal(m1), load_bitemporal(m2)):
        assert np.array_equal(x["image_t1"], y["image_t1"]) and np.array_equal(x["change"], y["change"])


def test_generate_from_single_temporal_manifest(tmp_path, gen):
    src = toydata.write_single_temporal(tmp_path / "src", 3, 32, seed=0)
    from changen.core import load_dataset
    ds = load_dataset(tmp_path / "src", src)
    manifest = generate_dataset(ds, gen, EventConfig(), 1, tmp_path / "out")
    assert [r["id"] for r in read_manifest(manifest)] == ["scene_00000_1", "scene_00001_1", "scene_00002_1"]


def test_synthesize_large_whole_image(gen):
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (1024, 1024, 3)).astype(np.float32)
    mask = toydata.sample_layout(rng, 1024)
    assert synthesize_large(mask, img, mask, gen).shape == (1024, 1024, 3)


def test_synthesize_large_pad_crop(gen):
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (70, 45, 3)).astype(np.float32)
    mask = np.zeros((70, 45), dtype=np.int64)
    out = synthesize_large(mask, img, mask, gen)
    assert out.shape == (70, 45, 3) and out.min() >= -1 and out.max() <= 1
    assert synthesize_large(mask, img, mask, gen, tile_size=32).shape == (70, 45, 3)
    with pytest.raises(Exception):
        synthesize_large(mask, img, mask, gen, tile_size=20)


def test_tiling_discrepancy_reported(gen, scenes):
    rng = np.random.default_rng(1)
    img = rng.uniform(-1, 1, (64, 64, 3)).astype(np.float32)
    mask = toydata.sample_layout(rng, 64)
    d = tiling_discrepancy(mask, img, mask, gen, 32)
    assert np.isfinite(d) and d > 0  # tiles see less context: seams are expected, not hidden


def test_oom_advises_tiling(gen, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("DefaultCPUAllocator: not enough memory")

    monkeypatch.setattr(datagen, "synthesize", boom)
    mask = np.zeros((32, 32), dtype=np.int64)
    with pytest.raises(MemoryError, match="tile"):
        synthesize_large(mask, np.zeros((32, 32, 3)), mask, gen)
