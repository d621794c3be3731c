"""Synthetic change dataset production from single-temporal data."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .core import (BitemporalSample, SingleTemporalDataset, ValidationError, crop_to, ensure_dir, make_rng,
                   pad_to_multiple, read_image, read_manifest, read_mask, tile, untile, write_image,
                   write_manifest, write_mask)
from .eventsim import EventConfig, derive_change_label, event_from_dict, event_to_dict, simulate_event
from .gennet import Generator, synthesize

log = logging.getLogger(__name__)

LAYOUT = ("t0", "t1", "masks_t0", "masks_t1", "change", "events")
MANIFEST = "manifest.jsonl"


def synthesize_large(mask_t1, image_t, mask_t, gen: Generator, seed=0, tile_size: int | None = None):
    """Synthesize an arbitrary-size image.

    The default whole-image path pads to a multiple of 32, runs once and
    crops back. With ``tile_size`` (a multiple of 32) tiles are synthesized
    independently and pasted back without blending, so seams may show.
    """
    image_t = np.asarray(image_t)
    h, w = image_t.shape[:2]
    if tile_size is None:
        img_p, _ = pad_to_multiple(image_t, 32)
        m_p, _ = pad_to_multiple(mask_t, 32)
        m1_p, _ = pad_to_multiple(mask_t1, 32)
        try:
            out = synthesize(m1_p, img_p, m_p, gen, seed=seed)
        except RuntimeError as err:
            if "memory" in str(err).lower():
                raise MemoryError("whole-image synthesis ran out of memory; retry with tile_size") from err
            raise
        return crop_to(out, (h, w))
    if tile_size % 32:
        raise ValidationError("tile_size must be a multiple of 32")
    img_p, _ = pad_to_multiple(image_t, tile_size)
    m_p, _ = pad_to_multiple(mask_t, tile_size)
    m1_p, _ = pad_to_multiple(mask_t1, tile_size)
    pieces = tile(img_p, m_p, tile_size)
    post = {off: m for _, m, off in tile(img_p, m1_p, tile_size)}
    outs = [(synthesize(post[off], img, m, gen, seed=seed), m, off) for img, m, off in pieces]
    out, _ = untile(outs, m_p.shape)
    return crop_to(out, (h, w))


def tiling_discrepancy(mask_t1, image_t, mask_t, gen, tile_size, seed=0) -> float:
    """Mean absolute difference between tiled and whole-image synthesis."""
    whole = synthesize_large(mask_t1, image_t, mask_t, gen, seed)
    tiled = synthesize_large(mask_t1, image_t, mask_t, gen, seed, tile_size=tile_size)
    return float(np.abs(whole - tiled).mean())


def sample_scp(image_t, mask_t, gen: Generator, event_cfg: EventConfig, rng, n: int = 1,
               condition: str = "generated", pool=None) -> list[BitemporalSample]:
    """Simulate ``n`` consecutive change steps starting from a real pair.

    Step j draws S_{t+j} from S_{t+j-1} and synthesizes I_{t+j} with fresh
    noise, conditioned on the previous generated image (``"generated"``) or on
    the real I_t / S_t (``"real"``). Each returned sample pairs steps j-1, j.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if condition not in ("generated", "real"):
        raise ValueError(f"unknown condition mode {condition!r}")
    image_prev, mask_prev = np.asarray(image_t, dtype=np.float32), np.asarray(mask_t)
    samples = []
    for _ in range(n):
        mask_next, events = simulate_event(mask_prev, event_cfg, rng, pool)
        seed = int(rng.integers(0, 2**31 - 1))
        if condition == "generated":
            image_next = synthesize_large(mask_next, image_prev, mask_prev, gen, seed)
        else:
            image_next = synthesize_large(mask_next, image_t, mask_t, gen, seed)
        image_next = image_next.astype(np.float32)
        change = derive_change_label(mask_prev, mask_next, events)
        samples.append(BitemporalSample(image_prev, mask_prev, mask_next, image_next, change, events))
        image_prev, mask_prev = image_next, mask_next
    return samples


def _iter_source(source):
    if isinstance(source, SingleTemporalDataset):
        for i, item in enumerate(source.items):
            yield item.id, (lambda i=i: source.load(i))
    else:
        for i, pair in enumerate(source):
            yield f"src_{i:05d}", (lambda pair=pair: pair)


def generate_dataset(source, gen: Generator, event_cfg: EventConfig, n: int, out, seed: int = 0,
                     condition: str = "generated") -> Path:
    """Write |source| * n samples under ``out`` plus ``manifest.jsonl``.

    Resumable: sources whose n sample ids are already in the manifest are
    skipped; a partially written chain is regenerated and only its missing
    ids are appended. Every source id has its own RNG stream.
    """
    out = ensure_dir(out)
    for d in LAYOUT:
        ensure_dir(out / d)
    manifest = out / MANIFEST
    done = {rec["id"] for rec in read_manifest(manifest)} if manifest.exists() else set()
    for sid, load in _iter_source(source):
        ids = [f"{sid}_{j}" for j in range(1, n + 1)]
        if all(i in done for i in ids):
            continue
        image_t, mask_t = load()
        samples = sample_scp(image_t, mask_t, gen, event_cfg, make_rng(seed, sid), n, condition)
        recs = []
        for sample_id, s in zip(ids, samples):
            s.check()
            if sample_id in done:
                continue
            recs.append(write_sample(out, sample_id, s))
        write_manifest(manifest, recs, append=True)
        done.update(r["id"] for r in recs)
        log.info("generated %s (%d samples)", sid, len(recs))
    return manifest


def write_sample(out: Path, sample_id: str, s: BitemporalSample) -> dict:
    rec = {
        "id": sample_id,
        "t0_image": f"t0/{sample_id}.png",
        "t1_image": f"t1/{sample_id}.png",
        "t0_mask": f"masks_t0/{sample_id}.png",
        "t1_mask": f"masks_t1/{sample_id}.png",
        "change": f"change/{sample_id}.png",
        "events": f"events/{sample_id}.json",
    }
    write_image(out / rec["t0_image"], s.image_t)
    write_image(out / rec["t1_image"], s.image_t1)
    write_mask(out / rec["t0_mask"], s.mask_t)
    write_mask(out / rec["t1_mask"], s.mask_t1)
    write_mask(out / rec["change"], s.change)
    with open(out / rec["events"], "w") as fh:
        json.dump([event_to_dict(e) for e in s.events], fh)
    return rec


def load_bitemporal(manifest, with_events: bool = False):
    """Yield dicts with image_t, image_t1, mask_t, mask_t1 (when present), change and id."""
    manifest = Path(manifest)
    base = manifest.parent
    for rec in read_manifest(manifest):
        item = {
            "id": rec["id"],
            "image_t": read_image(base / rec["t0_image"]),
            "image_t1": read_image(base / rec["t1_image"]),
            "change": read_mask(base / rec["change"]),
        }
        for key, field in (("mask_t", "t0_mask"), ("mask_t1", "t1_mask")):
            if rec.get(field):
                item[key] = read_mask(base / rec[field])
        if with_events and rec.get("events"):
            with open(base / rec["events"]) as fh:
                item["events"] = [event_from_dict(d) for d in json.load(fh)]
        yield item
