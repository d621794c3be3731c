"""Procedural shapes data for desk-scale runs.

Scenes hold rectangular buildings (class 1) and round tanks (class 2) on
textured ground. ``scenes`` gives single-temporal image/mask pairs;
``change_pairs`` gives a bitemporal benchmark whose changes come from an
independent process (fresh buildings, demolitions, lighting/season shifts).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ensure_dir, make_rng, normalize, write_image, write_manifest, write_mask

NUM_CLASSES = 3
BUILDING, TANK = 1, 2


@dataclass(frozen=True)
class Style:
    ground: tuple
    texture: float
    roofs: tuple
    tank: tuple
    light: float
    noise: float


def sample_style(rng) -> Style:
    ground = tuple(rng.uniform([60, 80, 40], [130, 140, 100]))
    roofs = tuple(tuple(rng.uniform(90, 230, size=3)) for _ in range(3))
    return Style(ground, float(rng.uniform(8, 25)), roofs, tuple(rng.uniform(170, 240, size=3)),
                 float(rng.uniform(0.85, 1.15)), float(rng.uniform(2, 6)))


def shift_style(style: Style, rng) -> Style:
    """Season/illumination drift between acquisitions."""
    ground = tuple(np.clip(np.array(style.ground) + rng.normal(0, 15, 3), 20, 200))
    return replace(style, ground=ground, light=float(np.clip(style.light * rng.uniform(0.8, 1.2), 0.6, 1.4)),
                   noise=float(rng.uniform(2, 6)))


def _free(mask, r0, c0, r1, c1, margin=1):
    h, w = mask.shape
    return not mask[max(r0 - margin, 0):min(r1 + margin, h), max(c0 - margin, 0):min(c1 + margin, w)].any()


def add_building(mask, rng, tries=30):
    h, w = mask.shape
    for _ in range(tries):
        bh, bw = (int(v) for v in rng.integers(max(3, h // 16), max(4, h // 4), size=2))
        r0, c0 = int(rng.integers(0, h - bh + 1)), int(rng.integers(0, w - bw + 1))
        if _free(mask, r0, c0, r0 + bh, c0 + bw):
            mask[r0:r0 + bh, c0:c0 + bw] = BUILDING
            return True
    return False


def add_tank(mask, rng, tries=30):
    h, w = mask.shape
    yy, xx = np.mgrid[:h, :w]
    for _ in range(tries):
        rad = float(rng.uniform(max(2, h / 32), max(3, h / 12)))
        cy, cx = rng.uniform(rad, h - rad), rng.uniform(rad, w - rad)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
        r, c = np.nonzero(disc)
        if len(r) and _free(mask, r.min(), c.min(), r.max() + 1, c.max() + 1):
            mask[disc] = TANK
            return True
    return False


def sample_layout(rng, size=64, buildings=(2, 7), tanks=(0, 3)) -> np.ndarray:
    mask = np.zeros((size, size), dtype=np.int64)
    for _ in range(int(rng.integers(*buildings))):
        add_building(mask, rng)
    for _ in range(int(rng.integers(*tanks))):
        add_tank(mask, rng)
    return mask


def render(mask, style: Style, rng) -> np.ndarray:
    """Mask + style -> uint8 RGB."""
    h, w = mask.shape
    field = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), sigma=max(h / 16, 1))
    field /= field.std() + 1e-8
    img = np.array(style.ground)[None, None] + style.texture * field[..., None]
    labels, n = ndimage.label(mask == BUILDING)
    shadow = np.zeros((h, w), dtype=bool)
    shadow[2:, 2:] = mask[:-2, :-2] == BUILDING
    img[shadow & (mask == 0)] *= 0.55
    for idx in range(1, n + 1):
        sel = labels == idx
        roof = np.array(style.roofs[int(rng.integers(0, len(style.roofs)))]) * rng.uniform(0.85, 1.15)
        rows, cols = np.nonzero(sel)
        ramp = (cols - cols.min()) / max(cols.max() - cols.min(), 1)
        img[rows, cols] = roof[None] * (0.85 + 0.3 * ramp)[:, None]
    tank = mask == TANK
    edge = tank & ~ndimage.binary_erosion(tank)
    img[tank] = np.array(style.tank)
    img[edge] *= 0.6
    img = img * style.light + rng.normal(0, style.noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def scenes(n, size=64, seed=0):
    """``n`` single-temporal (image in [-1, 1], mask) pairs."""
    out = []
    for i in range(n):
        rng = make_rng(seed, "scene", i)
        mask = sample_layout(rng, size)
        out.append((normalize(render(mask, sample_style(rng), rng)), mask))
    return out


def change_pairs(n, size=64, seed=0, p_new=0.6, p_demolish=0.5):
    """Bitemporal benchmark: dicts with image_t, image_t1, mask_t, mask_t1, change (binary)."""
    out = []
    for i in range(n):
        rng = make_rng(seed, "pair", i)
        mask_t = sample_layout(rng, size)
        mask_t1 = mask_t.copy()
        labels, nb = ndimage.label(mask_t == BUILDING)
        for idx in range(1, nb + 1):
            if rng.random() < p_demolish * 0.5:
                mask_t1[labels == idx] = 0
        for _ in range(int(rng.integers(0, 4))):
            if rng.random() < p_new:
                add_building(mask_t1, rng)
        style_t = sample_style(rng)
        style_t1 = shift_style(style_t, rng)
        out.append({
            "image_t": normalize(render(mask_t, style_t, rng)),
            "image_t1": normalize(render(mask_t1, style_t1, rng)),
            "mask_t": mask_t,
            "mask_t1": mask_t1,
            "change": (mask_t != mask_t1).astype(np.uint8),
        })
    return out


def write_single_temporal(out, n, size=64, seed=0) -> Path:
    out = ensure_dir(out)
    ensure_dir(out / "images")
    ensure_dir(out / "masks")
    recs = []
    for i, (img, mask) in enumerate(scenes(n, size, seed)):
        sid = f"scene_{i:05d}"
        write_image(out / "images" / f"{sid}.png", img)
        write_mask(out / "masks" / f"{sid}.png", mask)
        recs.append({"id": sid, "image": f"images/{sid}.png", "mask": f"masks/{sid}.png"})
    write_manifest(out / "manifest.jsonl", recs)
    return out / "manifest.jsonl"


def write_change_benchmark(out, n, size=64, seed=0) -> Path:
    out = ensure_dir(out)
    for d in ("t0", "t1", "masks_t0", "masks_t1", "change"):
        ensure_dir(out / d)
    recs = []
    for i, p in enumerate(change_pairs(n, size, seed)):
        sid = f"pair_{i:05d}"
        write_image(out / "t0" / f"{sid}.png", p["image_t"])
        write_image(out / "t1" / f"{sid}.png", p["image_t1"])
        write_mask(out / "masks_t0" / f"{sid}.png", p["mask_t"])
        write_mask(out / "masks_t1" / f"{sid}.png", p["mask_t1"])
        write_mask(out / "change" / f"{sid}.png", p["change"])
        recs.append({"id": sid, "t0_image": f"t0/{sid}.png", "t1_image": f"t1/{sid}.png",
                     "t0_mask": f"masks_t0/{sid}.png", "t1_mask": f"masks_t1/{sid}.png",
                     "change": f"change/{sid}.png", "events": None})
    write_manifest(out / "manifest.jsonl", recs)
    return out / "manifest.jsonl"
