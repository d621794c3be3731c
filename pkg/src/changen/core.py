"""Shared types, dataset ingestion, tiling, manifests, config and RNG streams."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
import yaml
from PIL import Image

BACKGROUND = 0


class IngestionError(RuntimeError):
    """A manifest entry references a file that cannot be read."""


class ValidationError(ValueError):
    """Data violates a shape, range or dtype contract."""


# ---------------------------------------------------------------------------
# masks and images
# ---------------------------------------------------------------------------

def validate_mask(mask, num_classes: int | None = None) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValidationError(f"mask must be a non-empty 2-D array, got shape {m.shape}")
    if not np.issubdtype(m.dtype, np.integer):
        raise ValidationError(f"mask dtype must be integral, got {m.dtype}")
    if m.size and m.min() < 0:
        raise ValidationError("mask labels must be non-negative")
    if num_classes is not None and m.size and m.max() >= num_classes:
        raise ValidationError(f"mask label {m.max()} >= class count {num_classes}")
    return m


def validate_image(image) -> np.ndarray:
    x = np.asarray(image)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"image must be H x W x 3, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("image contains non-finite values")
    if x.min() < -1.0 or x.max() > 1.0:
        raise ValidationError("image values outside [-1, 1]")
    return x


def normalize(raw) -> np.ndarray:
    """8-bit RGB -> float32 in [-1, 1]."""
    x = np.asarray(raw)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {x.shape}")
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValidationError("8-bit image values must lie in [0, 255]")
    return (x.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def denormalize(image) -> np.ndarray:
    """[-1, 1] floats -> uint8 RGB, rounding to nearest."""
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """H x W labels -> C x H x W float32 indicator planes."""
    return (np.arange(num_classes)[:, None, None] == mask[None]).astype(np.float32)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValidationError(f"{path}: mask must be single-channel, got mode {im.mode}")
        return np.array(im).astype(np.int64)


def write_mask(path, mask) -> None:
    m = validate_mask(mask)
    if m.max(initial=0) > 255:
        raise ValidationError("masks are stored as 8-bit rasters; labels must be < 256")
    Image.fromarray(m.astype(np.uint8), mode="L").save(path)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return normalize(np.array(im.convert("RGB")))


def write_image(path, image) -> None:
    Image.fromarray(denormalize(image), mode="RGB").save(path)


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def _grid(length: int, size: int, stride: int) -> list[int]:
    starts = list(range(0, length - size + 1, stride))
    if starts[-1] + size < length:
        starts.append(length - size)
    return starts


def tile(image, mask, size: int, stride: int | None = None):
    """Cut aligned image/mask tiles; returns a list of (image, mask, (row, col)).

    With stride == size and sides divisible by size the tiles partition the
    grid. Otherwise a final tile is anchored at the far edge so every pixel is
    covered.
    """
    stride = size if stride is None else stride
    image = np.asarray(image)
    mask = validate_mask(mask)
    h, w = mask.shape
    if image.shape[:2] != (h, w):
        raise ValidationError(f"image {image.shape[:2]} and mask {mask.shape} differ in size")
    if size < 1 or stride < 1:
        raise ValueError("tile size and stride must be positive")
    if size > min(h, w):
        raise ValueError(f"tile size {size} exceeds image size {h}x{w}")
    tiles = []
    for r in _grid(h, size, stride):
        for c in _grid(w, size, stride):
            tiles.append((image[r:r + size, c:c + size], mask[r:r + size, c:c + size], (r, c)))
    return tiles


def untile(tiles, shape: tuple[int, int]):
    """Inverse of :func:`tile`; later tiles overwrite earlier ones where they overlap."""
    h, w = shape
    first_img, first_mask, _ = tiles[0]
    image = np.zeros((h, w) + first_img.shape[2:], dtype=first_img.dtype)
    mask = np.zeros((h, w), dtype=first_mask.dtype)
    for img, m, (r, c) in tiles:
        th, tw = m.shape
        image[r:r + th, c:c + tw] = img
        mask[r:r + th, c:c + tw] = m
    return image, mask


def pad_to_multiple(array, multiple: int = 32, value=0):
    """Pad the two leading axes on the bottom/right; returns (padded, original (h, w))."""
    a = np.asarray(array)
    h, w = a.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
    if ph or pw:
        a = np.pad(a, pad, mode="constant", constant_values=value)
    return a, (h, w)


def crop_to(array, size: tuple[int, int]):
    h, w = size
    return np.asarray(array)[:h, :w]


# ---------------------------------------------------------------------------
# datasets and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetItem:
    id: str
    image: Path
    mask: Path


@dataclass(frozen=True)
class SingleTemporalDataset:
    items: tuple[DatasetItem, ...]
    class_count: int
    resolution: tuple[int, int] | None = None

    def __len__(self):
        return len(self.items)

    def __iter__(self) -> Iterator[DatasetItem]:
        return iter(self.items)

    def load(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        item = self.items[index]
        return read_image(item.image), read_mask(item.mask)


@dataclass
class BitemporalSample:
    image_t: np.ndarray
    mask_t: np.ndarray
    mask_t1: np.ndarray
    image_t1: np.ndarray
    change: np.ndarray
    events: list = field(default_factory=list)

    @property
    def binary_change(self) -> np.ndarray:
        return (self.change != 0).astype(np.uint8)

    def check(self) -> None:
        shape = self.mask_t.shape
        for name in ("mask_t1", "change"):
            if getattr(self, name).shape != shape:
                raise ValidationError(f"{name} shape differs from mask_t")
        for name in ("image_t", "image_t1"):
            if getattr(self, name).shape[:2] != shape:
                raise ValidationError(f"{name} spatial size differs from mask_t")
        if not np.array_equal(self.change == 0, self.mask_t == self.mask_t1):
            raise ValidationError("change label disagrees with mask inequality")


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_manifest(path, records: Iterable[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(root, manifest, class_count: int | None = None) -> SingleTemporalDataset:
    """Read a single-temporal manifest.

    Each line is an object with ``id`` and either ``image``/``mask`` or
    ``t0_image``/``t0_mask``. Relative paths resolve against the manifest's
    directory, falling back to ``root``.
    """
    manifest = Path(manifest)
    if not manifest.exists():
        raise IngestionError(f"manifest not found: {manifest}")
    root = Path(root)
    items, max_label, resolution = [], 0, None
    for rec in read_manifest(manifest):
        sid = str(rec["id"])
        paths = []
        for key in ("image", "mask"):
            rel = rec.get(key, rec.get(f"t0_{key}"))
            if rel is None:
                raise IngestionError(f"{sid}: no {key} path in manifest record")
            p = _resolve(rel, manifest.parent, root)
            if p is None:
                raise IngestionError(f"{sid}: missing {key} file {rel}")
            paths.append(p)
        with Image.open(paths[0]) as im:
            isize = im.size
        mask = read_mask(paths[1])
        if (mask.shape[1], mask.shape[0]) != isize:
            raise ValidationError(f"{sid}: image size {isize[::-1]} != mask size {mask.shape}")
        max_label = max(max_label, int(mask.max(initial=0)))
        resolution = resolution or mask.shape
        items.append(DatasetItem(sid, paths[0], paths[1]))
    if class_count is None:
        class_count = max(max_label + 1, 2)
    elif max_label >= class_count:
        raise ValidationError(f"mask label {max_label} >= class count {class_count}")
    return SingleTemporalDataset(tuple(items), class_count, resolution)


def _resolve(rel, *bases) -> Path | None:
    p = Path(rel)
    if p.is_absolute():
        return p if p.exists() else None
    for base in bases:
        if (base / p).exists():
            return base / p
    return None


# ---------------------------------------------------------------------------
# RNG discipline
# ---------------------------------------------------------------------------

def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return zlib.crc32(str(key).encode())


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream for (seed, *keys); keys may be ints or strings."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)] + [_key_to_int(k) for k in keys])))


def torch_seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int = 0
    crop_size: int = 256
    batch_size: int = 32
    iterations: int = 100_000
    width_scale: float = 1.0
    num_classes: int = 2
    noise_channels: int = 64
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    use_masking: bool = True
    use_destyle: bool = True
    ema: bool = False
    ema_decay: float = 0.999
    checkpoint_every: int = 5000
    sample_every: int = 5000
    log_every: int = 100
    augment: dict = field(default_factory=lambda: {
        "flip": True, "rotate": True, "transpose": True, "scale_jitter": (0.8, 1.25), "crop": True,
    })
    threads: int = 1

    def __post_init__(self):
        for name in ("crop_size", "batch_size", "iterations", "num_classes", "noise_channels", "threads"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.width_scale <= 0:
            raise ValidationError("width_scale must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def scaled(channels: int, width_scale: float) -> int:
    return max(1, int(round(channels * width_scale)))


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> dict:
    """Nested key/value config document (YAML or JSON)."""
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return data


def build(cls, section: dict | None, **overrides):
    """Instantiate a config dataclass from a mapping, rejecting unknown keys."""
    section = dict(section or {})
    section.update({k: v for k, v in overrides.items() if v is not None})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**section)


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


def as_list(x: Any) -> list:
    if isinstance(x, (list, tuple)):
        return list(x)
    return [x]


def batched(seq: Sequence, n: int):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]
