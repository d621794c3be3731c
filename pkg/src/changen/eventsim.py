"""Learning-free change events on semantic masks: object creation and removal."""
from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .core import BACKGROUND, ValidationError, validate_mask
from .kernels import footprint_overlaps, label_components

CREATE = "create"
REMOVE = "remove"


@dataclass(frozen=True)
class Instance:
    """One connected component of a single class.

    ``footprint`` is a boolean array local to ``bbox`` = (r0, c0, r1, c1),
    end-exclusive.
    """

    label: int
    bbox: tuple
    footprint: np.ndarray = field(repr=False)

    @property
    def area(self) -> int:
        return int(self.footprint.sum())

    @property
    def pixels(self) -> set:
        r0, c0 = self.bbox[:2]
        rows, cols = np.nonzero(self.footprint)
        return {(int(r) + r0, int(c) + c0) for r, c in zip(rows, cols)}

    def full_mask(self, shape) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        r0, c0, r1, c1 = self.bbox
        out[r0:r1, c0:c1] = self.footprint
        return out


@dataclass(frozen=True)
class Placement:
    offset: tuple
    rotation: float = 0.0
    scale: float = 1.0


@dataclass(frozen=True)
class ChangeEvent:
    """A Remove names an instance of S_t; a Create carries its source instance,
    the sampled placement and the resulting placed instance. A Create that
    could not be placed has ``placed is None``.
    """

    kind: str
    instance: Instance
    placement: Placement | None = None
    placed: Instance | None = None

    @property
    def skipped(self) -> bool:
        return self.kind == CREATE and self.placed is None

    @property
    def region(self) -> Instance | None:
        return self.instance if self.kind == REMOVE else self.placed


@dataclass
class EventConfig:
    p_create: float = 0.5
    p_remove: float = 0.5
    k_min: int = 1
    k_max: int = 4
    scale_range: tuple = (0.75, 1.25)
    rotation: str = "right"  # "none", "right" (multiples of 90 deg) or "free"
    max_place_retries: int = 10
    allow_mixed: bool = True
    connectivity: int = 8

    def __post_init__(self):
        for name in ("p_create", "p_remove"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValidationError(f"{name}={p} outside [0, 1]")
        if not self.allow_mixed and self.p_create + self.p_remove > 1.0 + 1e-12:
            raise ValidationError("p_create + p_remove must be <= 1 when events are exclusive")
        if not 0 <= self.k_min <= self.k_max:
            raise ValidationError("need 0 <= k_min <= k_max")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError("scale_range must satisfy 0 < lo <= hi")
        if self.rotation not in ("none", "right", "free"):
            raise ValidationError(f"unknown rotation policy {self.rotation!r}")
        if self.max_place_retries < 1:
            raise ValidationError("max_place_retries must be >= 1")
        self.scale_range = (float(lo), float(hi))


# ---------------------------------------------------------------------------

def extract_instances(mask, connectivity: int = 8) -> list[Instance]:
    """Maximal same-class connected components, in raster order of first pixel."""
    mask = validate_mask(mask)
    labels, count = label_components(mask, connectivity)
    out = []
    for idx, sl in enumerate(ndimage.find_objects(labels, max_label=count), start=1):
        local = labels[sl] == idx
        r, c = sl[0].start, sl[1].start
        cls = int(mask[sl][local][0])
        out.append(Instance(cls, (r, c, sl[0].stop, sl[1].stop), local))
    return out


def simulate_remove(mask, k: int, rng, connectivity: int = 8):
    """Assign background to ``k`` randomly chosen instances."""
    mask = validate_mask(mask)
    instances = extract_instances(mask, connectivity)
    if k < 0 or k > len(instances):
        raise ValueError(f"cannot remove {k} of {len(instances)} instances")
    out = mask.copy()
    events = []
    if k == 0:
        return out, events
    for i in sorted(rng.choice(len(instances), size=k, replace=False).tolist()):
        inst = instances[i]
        r0, c0, r1, c1 = inst.bbox
        out[r0:r1, c0:c1][inst.footprint] = BACKGROUND
        events.append(ChangeEvent(REMOVE, inst))
    return out, events


def transform_footprint(footprint, rotation: float = 0.0, scale: float = 1.0) -> np.ndarray:
    """Nearest-neighbour scale then rotate a boolean footprint, cropped tight."""
    fp = np.asarray(footprint, dtype=bool)
    if scale != 1.0:
        h, w = fp.shape
        nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
        ri = np.minimum((np.arange(nh) + 0.5) * h / nh, h - 1).astype(int)
        ci = np.minimum((np.arange(nw) + 0.5) * w / nw, w - 1).astype(int)
        fp = fp[ri][:, ci]
    rot = float(rotation) % 360.0
    if rot % 90.0 == 0.0:
        fp = np.rot90(fp, int(rot // 90))
    else:
        fp = ndimage.rotate(fp.astype(np.uint8), rot, order=0, reshape=True, prefilter=False).astype(bool)
    if not fp.any():
        return np.zeros((0, 0), dtype=bool)
    rows, cols = np.nonzero(fp)
    return np.ascontiguousarray(fp[rows.min():rows.max() + 1, cols.min():cols.max() + 1])


def _sample_rotation(cfg: EventConfig, rng) -> float:
    if cfg.rotation == "right":
        return 90.0 * int(rng.integers(0, 4))
    if cfg.rotation == "free":
        return float(rng.uniform(0.0, 360.0))
    return 0.0


def simulate_create(mask, pool, k: int, cfg: EventConfig, rng):
    """Paste up to ``k`` pool instances onto background without overlap.

    Each instance gets up to ``cfg.max_place_retries`` attempts, each sampling
    a fresh scale, rotation and in-bounds position. Failures are returned as
    skipped Create events.
    """
    mask = validate_mask(mask)
    out = mask.copy()
    events = []
    if k <= 0:
        return out, events
    if not len(pool):
        raise ValueError("instance pool is empty")
    h, w = mask.shape
    occupied = (out != BACKGROUND).astype(np.uint8)
    picks = rng.choice(len(pool), size=k, replace=k > len(pool))
    lo, hi = cfg.scale_range
    for i in picks.tolist():
        src = pool[i]
        event = ChangeEvent(CREATE, src)
        for _ in range(cfg.max_place_retries):
            scale = float(rng.uniform(lo, hi)) if hi > lo else lo
            rotation = _sample_rotation(cfg, rng)
            fp = transform_footprint(src.footprint, rotation, scale)
            fh, fw = fp.shape
            if fh == 0 or fh > h or fw > w:
                continue
            r = int(rng.integers(0, h - fh + 1))
            c = int(rng.integers(0, w - fw + 1))
            if footprint_overlaps(occupied, fp.view(np.uint8), r, c):
                continue
            placed = Instance(src.label, (r, c, r + fh, c + fw), fp)
            out[r:r + fh, c:c + fw][fp] = src.label
            occupied[r:r + fh, c:c + fw] |= fp
            event = ChangeEvent(CREATE, src, Placement((r, c), rotation, scale), placed)
            break
        events.append(event)
    return out, events


def _sample_k(cfg: EventConfig, available: int, rng) -> int:
    return min(int(rng.integers(cfg.k_min, cfg.k_max + 1)), available)


def split_streams(rng, n: int = 3) -> list:
    """``n`` independent generators seeded from draws of ``rng``.

    Unlike ``Generator.spawn`` this depends only on the bit-generator state,
    so a checkpointed rng resumes to the same streams.
    """
    seeds = rng.integers(0, 2**63 - 1, size=n, dtype=np.int64)
    return [np.random.Generator(np.random.PCG64(int(s))) for s in seeds]


def simulate_event(mask, cfg: EventConfig, rng, pool=None):
    """One stochastic change event S_t -> S_{t+1}.

    Randomness is split into independent dispatch/remove/create streams, so a
    remove-only event reproduces ``simulate_remove`` driven by the remove
    stream. Removal is applied before creation when both fire. ``pool``
    defaults to the instances of the input mask.
    """
    mask = validate_mask(mask)
    dispatch, remove_rng, create_rng = split_streams(rng)
    if cfg.allow_mixed:
        do_remove = dispatch.random() < cfg.p_remove
        do_create = dispatch.random() < cfg.p_create
    else:
        u = dispatch.random()
        do_remove = u < cfg.p_remove
        do_create = not do_remove and u < cfg.p_remove + cfg.p_create
    instances = extract_instances(mask, cfg.connectivity)
    if pool is None:
        pool = instances
    out, events = mask.copy(), []
    if do_remove and instances:
        k = _sample_k(cfg, len(instances), remove_rng)
        out, ev = simulate_remove(out, k, remove_rng, cfg.connectivity)
        events += ev
    if do_create and len(pool):
        k = int(create_rng.integers(cfg.k_min, cfg.k_max + 1))
        out, ev = simulate_create(out, pool, k, cfg, create_rng)
        events += ev
    return out, events


def simulate_chain(mask, n: int, cfg: EventConfig, rng, pool=None):
    """``n`` successive events; step j only sees the mask of step j-1."""
    if n < 0:
        raise ValueError("n must be >= 0")
    steps = []
    current = validate_mask(mask)
    for _ in range(n):
        current, events = simulate_event(current, cfg, rng, pool)
        steps.append((current, events))
    return steps


def replay(mask, events):
    """Re-apply an event log; equals the simulated post-event mask bit-exactly."""
    out = validate_mask(mask).copy()
    for ev in events:
        region = ev.region
        if region is None:
            continue
        r0, c0, r1, c1 = region.bbox
        out[r0:r1, c0:c1][region.footprint] = BACKGROUND if ev.kind == REMOVE else region.label
    return out


def derive_change_label(mask_t, mask_t1, events=()):
    """Per-pixel change: 0 unchanged, 1 created, 2 removed."""
    mask_t = validate_mask(mask_t)
    mask_t1 = validate_mask(mask_t1)
    if mask_t.shape != mask_t1.shape:
        raise ValidationError(f"mask shapes differ: {mask_t.shape} vs {mask_t1.shape}")
    change = np.zeros(mask_t.shape, dtype=np.uint8)
    for kind, code in ((REMOVE, 2), (CREATE, 1)):
        for ev in events:
            if ev.kind == kind and ev.region is not None:
                r0, c0, r1, c1 = ev.region.bbox
                change[r0:r1, c0:c1][ev.region.footprint] = code
    differ = mask_t != mask_t1
    change[~differ] = 0
    # label edits not explained by the log (e.g. hand-made masks)
    orphan = differ & (change == 0)
    change[orphan & (mask_t1 != BACKGROUND)] = 1
    change[orphan & (mask_t1 == BACKGROUND)] = 2
    return change


def binary_change(change) -> np.ndarray:
    return (np.asarray(change) != 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# event log (de)serialization

def _pack(fp) -> dict:
    fp = np.asarray(fp, dtype=bool)
    return {"shape": list(fp.shape), "bits": base64.b64encode(np.packbits(fp).tobytes()).decode()}


def _unpack(d) -> np.ndarray:
    h, w = d["shape"]
    bits = np.unpackbits(np.frombuffer(base64.b64decode(d["bits"]), dtype=np.uint8))
    return bits[: h * w].reshape(h, w).astype(bool)


def _inst_to_dict(inst: Instance) -> dict:
    return {"label": inst.label, "bbox": list(inst.bbox), "footprint": _pack(inst.footprint)}


def _inst_from_dict(d) -> Instance:
    return Instance(int(d["label"]), tuple(d["bbox"]), _unpack(d["footprint"]))


def event_to_dict(ev: ChangeEvent) -> dict:
    d = {"kind": ev.kind, "instance": _inst_to_dict(ev.instance)}
    if ev.kind == CREATE:
        d["skipped"] = ev.skipped
        if not ev.skipped:
            d["placement"] = {"offset": list(ev.placement.offset), "rotation": ev.placement.rotation,
                              "scale": ev.placement.scale}
            d["placed"] = _inst_to_dict(ev.placed)
    return d


def event_from_dict(d) -> ChangeEvent:
    inst = _inst_from_dict(d["instance"])
    if d["kind"] == REMOVE:
        return ChangeEvent(REMOVE, inst)
    if d.get("skipped"):
        return ChangeEvent(CREATE, inst)
    p = d["placement"]
    return ChangeEvent(CREATE, inst, Placement(tuple(p["offset"]), p["rotation"], p["scale"]),
                       _inst_from_dict(d["placed"]))
