"""Segmentation-based discriminator and bitemporal adversarial learning.

The discriminator's real pair is always the time-t pair (I_t, S_t); nothing
in this module accepts a real post-event image.
"""
from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from . import gennet
from .core import (RunConfig, SingleTemporalDataset, ValidationError, config_hash, ensure_dir,
                   scaled, write_image)
from .eventsim import EventConfig, simulate_event
from .gennet import CheckpointError, Generator, GeneratorConfig, sn_conv

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LEAK = 0.2


class NonFiniteLossError(FloatingPointError):
    """Raised with a diagnostic dump when a loss becomes NaN/inf."""


# ---------------------------------------------------------------------------
# discriminator

@dataclass(frozen=True)
class DiscriminatorConfig:
    num_classes: int = 2
    width_scale: float = 1.0

    def hash(self) -> str:
        return config_hash({"model": "discriminator", **asdict(self)})


class DBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = sn_conv(cin, cout, 3, stride)
        self.conv2 = sn_conv(cout, cout)
        self.skip = sn_conv(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        h = self.conv2(F.leaky_relu(self.conv1(x), LEAK))
        return F.leaky_relu(h + self.skip(x), LEAK)


class Discriminator(nn.Module):
    """U-Net per-pixel classifier over C real classes plus one fake class.

    Six encoder levels (output strides 1..32) mirror the generator pyramid.
    The fake class is the last channel, index C.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        ch = [scaled(c, cfg.width_scale) for c in (64, 128, 128, 256, 256, 512)]
        self.down = nn.ModuleList([DBlock(3, ch[0])] + [DBlock(ch[i - 1], ch[i], 2) for i in range(1, 6)])
        self.up = nn.ModuleList([DBlock(ch[i] + ch[i - 1], ch[i - 1]) for i in range(5, 0, -1)])
        self.out = sn_conv(ch[0], cfg.num_classes + 1, 1)

    @property
    def fake_index(self) -> int:
        return self.cfg.num_classes

    def forward(self, image):
        skips = []
        x = image
        for block in self.down:
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = block(torch.cat([F.interpolate(x, size=skip.shape[-2:], mode="nearest"), skip], 1))
        return self.out(x)


def discriminate(image, disc: Discriminator) -> np.ndarray:
    """H x W x 3 image -> H x W x (C+1) logits."""
    x = torch.as_tensor(np.asarray(image), dtype=torch.get_default_dtype()).permute(2, 0, 1)[None]
    with torch.no_grad():
        return disc(x)[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# losses

def class_balance_weights(labels, num_classes):
    """Per-pixel inverse-frequency weights, normalized to mean 1 over the batch.

    A class holding n_c of N pixels, with K classes present, gets N / (K n_c).
    """
    counts = torch.bincount(labels.reshape(-1), minlength=num_classes).to(torch.get_default_dtype())
    present = (counts > 0).sum()
    coeff = torch.where(counts > 0, labels.numel() / (present * counts.clamp(min=1)), torch.zeros_like(counts))
    return coeff[labels]


def _check_finite(loss, name, **tensors):
    if not torch.isfinite(loss):
        stats = {k: {"min": float(v.min()), "max": float(v.max()), "nan": int(torch.isnan(v).sum())}
                 for k, v in tensors.items()}
        raise NonFiniteLossError(f"{name} is not finite: {float(loss)}; activations: {json.dumps(stats)}")
    return loss


def d_loss_from_logits(logits_real, mask_real, logits_fake):
    """Mean per-pixel (C+1)-way cross-entropy over real and fake pixels.

    Real pixels target their S_t class with class balancing; fake pixels
    target the fake class. Averaged over both halves, so uniform logits give
    ln(C+1).
    """
    num_classes = logits_real.shape[1] - 1
    w = class_balance_weights(mask_real, num_classes)
    real = (F.cross_entropy(logits_real, mask_real, reduction="none") * w).mean()
    fake_target = torch.full(logits_fake.shape[:1] + logits_fake.shape[2:], num_classes, dtype=torch.long)
    fake = F.cross_entropy(logits_fake, fake_target)
    loss = 0.5 * (real + fake)
    return _check_finite(loss, "d_loss", logits_real=logits_real.detach(), logits_fake=logits_fake.detach())


def g_loss_from_logits(logits_fake, mask_fake):
    """Class-balanced cross-entropy pushing fake pixels toward their S_{t+1} class."""
    num_classes = logits_fake.shape[1] - 1
    w = class_balance_weights(mask_fake, num_classes)
    loss = (F.cross_entropy(logits_fake, mask_fake, reduction="none") * w).mean()
    return _check_finite(loss, "g_loss", logits_fake=logits_fake.detach())


def d_loss(real, fake, disc: Discriminator):
    """real = (I_t, S_t), fake = (generated I_{t+1}, S_{t+1}); the fake image is detached."""
    image_real, mask_real = real
    image_fake, _ = fake
    return d_loss_from_logits(disc(image_real), mask_real, disc(image_fake.detach()))


def g_loss(fake, disc: Discriminator):
    image_fake, mask_fake = fake
    return g_loss_from_logits(disc(image_fake), mask_fake)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    flip: bool = True
    rotate: bool = True
    transpose: bool = True
    scale_jitter: tuple | None = (0.8, 1.25)
    crop: int | None = 256

    @classmethod
    def off(cls, crop=None):
        return cls(False, False, False, None, crop)


def augment(image, mask, rng, cfg: AugmentConfig):
    """Same random geometric transform on image (H x W x 3) and mask (H x W)."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    h, w = mask.shape
    if image.shape[:2] != (h, w):
        raise ValidationError("image and mask are not aligned")
    if cfg.crop is not None and cfg.crop > min(h, w):
        raise ValidationError(f"crop {cfg.crop} larger than input {h}x{w}")
    if cfg.flip:
        if rng.random() < 0.5:
            image, mask = image[:, ::-1], mask[:, ::-1]
        if rng.random() < 0.5:
            image, mask = image[::-1], mask[::-1]
    if cfg.rotate:
        k = int(rng.integers(0, 4))
        image, mask = np.rot90(image, k), np.rot90(mask, k)
    if cfg.transpose and rng.random() < 0.5:
        image, mask = image.transpose(1, 0, 2), mask.T
    if cfg.scale_jitter is not None:
        lo, hi = cfg.scale_jitter
        s = float(rng.uniform(lo, hi))
        if cfg.crop is not None:
            s = max(s, cfg.crop / min(mask.shape))
        if abs(s - 1.0) > 1e-9:
            nh, nw = max(1, int(round(mask.shape[0] * s))), max(1, int(round(mask.shape[1] * s)))
            zy, zx = nh / mask.shape[0], nw / mask.shape[1]
            image = np.clip(ndimage.zoom(image, (zy, zx, 1), order=1), -1.0, 1.0)
            mask = ndimage.zoom(mask, (zy, zx), order=0)
    if cfg.crop is not None:
        c = cfg.crop
        r0 = int(rng.integers(0, mask.shape[0] - c + 1))
        c0 = int(rng.integers(0, mask.shape[1] - c + 1))
        image, mask = image[r0:r0 + c, c0:c0 + c], mask[r0:r0 + c, c0:c0 + c]
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def hflip(image, mask):
    return np.ascontiguousarray(image[:, ::-1]), np.ascontiguousarray(mask[:, ::-1])


# ---------------------------------------------------------------------------
# training state

@dataclass
class TrainState:
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: np.random.Generator
    torch_gen: torch.Generator
    iteration: int = 0
    history: list = field(default_factory=list)
    ema: Generator | None = None
    ema_decay: float = 0.999

    @property
    def theta(self):
        return self.generator

    @property
    def phi(self):
        return self.discriminator


def model_configs(cfg: RunConfig) -> tuple[GeneratorConfig, DiscriminatorConfig]:
    return (GeneratorConfig(cfg.num_classes, cfg.width_scale, cfg.noise_channels, cfg.use_masking, cfg.use_destyle),
            DiscriminatorConfig(cfg.num_classes, cfg.width_scale))


def init_state(cfg: RunConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    gcfg, dcfg = model_configs(cfg)
    gen, disc = Generator(gcfg), Discriminator(dcfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g, betas=(cfg.beta1, cfg.beta2))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 1])))
    tg = torch.Generator().manual_seed(cfg.seed + 7919)
    ema = copy.deepcopy(gen).requires_grad_(False) if cfg.ema else None
    return TrainState(gen, disc, opt_g, opt_d, rng, tg, ema=ema, ema_decay=cfg.ema_decay)


def to_tensors(images, masks):
    x = torch.as_tensor(np.stack(images), dtype=torch.get_default_dtype()).permute(0, 3, 1, 2).contiguous()
    m = torch.as_tensor(np.stack(masks).astype(np.int64))
    return x, m


class BatchSampler:
    """Random mini-batches (I_t, S_t) from a single-temporal source with augmentation.

    ``source`` is a SingleTemporalDataset or a sequence of (image, mask)
    arrays. Only pre-event data exists here.
    """

    def __init__(self, source, batch_size, aug: AugmentConfig):
        self.source = source
        self.batch_size = batch_size
        self.aug = aug
        self._cache = {}

    def __len__(self):
        return len(self.source)

    def item(self, i):
        if i not in self._cache:
            if isinstance(self.source, SingleTemporalDataset):
                self._cache[i] = self.source.load(i)
            else:
                self._cache[i] = tuple(np.asarray(a) for a in self.source[i])
        return self._cache[i]

    def sample(self, rng):
        idx = rng.integers(0, len(self.source), size=self.batch_size)
        pairs = [augment(*self.item(int(i)), rng, self.aug) for i in idx]
        return to_tensors([p[0] for p in pairs], [p[1] for p in pairs])


def simulate_post_masks(mask_t, event_cfg: EventConfig, rng):
    out = [simulate_event(m, event_cfg, rng)[0] for m in mask_t.numpy()]
    return torch.as_tensor(np.stack(out).astype(np.int64))


def train_step(batch, state: TrainState, event_cfg: EventConfig) -> TrainState:
    """One iteration: events, synthesis, one generator update, one discriminator update."""
    image_t, mask_t = batch
    gen, disc = state.generator, state.discriminator
    n, _, h, w = image_t.shape

    mask_t1 = simulate_post_masks(mask_t, event_cfg, state.rng)
    z = gen.sample_noise(n, h, w, state.torch_gen)
    fake = gen(mask_t1, image_t, mask_t, z)

    disc.requires_grad_(False)
    lg = g_loss((fake, mask_t1), disc)
    state.opt_g.zero_grad(set_to_none=True)
    lg.backward()
    state.opt_g.step()
    disc.requires_grad_(True)

    ld = d_loss((image_t, mask_t), (fake.detach(), mask_t1), disc)
    state.opt_d.zero_grad(set_to_none=True)
    ld.backward()
    state.opt_d.step()

    if state.ema is not None:
        with torch.no_grad():
            for pe, p in zip(state.ema.parameters(), gen.parameters()):
                pe.lerp_(p, 1.0 - state.ema_decay)
    state.iteration += 1
    state.history.append({"step": state.iteration, "g_loss": lg.item(), "d_loss": ld.item()})
    return state


# ---------------------------------------------------------------------------
# checkpoints

def run_hash(cfg: RunConfig, event_cfg: EventConfig) -> str:
    keep = {k: v for k, v in cfg.to_dict().items() if k not in ("iterations", "checkpoint_every", "sample_every",
                                                                   "log_every", "threads")}
    return config_hash({"run": keep, "events": asdict(event_cfg)})


def save_state(path, state: TrainState, cfg: RunConfig, event_cfg: EventConfig) -> None:
    gen_blob = {
        "format_version": gennet.FORMAT_VERSION,
        "kind": "generator",
        "config": asdict(state.generator.cfg),
        "config_hash": state.generator.cfg.hash(),
        "iteration": state.iteration,
        "state": (state.ema or state.generator).state_dict(),
        "extra": {},
    }
    torch.save({
        "format_version": FORMAT_VERSION,
        "kind": "train_state",
        "config": {"run": cfg.to_dict(), "events": asdict(event_cfg)},
        "config_hash": run_hash(cfg, event_cfg),
        "iteration": state.iteration,
        "generator": gen_blob,
        "theta": state.generator.state_dict(),
        "phi": state.discriminator.state_dict(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "ema": state.ema.state_dict() if state.ema is not None else None,
        "rng": state.rng.bit_generator.state,
        "torch_rng": state.torch_gen.get_state(),
        "history": state.history,
    }, path)


def load_state(path, cfg: RunConfig, event_cfg: EventConfig, force: bool = False) -> TrainState:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != FORMAT_VERSION or blob.get("kind") != "train_state":
        raise CheckpointError(f"{path}: not a version-{FORMAT_VERSION} training checkpoint")
    if blob["config_hash"] != run_hash(cfg, event_cfg) and not force:
        raise CheckpointError(f"{path}: config hash mismatch; refusing to resume (use --force)")
    state = init_state(cfg)
    state.generator.load_state_dict(blob["theta"])
    state.discriminator.load_state_dict(blob["phi"])
    state.opt_g.load_state_dict(blob["opt_g"])
    state.opt_d.load_state_dict(blob["opt_d"])
    if state.ema is not None and blob["ema"] is not None:
        state.ema.load_state_dict(blob["ema"])
    state.rng.bit_generator.state = blob["rng"]
    state.torch_gen.set_state(blob["torch_rng"])
    state.iteration = blob["iteration"]
    state.history = list(blob["history"])
    return state


# ---------------------------------------------------------------------------
# training loop

def sample_grid(state: TrainState, batch, event_cfg: EventConfig, rng, rows: int = 4) -> np.ndarray:
    """Rows of [I_t | S_t | S_{t+1} | generated I_{t+1}] as an H x W x 3 array in [-1, 1]."""
    image_t, mask_t = batch
    image_t, mask_t = image_t[:rows], mask_t[:rows]
    mask_t1 = simulate_post_masks(mask_t, event_cfg, rng)
    gen = state.ema or state.generator
    was = gen.training
    gen.eval()
    with torch.no_grad():
        fake = gen(mask_t1, image_t, mask_t, gen.sample_noise(len(image_t), *image_t.shape[2:],
                                                              torch.Generator().manual_seed(0)))
    gen.train(was)
    ncls = max(state.generator.cfg.num_classes - 1, 1)

    def colour(m):
        v = (m.float() / ncls * 2 - 1)[:, None].expand(-1, 3, -1, -1)
        return v

    tiles = torch.cat([image_t, colour(mask_t), colour(mask_t1), fake], dim=3)
    return torch.cat(list(tiles), dim=1).permute(1, 2, 0).numpy()


def train(source, cfg: RunConfig, event_cfg: EventConfig, out_dir=None, resume=None, force=False,
          aug: AugmentConfig | None = None, state: TrainState | None = None):
    """Run ``cfg.iterations`` train steps; returns the final TrainState.

    With ``out_dir`` writes ``losses.jsonl``, periodic ``ckpt_XXXXXXX.pt`` /
    ``latest.pt`` checkpoints and ``samples/`` grids.
    """
    if len(source) == 0:
        raise ValidationError("training source is empty")
    torch.set_num_threads(cfg.threads)
    if aug is None:
        aug = AugmentConfig(**{**asdict(AugmentConfig()), **_aug_overrides(cfg)})
    if state is None:
        state = load_state(resume, cfg, event_cfg, force) if resume else init_state(cfg)
    sampler = BatchSampler(source, cfg.batch_size, aug)
    out = ensure_dir(out_dir) if out_dir is not None else None
    logf = open(out / "losses.jsonl", "a") if out else None
    t0 = time.time()
    try:
        while state.iteration < cfg.iterations:
            batch = sampler.sample(state.rng)
            train_step(batch, state, event_cfg)
            rec = dict(state.history[-1], wall_time=round(time.time() - t0, 3))
            if logf:
                logf.write(json.dumps(rec) + "\n")
            if state.iteration % cfg.log_every == 0:
                log.info("step %d g_loss %.4f d_loss %.4f", rec["step"], rec["g_loss"], rec["d_loss"])
            if out and (state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.iterations):
                save_state(out / f"ckpt_{state.iteration:07d}.pt", state, cfg, event_cfg)
                save_state(out / "latest.pt", state, cfg, event_cfg)
            if out and state.iteration % cfg.sample_every == 0:
                grid = sample_grid(state, batch, event_cfg, np.random.default_rng(state.iteration))
                write_image(ensure_dir(out / "samples") / f"step_{state.iteration:07d}.png", grid)
    except NonFiniteLossError:
        if out:
            save_state(out / "nonfinite.pt", state, cfg, event_cfg)
        raise
    finally:
        if logf:
            logf.close()
    return state


def _aug_overrides(cfg: RunConfig) -> dict:
    a = dict(cfg.augment or {})
    crop = a.pop("crop", True)
    a["crop"] = cfg.crop_size if crop else None
    if "scale_jitter" in a and a["scale_jitter"] is not None:
        a["scale_jitter"] = tuple(a["scale_jitter"])
    return a


def training_interfaces():
    """Callables that make up the training surface (audited for I_{t+1} inputs)."""
    return [train, train_step, d_loss, g_loss, d_loss_from_logits, g_loss_from_logits, augment,
            BatchSampler.__init__, BatchSampler.sample, init_state, simulate_post_masks]
