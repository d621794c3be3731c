"""Changen generator: U-Net image encoder, masked transition layers and a
conditional decoder with spatially-adaptive group normalization.

Tensors are NCHW; images live in [-1, 1]; masks are integer N x H x W.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import spectral_norm

from .core import ValidationError, config_hash, scaled

NUM_LEVELS = 6
FORMAT_VERSION = 1
LEAK = 0.2


def sn_conv(cin, cout, kernel=3, stride=1, bias=True):
    return spectral_norm(nn.Conv2d(cin, cout, kernel, stride, kernel // 2, bias=bias))


def level_channels(i: int, width_scale: float = 1.0) -> int:
    return scaled(512 / 2 ** i, width_scale)


def level_shape(i: int, h: int, w: int, width_scale: float = 1.0) -> tuple[int, int, int]:
    """(channels, height, width) of pyramid level ``i`` for an h x w image."""
    f = 2 ** (NUM_LEVELS - 1 - i)
    return level_channels(i, width_scale), h // f, w // f


def check_size(h: int, w: int) -> None:
    if h % 32 or w % 32:
        raise ValidationError(
            f"spatial size {h}x{w} is not divisible by 32; pad (core.pad_to_multiple) or tile the input first")


def group_count(channels: int, cap: int = 32) -> int:
    return max(g for g in range(1, min(cap, channels) + 1) if channels % g == 0)


def resize_nearest(x, size):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="nearest")


def downsample_mask(mask, size):
    """Nearest-neighbour resize of an integer N x H x W mask."""
    return resize_nearest(mask[:, None].float(), size)[:, 0].long()


def one_hot(mask, num_classes):
    return F.one_hot(mask.long(), num_classes).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def instance_norm(x, eps: float = 1e-5):
    """Per-sample, per-channel spatial standardization; constant (incl. 1x1) maps go to exact zeros."""
    # shift by one sample first so constant channels centre to exactly 0
    d = x - x[:, :, :1, :1]
    centred = d - d.mean(dim=(2, 3), keepdim=True)
    var = centred.pow(2).mean(dim=(2, 3), keepdim=True)
    return centred / torch.sqrt(var + eps)


class GroupNorm(nn.Module):
    """Affine-free group norm that maps single-value groups to zeros instead of raising."""

    def __init__(self, groups, channels, eps=1e-5):
        super().__init__()
        self.groups, self.channels, self.eps = groups, channels, eps

    def forward(self, x):
        if (self.channels // self.groups) * x.shape[2] * x.shape[3] == 1:
            return torch.zeros_like(x)
        return F.group_norm(x, self.groups, eps=self.eps)


# ---------------------------------------------------------------------------
# encoder

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = sn_conv(cin, cout, 3, stride)
        self.conv2 = sn_conv(cout, cout, 3)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = sn_conv(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        out = self.conv2(F.leaky_relu(self.conv1(x), LEAK))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.leaky_relu(out + skip, LEAK)


class UpBlock(nn.Module):
    def __init__(self, cin, cskip, cout):
        super().__init__()
        self.conv1 = sn_conv(cin + cskip, cout)
        self.conv2 = sn_conv(cout, cout)

    def forward(self, x, skip):
        x = torch.cat([F.interpolate(x, size=skip.shape[-2:], mode="nearest"), skip], 1)
        return F.leaky_relu(self.conv2(F.leaky_relu(self.conv1(x), LEAK)), LEAK)


class ImageEncoder(nn.Module):
    """U-Net over an 18-layer residual backbone (2 blocks per stage).

    Produces six levels; level i has round(512 * width_scale / 2**i) channels
    at output stride 2**(5 - i).
    """

    def __init__(self, width_scale=1.0):
        super().__init__()
        s = width_scale
        c64, c128, c256, c512 = (scaled(c, s) for c in (64, 128, 256, 512))
        self.full = sn_conv(3, scaled(16, s))
        self.stem = sn_conv(3, c64, 7, 2)
        self.layer1 = nn.Sequential(BasicBlock(c64, c64), BasicBlock(c64, c64))
        self.layer2 = nn.Sequential(BasicBlock(c64, c128, 2), BasicBlock(c128, c128))
        self.layer3 = nn.Sequential(BasicBlock(c128, c256, 2), BasicBlock(c256, c256))
        self.layer4 = nn.Sequential(BasicBlock(c256, c512, 2), BasicBlock(c512, c512))
        ch = [level_channels(i, s) for i in range(NUM_LEVELS)]
        self.top = sn_conv(c512, ch[0], 1)
        self.up = nn.ModuleList([
            UpBlock(ch[0], c256, ch[1]),
            UpBlock(ch[1], c128, ch[2]),
            UpBlock(ch[2], c64, ch[3]),
            UpBlock(ch[3], c64, ch[4]),
            UpBlock(ch[4], scaled(16, s), ch[5]),
        ])

    def forward(self, image):
        full = F.leaky_relu(self.full(image), LEAK)
        s2 = F.leaky_relu(self.stem(image), LEAK)
        s4 = self.layer1(F.max_pool2d(s2, 3, 2, 1))
        s8 = self.layer2(s4)
        s16 = self.layer3(s8)
        s32 = self.layer4(s16)
        feats = [self.top(s32)]
        for block, skip in zip(self.up, (s16, s8, s4, s2, full)):
            feats.append(block(feats[-1], skip))
        return feats


# ---------------------------------------------------------------------------
# normalization and masked transition

class CondEmbed(nn.Module):
    """Shared hidden embedding of a conditioning map at one resolution."""

    def __init__(self, cond_channels, hidden):
        super().__init__()
        self.conv = sn_conv(cond_channels, hidden)

    def forward(self, cond, size):
        return F.relu(self.conv(resize_nearest(cond, size)))


class SPADEGroupNorm(nn.Module):
    """Parameter-free group norm modulated by per-pixel scale/shift maps
    predicted (by one conv, split in two) from a conditioning embedding."""

    def __init__(self, channels, hidden):
        super().__init__()
        self.norm = GroupNorm(group_count(channels), channels)
        self.affine = sn_conv(hidden, 2 * channels)

    def forward(self, x, act):
        gamma, beta = self.affine(act).chunk(2, dim=1)
        return self.norm(x) * (1 + gamma) + beta


def masking(f_t, f_t1, mask_t):
    """Post-event features on pre-event foreground, pre-event features elsewhere."""
    if f_t.shape != f_t1.shape:
        raise ValidationError(f"feature shapes differ: {tuple(f_t.shape)} vs {tuple(f_t1.shape)}")
    fg = downsample_mask(mask_t, f_t.shape[-2:]) > 0
    return torch.where(fg[:, None], f_t1, f_t)


class DeStyle(nn.Module):
    """1x1 conv, instance norm, leaky ReLU."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.proj = sn_conv(channels, channels, 1)
        self.eps = eps

    def normalized(self, x):
        return instance_norm(self.proj(x), self.eps)

    def forward(self, x):
        return F.leaky_relu(self.normalized(x), LEAK)


class MaskedTransition(nn.Module):
    """Change field for one pyramid level: masking -> de-styling -> semantic
    injection from the post-event mask."""

    def __init__(self, channels, num_classes, hidden, use_masking=True, use_destyle=True):
        super().__init__()
        self.num_classes = num_classes
        self.use_masking = use_masking
        self.destyle = DeStyle(channels) if use_destyle else None
        self.embed = CondEmbed(num_classes, hidden)
        self.inject = SPADEGroupNorm(channels, hidden)

    def forward(self, f_t, f_t1, mask_t, mask_t1):
        if f_t.shape != f_t1.shape:
            raise ValidationError(f"feature shapes differ: {tuple(f_t.shape)} vs {tuple(f_t1.shape)}")
        x = masking(f_t, f_t1, mask_t) if self.use_masking else f_t
        if self.destyle is not None:
            x = self.destyle(x)
        return self.inject(x, self.embed(one_hot(mask_t1, self.num_classes), x.shape[-2:]))


# ---------------------------------------------------------------------------
# decoder

class SPADEResBlock(nn.Module):
    """Residual block with spatially-adaptive group normalization; all its
    norms share one embedding of the (mask, noise) conditioning."""

    def __init__(self, cin, cout, cond_channels, hidden, upsample=True):
        super().__init__()
        mid = min(cin, cout)
        self.upsample = upsample
        self.embed = CondEmbed(cond_channels, hidden)
        self.norm0 = SPADEGroupNorm(cin, hidden)
        self.conv0 = sn_conv(cin, mid)
        self.norm1 = SPADEGroupNorm(mid, hidden)
        self.conv1 = sn_conv(mid, cout)
        self.learned_skip = cin != cout
        if self.learned_skip:
            self.norm_s = SPADEGroupNorm(cin, hidden)
            self.conv_s = sn_conv(cin, cout, 1, bias=False)

    def forward(self, x, cond):
        act = self.embed(cond, x.shape[-2:])
        skip = self.conv_s(self.norm_s(x, act)) if self.learned_skip else x
        dx = self.conv0(F.leaky_relu(self.norm0(x, act), LEAK))
        dx = self.conv1(F.leaky_relu(self.norm1(dx, act), LEAK))
        out = skip + dx
        if self.upsample:
            out = F.interpolate(out, scale_factor=2, mode="nearest")
        return out


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 2
    width_scale: float = 1.0
    noise_channels: int = 64
    use_masking: bool = True
    use_destyle: bool = True

    @property
    def noise_dim(self) -> int:
        return scaled(self.noise_channels, self.width_scale)

    def hash(self) -> str:
        return config_hash({"model": "generator", **asdict(self)})


class Generator(nn.Module):
    """G(S_{t+1}, I_t, S_t, z) -> I_{t+1}."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        s = cfg.width_scale
        ch = [level_channels(i, s) for i in range(NUM_LEVELS)]
        cond = cfg.num_classes + cfg.noise_dim
        hidden = scaled(128, s)
        self.encoder = ImageEncoder(s)
        self.head_in = sn_conv(cond, ch[0])
        self.transitions = nn.ModuleList([
            MaskedTransition(ch[i], cfg.num_classes, hidden, cfg.use_masking, cfg.use_destyle)
            for i in range(NUM_LEVELS)
        ])
        self.blocks = nn.ModuleList([
            SPADEResBlock(ch[i], ch[min(i + 1, NUM_LEVELS - 1)], cond, hidden, upsample=i < NUM_LEVELS - 1)
            for i in range(NUM_LEVELS)
        ])
        self.head_out = sn_conv(ch[-1], 3)

    def sample_noise(self, n, h, w, generator=None):
        return torch.randn(n, self.cfg.noise_dim, h, w, generator=generator,
                           dtype=torch.get_default_dtype())

    def conditioning(self, mask_t1, z):
        return torch.cat([one_hot(mask_t1, self.cfg.num_classes), z.to(torch.get_default_dtype())], 1)

    def decode_step(self, i, f_t1_i, delta, cond):
        if delta.shape != f_t1_i.shape:
            raise ValidationError(f"change field {tuple(delta.shape)} != features {tuple(f_t1_i.shape)}")
        return self.blocks[i](f_t1_i + delta, cond)

    def forward(self, mask_t1, image_t, mask_t, z=None, generator=None, return_features=False):
        n, _, h, w = image_t.shape
        check_size(h, w)
        if mask_t.shape != (n, h, w) or mask_t1.shape != (n, h, w):
            raise ValidationError("masks must be N x H x W matching the image")
        if z is None:
            z = self.sample_noise(n, h, w, generator)
        f_t = self.encoder(image_t)
        cond = self.conditioning(mask_t1, z)
        x = self.head_in(resize_nearest(cond, (h // 32, w // 32)))
        post, deltas = [], []
        for i in range(NUM_LEVELS):
            post.append(x)
            delta = self.transitions[i](f_t[i], x, mask_t, mask_t1)
            deltas.append(delta)
            x = self.decode_step(i, x, delta, cond)
        out = torch.tanh(self.head_out(F.leaky_relu(x, LEAK)))
        if return_features:
            return out, {"pre": f_t, "post": post, "delta": deltas}
        return out


# ---------------------------------------------------------------------------
# numpy-facing wrappers

def _image_tensor(image):
    x = torch.as_tensor(np.asarray(image), dtype=torch.get_default_dtype())
    if x.ndim == 3:
        x = x[None]
    return x.permute(0, 3, 1, 2).contiguous()


def _mask_tensor(mask):
    m = torch.as_tensor(np.asarray(mask, dtype=np.int64))
    return m[None] if m.ndim == 2 else m


def encode_image(image, gen: Generator):
    """H x W x 3 image -> list of six C x h x w feature arrays."""
    h, w = np.asarray(image).shape[:2]
    check_size(h, w)
    with torch.no_grad():
        feats = gen.encoder(_image_tensor(image))
    return [f[0].numpy() for f in feats]


@torch.no_grad()
def synthesize(mask_t1, image_t, mask_t, gen: Generator, z=None, seed=None):
    """Numpy in, numpy out (H x W x 3 in [-1, 1]); eval mode, no SN updates."""
    image_t = np.asarray(image_t)
    h, w = image_t.shape[:2]
    check_size(h, w)
    if np.asarray(mask_t).shape != (h, w) or np.asarray(mask_t1).shape != (h, w):
        raise ValidationError("mask and image spatial sizes differ")
    was_training = gen.training
    gen.eval()
    try:
        if z is None:
            g = torch.Generator().manual_seed(0 if seed is None else int(seed))
            zt = gen.sample_noise(1, h, w, g)
        else:
            zt = torch.as_tensor(np.asarray(z), dtype=torch.get_default_dtype())
            zt = zt[None] if zt.ndim == 3 else zt
        out = gen(_mask_tensor(mask_t1), _image_tensor(image_t), _mask_tensor(mask_t), zt)
    finally:
        gen.train(was_training)
    return out[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# checkpoints

class CheckpointError(RuntimeError):
    pass


def save_generator(path, gen: Generator, iteration: int = 0, extra: dict | None = None) -> None:
    torch.save({
        "format_version": FORMAT_VERSION,
        "kind": "generator",
        "config": asdict(gen.cfg),
        "config_hash": gen.cfg.hash(),
        "iteration": int(iteration),
        "state": gen.state_dict(),
        "extra": extra or {},
    }, path)


def load_generator(path, expected: GeneratorConfig | None = None, force: bool = False) -> Generator:
    """Load generator weights from a generator or training checkpoint."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") == "train_state":
        blob = blob["generator"]
    if blob.get("format_version") != FORMAT_VERSION or blob.get("kind") != "generator":
        raise CheckpointError(f"{path}: not a version-{FORMAT_VERSION} generator checkpoint")
    cfg = GeneratorConfig(**blob["config"])
    if cfg.hash() != blob["config_hash"]:
        raise CheckpointError(f"{path}: stored config hash does not match stored config")
    if expected is not None and expected.hash() != cfg.hash() and not force:
        raise CheckpointError(f"{path}: config hash {cfg.hash()} != expected {expected.hash()} (use --force)")
    gen = Generator(cfg)
    gen.load_state_dict(blob["state"])
    gen.eval()
    return gen


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def output_stride(i: int) -> int:
    return int(math.pow(2, NUM_LEVELS - 1 - i))
