"""Toy ChangeStar-style change detector with synthetic pre-training,
zero-shot evaluation and ratio-subset fine-tuning."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ValidationError, make_rng, scaled

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 2
    width_scale: float = 0.125
    change_channels: int = 96
    blocks: int = 1

    @classmethod
    def resnet18(cls, num_classes=2):
        return cls(num_classes=num_classes, width_scale=1.0, blocks=2)

    @property
    def widths(self):
        return tuple(scaled(c, self.width_scale) for c in (64, 128, 256, 512))

    @property
    def dc(self):
        return scaled(self.change_channels, max(self.width_scale, 0.25))


@dataclass
class PretrainConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    gamma: float = 0.9
    seg_weight: float = 1.0
    change_weight: float = 1.0
    dice_weight: float = 1.0
    flip: bool = True
    rotate: bool = True
    transpose: bool = True
    color_jitter: float = 0.1
    seed: int = 0
    threads: int = 1


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        return F.relu(out + (x if self.down is None else self.down(x)))


class Encoder(nn.Module):
    """4-stage residual backbone (stride 2 stem) with a top-down FPN fuse to stride 2."""

    def __init__(self, widths, dc, blocks=1):
        super().__init__()
        c1, c2, c3, c4 = widths
        self.stem = nn.Sequential(nn.Conv2d(3, c1, 3, 2, 1, bias=False), nn.BatchNorm2d(c1), nn.ReLU())
        self.stages = nn.ModuleList([
            nn.Sequential(ResBlock(cin, cout, stride), *[ResBlock(cout, cout) for _ in range(blocks - 1)])
            for cin, cout, stride in ((c1, c1, 1), (c1, c2, 2), (c2, c3, 2), (c3, c4, 2))
        ])
        self.lateral = nn.ModuleList([nn.Conv2d(c, dc, 1) for c in widths])
        self.fuse = nn.Sequential(nn.Conv2d(dc, dc, 3, 1, 1, bias=False), nn.BatchNorm2d(dc), nn.ReLU())

    def forward(self, x):
        feats = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        y = self.lateral[3](feats[3])
        for i in (2, 1, 0):
            y = F.interpolate(y, size=feats[i].shape[-2:], mode="nearest") + self.lateral[i](feats[i])
        return self.fuse(y)


class ChangeDetector(nn.Module):
    """Shared encoder, per-time semantic head, change head on [f_a, f_b].

    The change head sees both concatenation orders; inference averages the
    two logits, which makes the output exactly invariant to swapping inputs.
    """

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        dc = cfg.dc
        self.encoder = Encoder(cfg.widths, dc, cfg.blocks)
        self.seg_head = nn.Conv2d(dc, cfg.num_classes, 1)
        self.change_head = nn.Sequential(
            nn.Conv2d(2 * dc, dc, 3, 1, 1, bias=False), nn.BatchNorm2d(dc), nn.ReLU(), nn.Conv2d(dc, 1, 1))

    def _up(self, x, size):
        return F.interpolate(x, size=size, mode="bilinear", align_corners=False)

    def forward(self, image_t, image_t1, both_orders=True):
        """Returns dict with change logits (N x H x W), order-wise logits and semantic logits."""
        if image_t.shape != image_t1.shape:
            raise ValidationError(f"image shapes differ: {tuple(image_t.shape)} vs {tuple(image_t1.shape)}")
        size = image_t.shape[-2:]
        n = image_t.shape[0]
        f = self.encoder(torch.cat([image_t, image_t1]))
        fa, fb = f[:n], f[n:]
        ab = self._up(self.change_head(torch.cat([fa, fb], 1)), size)[:, 0]
        out = {"seg_t": self._up(self.seg_head(fa), size), "seg_t1": self._up(self.seg_head(fb), size), "ab": ab}
        if both_orders:
            ba = self._up(self.change_head(torch.cat([fb, fa], 1)), size)[:, 0]
            out["ba"] = ba
            out["change"] = (ab + ba) / 2
        else:
            out["change"] = ab
        return out


def _tensor_images(arrs):
    return torch.as_tensor(np.stack(arrs), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def detect(image_t, image_t1, model: ChangeDetector, both_orders=True):
    """H x W x 3 pair -> (change probability H x W, semantic logits t, semantic logits t1)."""
    a, b = np.asarray(image_t), np.asarray(image_t1)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    was = model.training
    model.eval()
    out = model(_tensor_images([a]), _tensor_images([b]), both_orders)
    model.train(was)
    return (torch.sigmoid(out["change"])[0].numpy(), out["seg_t"][0].permute(1, 2, 0).numpy(),
            out["seg_t1"][0].permute(1, 2, 0).numpy())


def poly_lr(base_lr, step, total, gamma=0.9):
    """base_lr * (1 - step/total)^gamma, clamped at 0 past the end."""
    return base_lr * max(1.0 - step / total, 0.0) ** gamma


# ---------------------------------------------------------------------------

def _augment_pair(item, rng, cfg: PretrainConfig):
    a, b = item["image_t"], item["image_t1"]
    planes = [item["change"]] + [item[k] for k in ("mask_t", "mask_t1") if k in item]
    arrs = [a, b] + planes

    def apply(fn):
        return [fn(x) for x in arrs]

    if cfg.flip and rng.random() < 0.5:
        arrs = apply(lambda x: x[:, ::-1])
    if cfg.flip and rng.random() < 0.5:
        arrs = apply(lambda x: x[::-1])
    if cfg.rotate:
        k = int(rng.integers(0, 4))
        arrs = apply(lambda x: np.rot90(x, k))
    if cfg.transpose and rng.random() < 0.5:
        arrs = apply(lambda x: x.swapaxes(0, 1))
    out = {"image_t": arrs[0], "image_t1": arrs[1], "change": arrs[2]}
    if len(arrs) == 5:
        out["mask_t"], out["mask_t1"] = arrs[3], arrs[4]
    if cfg.color_jitter:
        for key in ("image_t", "image_t1"):
            gain = 1 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
            bias = rng.uniform(-cfg.color_jitter, cfg.color_jitter, 3)
            out[key] = np.clip(out[key] * gain + bias, -1, 1)
    return {k: np.ascontiguousarray(v) for k, v in out.items()}


def _collate(items):
    batch = {
        "image_t": _tensor_images([i["image_t"] for i in items]),
        "image_t1": _tensor_images([i["image_t1"] for i in items]),
        "change": torch.as_tensor(np.stack([(i["change"] != 0) for i in items]).astype(np.float32)),
    }
    if all("mask_t" in i and "mask_t1" in i for i in items):
        batch["mask_t"] = torch.as_tensor(np.stack([i["mask_t"] for i in items]).astype(np.int64))
        batch["mask_t1"] = torch.as_tensor(np.stack([i["mask_t1"] for i in items]).astype(np.int64))
    return batch


def soft_dice_loss(logits, target, eps: float = 1.0):
    """1 - soft Dice over the whole batch; counters the rarity of changed pixels."""
    p = torch.sigmoid(logits)
    return 1 - (2 * (p * target).sum() + eps) / (p.sum() + target.sum() + eps)


def change_loss(logits, target, dice_weight: float = 1.0):
    loss = F.binary_cross_entropy_with_logits(logits, target)
    if dice_weight:
        loss = loss + dice_weight * soft_dice_loss(logits, target)
    return loss


def detector_loss(out, batch, cfg: PretrainConfig):
    """Change loss averaged over both concatenation orders, plus semantic CE for each date."""
    y = batch["change"]
    loss = change_loss(out["ab"], y, cfg.dice_weight)
    if "ba" in out:
        loss = 0.5 * (loss + change_loss(out["ba"], y, cfg.dice_weight))
    loss = cfg.change_weight * loss
    if cfg.seg_weight and "mask_t" in batch:
        seg = F.cross_entropy(out["seg_t"], batch["mask_t"]) + F.cross_entropy(out["seg_t1"], batch["mask_t1"])
        loss = loss + cfg.seg_weight * 0.5 * seg
    return loss


def train_detector(model: ChangeDetector, samples, cfg: PretrainConfig, failure_path=None):
    """SGD + poly schedule over ``cfg.epochs`` epochs; returns per-epoch mean losses.

    A non-finite loss aborts training; with ``failure_path`` the weights are
    saved there first.
    """
    if len(samples) == 0:
        raise ValidationError("no training samples")
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    rng = make_rng(cfg.seed, "detector")
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(samples) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step, history = 0, []
    model.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for i in range(0, len(samples), cfg.batch_size):
            items = [_augment_pair(samples[j], rng, cfg) for j in order[i:i + cfg.batch_size]]
            if len(items) < 2 and len(samples) >= 2:
                continue  # batch norm needs more than one sample
            batch = _collate(items)
            for group in opt.param_groups:
                group["lr"] = poly_lr(cfg.lr, step, total, cfg.gamma)
            out = model(batch["image_t"], batch["image_t1"])
            loss = detector_loss(out, batch, cfg)
            if not torch.isfinite(loss):
                if failure_path is not None:
                    save_detector(failure_path, model, {"epoch": epoch, "step": step})
                raise FloatingPointError(f"non-finite detector loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        history.append(float(np.mean(losses)) if losses else float("nan"))
        log.debug("epoch %d loss %.4f", epoch + 1, history[-1])
    model.eval()
    return history


def pretrain(samples, cfg: PretrainConfig, det_cfg: DetectorConfig, model: ChangeDetector | None = None,
             failure_path=None):
    """Pre-train on synthetic bitemporal samples; returns (model, per-epoch losses)."""
    if model is None:
        torch.manual_seed(cfg.seed)
        model = ChangeDetector(det_cfg)
    history = train_detector(model, samples, cfg, failure_path)
    return model, history


def select_subset(n: int, ratio: float, seed: int) -> np.ndarray:
    """floor(ratio * n) indices drawn without replacement, sorted; deterministic per seed."""
    if not 0 < ratio <= 1:
        raise ValidationError(f"ratio {ratio} outside (0, 1]")
    count = int(math.floor(ratio * n + 1e-9))
    if count == 0:
        raise ValidationError(f"ratio {ratio} of {n} samples selects nothing")
    if count == n:
        return np.arange(n)
    return np.sort(make_rng(seed, "subset").permutation(n)[:count])


def fine_tune(model: ChangeDetector, samples, ratio: float, cfg: PretrainConfig):
    """Fine-tune a copy of ``model`` on a seeded ``ratio`` subset; returns (model, subset indices)."""
    idx = select_subset(len(samples), ratio, cfg.seed)
    tuned = copy.deepcopy(model)
    train_detector(tuned, [samples[i] for i in idx], cfg)
    return tuned, idx


def confusion_metrics(tp, fp, fn) -> dict:
    """Change-class precision, recall, F1, IoU from pixel counts; 0/0 with no errors counts as 1."""
    tp, fp, fn = float(tp), float(fp), float(fn)

    def ratio(num, den):
        if den == 0:
            return 1.0 if (fp + fn) == 0 else 0.0
        return num / den

    p = ratio(tp, tp + fp)
    r = ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if (p + r) > 0 else 0.0
    return {"precision": p, "recall": r, "f1": f1, "iou": ratio(tp, tp + fp + fn),
            "tp": tp, "fp": fp, "fn": fn}


@torch.no_grad()
def evaluate(model: ChangeDetector, samples, threshold: float = 0.5, batch: int = 32) -> dict:
    """Aggregate TP/FP/FN over all pixels of all samples."""
    if len(samples) == 0:
        raise ValidationError("evaluation set is empty")
    model.eval()
    tp = fp = fn = 0
    for i in range(0, len(samples), batch):
        items = samples[i:i + batch]
        b = _collate(items)
        pred = torch.sigmoid(model(b["image_t"], b["image_t1"])["change"]) > threshold
        gt = b["change"] > 0
        tp += int((pred & gt).sum())
        fp += int((pred & ~gt).sum())
        fn += int((~pred & gt).sum())
    return confusion_metrics(tp, fp, fn)


def save_detector(path, model: ChangeDetector, extra=None) -> None:
    torch.save({"kind": "detector", "config": asdict(model.cfg), "state": model.state_dict(),
                "extra": extra or {}}, path)


def load_detector(path) -> ChangeDetector:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "detector":
        raise ValidationError(f"{path}: not a detector checkpoint")
    model = ChangeDetector(DetectorConfig(**blob["config"]))
    model.load_state_dict(blob["state"])
    return model.eval()
