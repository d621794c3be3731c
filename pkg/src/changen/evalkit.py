"""Image-quality metrics (FID, IS), feature-leakage and feature-norm diagnostics.

Metrics consume precomputed features / class probabilities. The extractor
is pluggable: :class:`ToyClassifier` for desk-scale runs, or a raw-pixel
embedding.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ValidationError, read_image


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValidationError(f"covariance shape {self.cov.shape} does not match mean dim {d}")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-10, atol=1e-12):
            raise ValidationError("covariance must be symmetric")


def feature_stats(features, reg: float = 1e-6) -> FeatureStats:
    """Mean and unbiased covariance of an N x d feature matrix.

    With fewer than two samples the covariance is ``reg * I``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValidationError("features must be a non-empty N x d array")
    if len(x) < 2:
        return FeatureStats(x[0], reg * np.eye(x.shape[1]), len(x))
    cov = np.cov(x, rowvar=False)
    return FeatureStats(x.mean(0), (cov + cov.T) / 2, len(x))


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(cov_a, cov_b, eps: float = 1e-10) -> float:
    """tr((A B)^{1/2}) for PSD A, B via eigenvalues of A^{1/2} B A^{1/2}.

    Eigenvalues below ``eps`` count as zero. A clearly negative eigenvalue
    means the inputs were not PSD: both are shifted by eps*I, with a warning.
    """
    for attempt in range(2):
        sa = _psd_sqrt(cov_a)
        m = sa @ cov_b @ sa
        w = np.linalg.eigvalsh((m + m.T) / 2)
        scale = max(abs(w).max(initial=0.0), 1.0)
        if w.min(initial=0.0) < -1e-8 * scale and attempt == 0:
            warnings.warn("non-PSD intermediate in FID matrix square root; regularizing with eps*I")
            cov_a = cov_a + eps * np.eye(len(cov_a))
            cov_b = cov_b + eps * np.eye(len(cov_b))
            continue
        break
    w = np.where(w < eps, 0.0, w)
    return float(np.sqrt(w).sum())


def fid(a: FeatureStats, b: FeatureStats, eps: float = 1e-10) -> float:
    """Frechet distance between two Gaussians fitted to features."""
    if a.mean.shape != b.mean.shape:
        raise ValidationError(f"feature dims differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    d = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * trace_sqrt_product(a.cov, b.cov, eps))
    return max(d, 0.0)


def inception_score(probs, eps: float = 1e-12) -> float:
    """exp(E_x KL(p(y|x) || p(y))) over an N x K matrix of class probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValidationError("probs must be a non-empty N x K array")
    if not np.allclose(p.sum(1), 1.0, atol=1e-6):
        raise ValidationError("each probability vector must sum to 1")
    p = np.clip(p, eps, 1.0)
    py = p.mean(0)
    kl = (p * (np.log(p) - np.log(py))).sum(1)
    return float(np.exp(kl.mean()))


def leakage_metric(image_t, image_t1, change) -> dict:
    """Mean |I_t - I_{t+1}| over changed and unchanged pixels, and their ratio.

    ``ratio`` is None when no pixel changed, 1.0 when both diffs are 0 (a
    pure copy everywhere is indistinguishable by region) and inf when only
    the changed region differs.
    """
    a, b = np.asarray(image_t, dtype=np.float64), np.asarray(image_t1, dtype=np.float64)
    if a.shape != b.shape or a.shape[:2] != np.asarray(change).shape:
        raise ValidationError("images and change label are not aligned")
    per_pixel = np.abs(a - b).mean(axis=2)
    changed = np.asarray(change) != 0
    cd = float(per_pixel[changed].mean()) if changed.any() else None
    ud = float(per_pixel[~changed].mean()) if (~changed).any() else None
    if cd is None or ud is None:
        ratio = None
    elif ud == 0.0:
        ratio = 1.0 if cd == 0.0 else float("inf")
    else:
        ratio = cd / ud
    return {"changed_diff": cd, "unchanged_diff": ud, "ratio": ratio}


def sample_leakage(sample) -> dict:
    return leakage_metric(sample.image_t, sample.image_t1, sample.change)


def feature_norm_map(pyramid, normalize: bool = False) -> list:
    """Per-level channel-wise L2 norm maps; with ``normalize`` each is scaled to [0, 1]."""
    maps = []
    for level in pyramid:
        f = np.asarray(level, dtype=np.float64)
        if f.ndim == 4:
            f = f[0]
        m = np.sqrt((f ** 2).sum(axis=0))
        if normalize:
            top = m.max(initial=0.0)
            m = m / top if top > 0 else m
        maps.append(m)
    return maps


def norm_map_grid(pyramid, size: int | None = None) -> np.ndarray:
    """Normalized norm maps upsampled (nearest) to a common size and laid side by side, in [-1, 1]."""
    maps = feature_norm_map(pyramid, normalize=True)
    size = size or max(m.shape[0] for m in maps)
    tiles = []
    for m in maps:
        fy, fx = size // m.shape[0], size // m.shape[1]
        tiles.append(np.kron(m, np.ones((fy, fx))))
    grid = np.concatenate(tiles, axis=1) * 2 - 1
    return np.repeat(grid[..., None], 3, axis=2)


# ---------------------------------------------------------------------------
# feature extractors

class ToyClassifier(nn.Module):
    """Small CNN; penultimate activations serve as FID features, softmax as IS probabilities."""

    def __init__(self, num_outputs=4, width=32):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(3, width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(width, 2 * width, 3, 2, 1), nn.ReLU(),
            nn.Conv2d(2 * width, 2 * width, 3, 2, 1), nn.ReLU(),
        )
        self.fc = nn.Linear(2 * width, num_outputs)
        self.num_outputs = num_outputs
        self.width = width

    def features(self, x):
        return self.body(x).mean(dim=(2, 3))

    def forward(self, x):
        return self.fc(self.features(x))


def scene_label(mask) -> int:
    """Coarse 4-way scene class: (has class-2 objects) x (class-1 cover above 8%)."""
    m = np.asarray(mask)
    return 2 * int((m == 2).any()) + int((m == 1).mean() > 0.08)


def _to_batch(images):
    return torch.as_tensor(np.stack(images), dtype=torch.float32).permute(0, 3, 1, 2).contiguous()


def train_extractor(pairs, epochs=5, lr=1e-3, seed=0, batch=32) -> ToyClassifier:
    """Fit a ToyClassifier on (image, mask) pairs labelled by :func:`scene_label`."""
    torch.manual_seed(seed)
    model = ToyClassifier()
    x = _to_batch([p[0] for p in pairs])
    y = torch.as_tensor([scene_label(p[1]) for p in pairs])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    g = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        for idx in torch.randperm(len(x), generator=g).split(batch):
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval()


def save_extractor(path, model: ToyClassifier) -> None:
    torch.save({"kind": "toy_classifier", "num_outputs": model.num_outputs, "width": model.width,
                "state": model.state_dict()}, path)


def load_extractor(path) -> ToyClassifier:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = ToyClassifier(blob["num_outputs"], blob["width"])
    model.load_state_dict(blob["state"])
    return model.eval()


@torch.no_grad()
def extract(images, extractor="pixels", batch=64):
    """Return (features N x d, probs N x K or None)."""
    if isinstance(extractor, str):
        if extractor != "pixels":
            extractor = load_extractor(extractor)
        else:
            x = _to_batch(images)
            return F.adaptive_avg_pool2d(x, 8).flatten(1).double().numpy(), None
    feats, probs = [], []
    for i in range(0, len(images), batch):
        x = _to_batch(images[i:i + batch])
        f = extractor.features(x)
        feats.append(f.double().numpy())
        probs.append(F.softmax(extractor.fc(f), dim=1).double().numpy())
    return np.concatenate(feats), np.concatenate(probs)


def load_image_dir(path) -> list:
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif"))
    if not files:
        raise ValidationError(f"no images found in {path}")
    return [read_image(p) for p in files]
