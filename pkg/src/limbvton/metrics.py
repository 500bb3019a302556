"""Image quality metrics and the perceptual feature backbone shared by the training losses."""
from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

PERCEPTUAL_WEIGHTS = (1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0)
PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03

# relu1_1 .. relu5_1 in torchvision's vgg19().features
_VGG19_CUTS = (2, 7, 12, 21, 30)


class PerceptualBackbone(nn.Module):
    """Frozen five-stage feature extractor ``phi_1 .. phi_5``.

    ``kind="fixed"`` builds a small convolutional stack with seeded, never-trained
    weights; random conv features are a usable perceptual embedding when no
    pretrained weights are available. ``kind="vgg19"`` loads torchvision's VGG19
    from a local ``weights`` state-dict file.
    """

    def __init__(self, kind="fixed", channels=(16, 32, 64, 64, 64), seed=1234, weights=None):
        super().__init__()
        self.kind = kind
        if kind == "fixed":
            gen = torch.Generator().manual_seed(seed)
            stages, cin = [], 3
            for i, c in enumerate(channels):
                layers = [] if i == 0 else [nn.AvgPool2d(2, ceil_mode=True)]
                layers += [nn.Conv2d(cin, c, 3, padding=1, padding_mode="replicate"), nn.ReLU()]
                stages.append(nn.Sequential(*layers))
                cin = c
            self.stages = nn.ModuleList(stages)
            for m in self.modules():
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * 9
                    with torch.no_grad():
                        m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                        m.bias.zero_()
            self.register_buffer("mean", torch.full((1, 3, 1, 1), 0.5))
            self.register_buffer("std", torch.full((1, 3, 1, 1), 0.5))
        elif kind == "vgg19":
            import torchvision

            vgg = torchvision.models.vgg19()
            if weights is not None:
                vgg.load_state_dict(torch.load(weights, map_location="cpu"))
            feats = vgg.features
            bounds = (0,) + _VGG19_CUTS
            self.stages = nn.ModuleList(nn.Sequential(*feats[a:b]) for a, b in zip(bounds[:-1], bounds[1:]))
            self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))
        else:
            raise ValueError(f"unknown backbone kind {kind!r}")
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = (x - self.mean) / self.std
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled features of every stage, concatenated (FID embedder)."""
        return torch.cat([f.mean(dim=(-2, -1)) for f in self(x)], dim=1)


_BACKBONES: dict = {}
_BACKBONE_LOCK = threading.Lock()


def default_backbone(dtype=torch.float32, device="cpu") -> PerceptualBackbone:
    key = (dtype, str(device))
    with _BACKBONE_LOCK:
        if key not in _BACKBONES:
            _BACKBONES[key] = PerceptualBackbone().to(dtype=dtype, device=device)
        return _BACKBONES[key]


def _as_batch(x):
    return x.unsqueeze(0) if x.dim() == 3 else x


def perceptual_distance(x, y, backbone=None, weights=PERCEPTUAL_WEIGHTS) -> torch.Tensor:
    """``sum_i w_i * mean|phi_i(x) - phi_i(y)|`` over the backbone stages."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    x, y = _as_batch(x), _as_batch(y)
    if backbone is None:
        backbone = default_backbone(x.dtype, x.device)
    fx, fy = backbone(x), backbone(y)
    if len(weights) != len(fx):
        raise ValueError(f"{len(weights)} weights for {len(fx)} stages")
    total = x.new_zeros(())
    for w, a, b in zip(weights, fx, fy):
        total = total + w * (a - b).abs().mean()
    return total


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA, dtype=torch.float64):
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).view(1, 1, size, size)


def ssim(x, y, data_range=1.0) -> torch.Tensor:
    """Mean SSIM over the valid window positions of the channel-averaged images.

    Returns a 0-d tensor for ``C x H x W`` input or one value per image for a batch.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    single = x.dim() == 3
    gx = _as_batch(x).double().mean(dim=1, keepdim=True)
    gy = _as_batch(y).double().mean(dim=1, keepdim=True)
    if min(gx.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} px in each dimension")
    win = _gaussian_window().to(gx.device)
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    mx, my = F.conv2d(gx, win), F.conv2d(gy, win)
    sxx = F.conv2d(gx * gx, win) - mx * mx
    syy = F.conv2d(gy * gy, win) - my * my
    sxy = F.conv2d(gx * gy, win) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    out = smap.mean(dim=(1, 2, 3))
    return out[0] if single else out


def psnr(x, y, cap=PSNR_CAP) -> torch.Tensor:
    """Peak signal-to-noise ratio in dB for ``[0, 1]`` images, capped at ``cap``."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    single = x.dim() == 3
    mse = ((_as_batch(x).double() - _as_batch(y).double()) ** 2).mean(dim=(1, 2, 3))
    out = torch.where(mse > 0, 10 * torch.log10(1.0 / mse.clamp_min(1e-300)), torch.full_like(mse, cap))
    out = out.clamp(max=cap)
    return out[0] if single else out


def fid_from_stats(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians.

    The trace of ``(cov_a cov_b)^(1/2)`` is taken as the trace of the symmetric
    root of ``sqrt(cov_a) cov_b sqrt(cov_a)``, which has the same eigenvalues.
    """
    mu_a, mu_b = np.atleast_1d(np.asarray(mu_a, np.float64)), np.atleast_1d(np.asarray(mu_b, np.float64))
    cov_a, cov_b = np.atleast_2d(np.asarray(cov_a, np.float64)), np.atleast_2d(np.asarray(cov_b, np.float64))
    if not (np.isfinite(cov_a).all() and np.isfinite(cov_b).all()):
        raise ValueError("covariance contains non-finite values")
    root_a = _psd_sqrt(cov_a)
    middle = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(middle)
    return float(max(value, 0.0))


def _psd_sqrt(m):
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(features_a, features_b, jitter=1e-6) -> float:
    """FID between two ``N x d`` feature sets (any embedder)."""
    a, b = np.asarray(features_a, np.float64), np.asarray(features_b, np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be N x d with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("need at least two samples per set")
    eye = np.eye(a.shape[1]) * jitter
    return fid_from_stats(a.mean(0), np.cov(a, rowvar=False) + eye, b.mean(0), np.cov(b, rowvar=False) + eye)


def save_features(path, features) -> None:
    """Store an ``N x d`` float32 feature matrix (``.npy`` container, shape in header)."""
    arr = np.ascontiguousarray(features, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("features must be N x d")
    with open(path, "wb") as fh:
        np.save(fh, arr, allow_pickle=False)


def load_features(path) -> np.ndarray:
    arr = np.load(path, allow_pickle=False)
    if arr.ndim != 2 or arr.dtype != np.float32:
        raise ValueError(f"{path}: expected an N x d float32 array, got {arr.dtype} {arr.shape}")
    return arr


@dataclass
class MetricReport:
    """Per-image SSIM/PSNR rows plus corpus-level FID."""

    rows: list = field(default_factory=list)
    fid: float | None = None

    def add(self, name, ssim_value, psnr_value):
        self.rows.append({"name": name, "ssim": float(ssim_value), "psnr": float(psnr_value)})

    @property
    def mean_ssim(self):
        return float(np.mean([r["ssim"] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_psnr(self):
        return float(np.mean([r["psnr"] for r in self.rows])) if self.rows else float("nan")

    def summary(self) -> dict:
        out = {"count": len(self.rows), "ssim": self.mean_ssim, "psnr": self.mean_psnr}
        if self.fid is not None:
            out["fid"] = self.fid
        return out

    def write(self, path) -> tuple[Path, Path]:
        """Write ``path`` (``key = value`` lines) and a sibling per-image CSV."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for k, v in self.summary().items():
                fh.write(f"{k} = {v:.6f}\n" if isinstance(v, float) else f"{k} = {v}\n")
        csv_path = path.with_suffix(".csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["name", "ssim", "psnr"], lineterminator="\n")
            writer.writeheader()
            for r in self.rows:
                writer.writerow({"name": r["name"], "ssim": f"{r['ssim']:.6f}", "psnr": f"{r['psnr']:.6f}"})
        return path, csv_path
