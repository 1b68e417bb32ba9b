"""Evaluation metrics: PSNR, SSIM, a proxy Fréchet distance, and the
conditioning-faithfulness probe.

The proxy Fréchet distance replaces a pretrained feature extractor with
a fixed randomly initialized conv net (seed recorded below, weights
frozen forever), so only relative comparisons between image sets are
meaningful, never absolute scores from the literature.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "PSNR_CAP",
    "MetricReport",
    "psnr",
    "ssim",
    "proxy_fd",
    "SceneProbe",
    "train_probe",
    "probe_accuracy",
    "probe_labels",
]

PSNR_CAP = 100.0

_FEATURE_SEED = 90125
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_FD_MIN_IMAGES = 64


@dataclass
class MetricReport:
    """Bundle of evaluation and profiling results.

    Metric fields stay None when a report only covers profiling; the
    profiling dicts are keyed by pyramid level.
    """

    psnr: float | None = None
    ssim: float | None = None
    proxy_fd: float | None = None
    wall_time_per_level: dict[int, float] = field(default_factory=dict)
    flops_per_level: dict[int, float] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.proxy_fd is not None and self.proxy_fd < 0:
            raise ValueError(f"proxy_fd must be nonnegative, got {self.proxy_fd}")


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    _check_pair(a, b)
    mse = float((a.to(torch.float64) - b.to(torch.float64)).pow(2).mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(data_range * data_range / mse), PSNR_CAP)


def _batched_images(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x.unsqueeze(0).unsqueeze(0)
    if x.dim() == 3:
        return x.unsqueeze(0)
    if x.dim() == 4:
        return x
    raise ValueError(f"expected 2-4 dims, got shape {tuple(x.shape)}")


@functools.lru_cache(maxsize=4)
def _gaussian_window(dtype_name: str) -> torch.Tensor:
    radius = (_SSIM_WINDOW - 1) // 2
    xs = torch.arange(-radius, radius + 1, dtype=getattr(torch, dtype_name))
    k1 = torch.exp(-0.5 * (xs / _SSIM_SIGMA) ** 2)
    k1 = k1 / k1.sum()
    return torch.outer(k1, k1)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """Mean structural similarity with the standard Gaussian window.

    Constants K1=0.01, K2=0.03, 11-tap window with sigma 1.5, weighted
    (population) local moments, computed on images already scaled to
    ``data_range``; valid-region average like the reference definition.
    """
    _check_pair(a, b)
    x = _batched_images(a).to(torch.float64)
    y = _batched_images(b).to(torch.float64)
    if min(x.shape[-2:]) < _SSIM_WINDOW:
        raise ValueError(f"images must be at least {_SSIM_WINDOW} pixels per side")
    ch = x.shape[1]
    window = _gaussian_window("float64").expand(ch, 1, _SSIM_WINDOW, _SSIM_WINDOW)

    def blur(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=ch)

    ux, uy = blur(x), blur(y)
    vx = blur(x * x) - ux * ux
    vy = blur(y * y) - uy * uy
    vxy = blur(x * y) - ux * uy
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
    return float(s.mean())


@functools.lru_cache(maxsize=1)
def _feature_net() -> nn.Sequential:
    """Fixed random 4-layer strided conv feature extractor, frozen."""
    with torch.random.fork_rng():
        torch.manual_seed(_FEATURE_SEED)
        net = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, 64, 3, stride=2, padding=1),
        )
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def _features(images: torch.Tensor, batch: int = 64) -> np.ndarray:
    if images.dim() != 4 or images.shape[1] != 3:
        raise ValueError(f"expected images [B,3,H,W], got {tuple(images.shape)}")
    net = _feature_net()
    out = []
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            h = net(images[i : i + batch].to(torch.float32))
            out.append(h.mean(dim=(2, 3)))
    return torch.cat(out).to(torch.float64).numpy()


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2.0)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def proxy_fd(set_a: torch.Tensor, set_b: torch.Tensor) -> float:
    """Fréchet distance between Gaussian fits of fixed random features.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the
    matrix square roots taken through symmetric eigendecompositions
    (eigenvalues clamped at zero) and a 1e-6 diagonal jitter guarding
    degenerate covariances.
    """
    for name, s in (("set_a", set_a), ("set_b", set_b)):
        if s.dim() != 4 or s.shape[0] < _FD_MIN_IMAGES:
            raise ValueError(
                f"{name} must be [B,3,H,W] with at least {_FD_MIN_IMAGES} images, "
                f"got {tuple(s.shape)}"
            )
    fa, fb = _features(set_a), _features(set_b)
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False) + 1e-6 * np.eye(fa.shape[1])
    cov_b = np.cov(fb, rowvar=False) + 1e-6 * np.eye(fb.shape[1])
    sqrt_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sqrt_a @ cov_b @ sqrt_a)
    fd = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(fd, 0.0)


class SceneProbe(nn.Module):
    """Classifier of the largest object's color and shape in a render.

    Consumes images in [0, 1].  The synthetic domain is separable by
    design, so a well-trained probe can audit whether generated images
    honor their conditioning.

    Distractor objects share the canvas, so plain average pooling dilutes
    the target; a learned attention map scores cells before pooling,
    letting the heads read only the object the scorer picks out.
    """

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * hidden, 4 * hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(4 * hidden, 4 * hidden, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(4 * hidden, 4 * hidden, 3, padding=1),
            nn.SiLU(),
        )
        self.scorer = nn.Conv2d(4 * hidden, 1, 1)
        self.color_head = nn.Linear(4 * hidden, 8)
        self.shape_head = nn.Linear(4 * hidden, 3)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features(images)
        b, c = f.shape[:2]
        weights = torch.softmax(self.scorer(f).reshape(b, -1), dim=1)
        h = torch.bmm(f.reshape(b, c, -1), weights.unsqueeze(2)).squeeze(2)
        return self.color_head(h), self.shape_head(h)


def probe_labels(specs) -> tuple[torch.Tensor, torch.Tensor]:
    """(color ids, shape ids) of each scene's largest object."""
    from .scenes import color_index, largest_object, shape_index

    colors, shapes = [], []
    for spec in specs:
        big = largest_object(spec)
        colors.append(color_index(big.color))
        shapes.append(shape_index(big.shape))
    return torch.tensor(colors, dtype=torch.long), torch.tensor(shapes, dtype=torch.long)


def train_probe(
    images: torch.Tensor,
    color_labels: torch.Tensor,
    shape_labels: torch.Tensor,
    steps: int = 1200,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    hidden: int = 32,
) -> SceneProbe:
    """Fit a probe on real renders (images in [0, 1])."""
    if images.dim() != 4 or not (
        images.shape[0] == color_labels.shape[0] == shape_labels.shape[0]
    ):
        raise ValueError("images and labels must align on the first dimension")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        probe = SceneProbe(hidden=hidden)
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    decay = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    probe.train()
    n = images.shape[0]
    for _ in range(steps):
        idx = torch.randint(0, n, (min(batch_size, n),), generator=g)
        color_logits, shape_logits = probe(images[idx])
        loss = F.cross_entropy(color_logits, color_labels[idx]) + F.cross_entropy(
            shape_logits, shape_labels[idx]
        )
        opt.zero_grad()
        loss.backward()
        opt.step()
        decay.step()
    return probe.eval()


def probe_accuracy(
    probe: SceneProbe,
    images: torch.Tensor,
    color_labels: torch.Tensor,
    shape_labels: torch.Tensor,
    batch: int = 128,
) -> dict[str, float]:
    """Fractions of images whose color / shape / both match the labels."""
    color_hits, shape_hits, joint_hits = 0, 0, 0
    probe.eval()
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            cl, sl = probe(images[i : i + batch])
            c_ok = cl.argmax(dim=1) == color_labels[i : i + batch]
            s_ok = sl.argmax(dim=1) == shape_labels[i : i + batch]
            color_hits += int(c_ok.sum())
            shape_hits += int(s_ok.sum())
            joint_hits += int((c_ok & s_ok).sum())
    n = images.shape[0]
    return {"color": color_hits / n, "shape": shape_hits / n, "joint": joint_hits / n}
