"""Multi-scale vector-quantized autoencoder over a feature pyramid.

The encoder is one strided convolutional trunk with a lightweight head at
each configured resolution; the decoder walks back up, upsampling and
adding a learned 1x1 projection of each level's latent as its resolution
is reached, so every level contributes to the reconstruction.  Latents are
quantized per level with independent codebooks, and per-level statistics
(mean, std) standardize the quantized embeddings for the diffusion stage.

Pyramid ordering convention: ``levels[0]`` is z^1, the finest scale, and
``levels[N-1]`` is z^N, the coarsest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

from .quantizer import COMMITMENT_WEIGHT, Codebook, quantize, straight_through_apply, vq_loss

__all__ = [
    "CodecConfig",
    "LatentPyramid",
    "LatentStats",
    "PyramidCodec",
    "PatchDiscriminator",
    "PyramidQuantization",
    "CodecLossBreakdown",
    "codec_loss",
    "hinge_d_loss",
    "stats_from_pyramids",
    "fit_latent_stats",
    "standardize",
    "destandardize",
]


@dataclass(frozen=True)
class CodecConfig:
    """Architecture and loss configuration for the pyramid autoencoder.

    ``factors`` lists pixels-per-latent for each level from coarsest to
    finest (strictly decreasing, consecutive halving), e.g. ``(8, 4)``
    puts the coarse level at image_size/8 and the fine level at
    image_size/4.
    """

    image_size: int = 64
    factors: tuple[int, ...] = (8, 4)
    channels: int = 4
    codebook_sizes: tuple[int, ...] = (256, 256)
    hidden: int = 32
    recon_weight: float = 1.0
    vq_weight: float = 1.0
    adv_weight: float = 0.1
    use_discriminator: bool = False
    disc_start_step: int = 0

    def __post_init__(self):
        if len(self.factors) < 1:
            raise ValueError("need at least one pyramid level")
        for f in self.factors:
            if f < 1 or (f & (f - 1)) != 0:
                raise ValueError(f"factors must be powers of two, got {f}")
        for a, b in zip(self.factors, self.factors[1:]):
            if a != 2 * b:
                raise ValueError(f"consecutive factors must halve, got {self.factors}")
        if self.image_size % self.factors[0] != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by factor {self.factors[0]}")
        if len(self.codebook_sizes) != len(self.factors):
            raise ValueError("one codebook size per level required")
        if self.channels < 1 or self.hidden < 1:
            raise ValueError("channels and hidden width must be positive")

    @property
    def N(self) -> int:
        return len(self.factors)

    def factor_of_level(self, n: int) -> int:
        """Pixels per latent for level n in 1..N (1 = finest)."""
        if not 1 <= n <= self.N:
            raise ValueError(f"level {n} outside [1, {self.N}]")
        return self.factors[self.N - n]

    def latent_size(self, n: int) -> int:
        return self.image_size // self.factor_of_level(n)


@dataclass
class LatentPyramid:
    """Ordered latent maps, finest (z^1) to coarsest (z^N).

    Tensors are [c,h,w] or [B,c,h,w]; all levels share channel width and
    batchedness, and each level is exactly half the spatial size of the
    previous one.
    """

    levels: list[torch.Tensor]

    def __post_init__(self):
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")
        dims = {z.dim() for z in self.levels}
        if dims not in ({3}, {4}):
            raise ValueError("all levels must be [c,h,w] or all [B,c,h,w]")
        cs = {z.shape[-3] for z in self.levels}
        if len(cs) != 1:
            raise ValueError(f"levels disagree on channel width: {sorted(cs)}")
        for a, b in zip(self.levels, self.levels[1:]):
            if a.shape[-1] != 2 * b.shape[-1] or a.shape[-2] != 2 * b.shape[-2]:
                raise ValueError("each level must halve the spatial size of the previous")

    @property
    def N(self) -> int:
        return len(self.levels)

    @property
    def c(self) -> int:
        return self.levels[0].shape[-3]

    def level(self, n: int) -> torch.Tensor:
        """z^n for n in 1..N."""
        if not 1 <= n <= self.N:
            raise ValueError(f"level {n} outside [1, {self.N}]")
        return self.levels[n - 1]

    def map(self, fn) -> "LatentPyramid":
        return LatentPyramid([fn(z) for z in self.levels])


@dataclass(frozen=True)
class LatentStats:
    """Per-level first and second moments of the quantized latents."""

    means: tuple[float, ...]
    stds: tuple[float, ...]

    def __post_init__(self):
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds must align")
        if any(s <= 0 for s in self.stds):
            raise ValueError("all stds must be positive")


class _ResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(x))
        h = self.conv2(F.silu(h))
        return x + h


def _stage_width(hidden: int, k: int) -> int:
    """Trunk width after k halvings: base width once, doubled from then on."""
    return hidden if k <= 1 else 2 * hidden


class _Encoder(nn.Module):
    """Strided trunk with a 1x1 head at each configured latent resolution."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        depth = int(math.log2(cfg.factors[0]))
        self.stem = nn.Conv2d(3, cfg.hidden, 3, padding=1)
        downs, blocks = [], []
        w_prev = cfg.hidden
        for k in range(1, depth + 1):
            w = _stage_width(cfg.hidden, k)
            downs.append(nn.Conv2d(w_prev, w, 3, stride=2, padding=1))
            blocks.append(_ResBlock(w))
            w_prev = w
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.ModuleList(blocks)
        # Head for level n taps the stage whose factor matches.
        heads = []
        for n in range(1, cfg.N + 1):
            k = int(math.log2(cfg.factor_of_level(n)))
            heads.append(nn.Conv2d(_stage_width(cfg.hidden, k), cfg.channels, 1))
        self.heads = nn.ModuleList(heads)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        cfg = self.cfg
        taps = {int(math.log2(cfg.factor_of_level(n))): n for n in range(1, cfg.N + 1)}
        out: dict[int, torch.Tensor] = {}
        h = self.stem(x)
        for k, (down, block) in enumerate(zip(self.downs, self.blocks), start=1):
            h = block(down(h))
            if k in taps:
                n = taps[k]
                out[n] = self.heads[n - 1](F.silu(h))
        return [out[n] for n in range(1, cfg.N + 1)]


class _Decoder(nn.Module):
    """Coarse-to-fine fusion: upsample and add projected latents, end in tanh."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.depth = int(math.log2(cfg.factors[0]))
        self.projs = nn.ModuleList(
            nn.Conv2d(cfg.channels, _stage_width(cfg.hidden, int(math.log2(cfg.factor_of_level(n)))), 1)
            for n in range(1, cfg.N + 1)
        )
        ups, blocks = [], []
        for k in range(self.depth, 0, -1):  # from the coarsest stage back to full res
            w_in = _stage_width(cfg.hidden, k)
            w_out = cfg.hidden if k == 1 else _stage_width(cfg.hidden, k - 1)
            ups.append(nn.Conv2d(w_in, w_out, 3, padding=1))
            blocks.append(_ResBlock(w_in))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(
            nn.SiLU(), nn.Conv2d(cfg.hidden, cfg.hidden, 3, padding=1),
            nn.SiLU(), nn.Conv2d(cfg.hidden, 3, 3, padding=1),
        )

    def forward(self, levels: list[torch.Tensor]) -> torch.Tensor:
        cfg = self.cfg
        taps = {int(math.log2(cfg.factor_of_level(n))): n for n in range(1, cfg.N + 1)}
        k_start = self.depth
        h = self.projs[taps[k_start] - 1](levels[taps[k_start] - 1])
        for i, k in enumerate(range(k_start, 0, -1)):
            if k != k_start and k in taps:
                n = taps[k]
                h = h + self.projs[n - 1](levels[n - 1])
            h = self.blocks[i](h)
            h = self.ups[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return torch.tanh(self.head(h))


@dataclass
class PyramidQuantization:
    """Quantized pyramid plus everything training needs from the snap."""

    pyramid: LatentPyramid  # straight-through values, decoder-ready
    indices: list[torch.Tensor]
    residuals: tuple[float, ...]  # per-level mean squared snap error
    codebook_loss: torch.Tensor  # summed over levels
    commitment_loss: torch.Tensor


@dataclass
class CodecLossBreakdown:
    recon: torch.Tensor
    vq: torch.Tensor
    adversarial: torch.Tensor | None
    total: torch.Tensor


class PyramidCodec(nn.Module):
    """Encoder, per-level codebooks, and fusion decoder as one module."""

    def __init__(self, cfg: CodecConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = _Encoder(cfg)
        self.decoder = _Decoder(cfg)
        self.codebooks = nn.ModuleList(
            Codebook(K, cfg.channels, generator=generator) for K in cfg.codebook_sizes
        )

    def _check_image(self, image: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if image.dim() not in (3, 4) or image.shape[-3] != 3:
            raise ValueError(f"expected [3,H,W] or [B,3,H,W], got {tuple(image.shape)}")
        s = self.cfg.image_size
        if image.shape[-2] != s or image.shape[-1] != s:
            raise ValueError(f"expected {s}x{s} input, got {tuple(image.shape[-2:])}")
        batched = image.dim() == 4
        return (image if batched else image.unsqueeze(0)), batched

    def encode_pyramid(self, image: torch.Tensor) -> LatentPyramid:
        """Continuous (pre-quantization) feature pyramid for an image in [-1,1]."""
        x, batched = self._check_image(image)
        levels = self.encoder(x)
        if not batched:
            levels = [z.squeeze(0) for z in levels]
        return LatentPyramid(levels)

    def quantize_pyramid(self, p: LatentPyramid) -> PyramidQuantization:
        """Snap every level to its codebook with straight-through gradients.

        The returned losses carry the table/encoder gradient paths; the
        pyramid tensors themselves are decoder inputs whose backward is the
        identity into the encoder.
        """
        if p.N != self.cfg.N:
            raise ValueError(f"pyramid has {p.N} levels, codec expects {self.cfg.N}")
        st_levels, indices, residuals = [], [], []
        cb_total = torch.zeros((), dtype=p.levels[0].dtype, device=p.levels[0].device)
        cm_total = torch.zeros_like(cb_total)
        for z, book in zip(p.levels, self.codebooks):
            res = quantize(z, book)
            q_grad = book.table[res.indices]  # differentiable gather for the loss
            q_grad = q_grad.permute(0, 3, 1, 2) if z.dim() == 4 else q_grad.permute(2, 0, 1)
            cb, cm = vq_loss(z, q_grad)
            cb_total = cb_total + cb
            cm_total = cm_total + cm
            st_levels.append(straight_through_apply(z, book))
            indices.append(res.indices)
            residuals.append(res.residual_sq)
        return PyramidQuantization(
            pyramid=LatentPyramid(st_levels),
            indices=indices,
            residuals=tuple(residuals),
            codebook_loss=cb_total,
            commitment_loss=cm_total,
        )

    def fuse_decode(self, p: LatentPyramid) -> torch.Tensor:
        """Decode a (quantized) pyramid back to a [-1,1] image."""
        if p.N != self.cfg.N:
            raise ValueError(f"pyramid has {p.N} levels, codec expects {self.cfg.N}")
        for n in range(1, p.N + 1):
            want = self.cfg.latent_size(n)
            got = p.level(n).shape[-1]
            if got != want:
                raise ValueError(f"level {n} is {got} wide, config expects {want}")
        batched = p.levels[0].dim() == 4
        levels = p.levels if batched else [z.unsqueeze(0) for z in p.levels]
        out = self.decoder(levels)
        return out if batched else out.squeeze(0)

    def forward(self, image: torch.Tensor) -> tuple[torch.Tensor, PyramidQuantization]:
        """Full reconstruction path: encode, quantize, decode."""
        pre = self.encode_pyramid(image)
        quant = self.quantize_pyramid(pre)
        return self.fuse_decode(quant.pyramid), quant


class PatchDiscriminator(nn.Module):
    """Three-layer strided patch classifier emitting one logit per patch."""

    def __init__(self, hidden: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, hidden, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(hidden, 2 * hidden, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * hidden, 1, 4, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)


def codec_loss(
    image: torch.Tensor,
    recon: torch.Tensor,
    quant: PyramidQuantization,
    cfg: CodecConfig,
    disc_logits: torch.Tensor | None = None,
) -> CodecLossBreakdown:
    """Weighted generator-side objective.

    recon is pixel MSE, vq is ``codebook + 0.25 * commitment`` summed over
    levels, and the adversarial term is the hinge generator loss
    ``-mean(logits)`` when discriminator logits are supplied.
    """
    if image.shape != recon.shape:
        raise ValueError("image and reconstruction shapes differ")
    rec = (image - recon).pow(2).mean()
    vq = quant.codebook_loss + COMMITMENT_WEIGHT * quant.commitment_loss
    total = cfg.recon_weight * rec + cfg.vq_weight * vq
    adv = None
    if disc_logits is not None:
        adv = -disc_logits.mean()
        total = total + cfg.adv_weight * adv
    return CodecLossBreakdown(recon=rec, vq=vq, adversarial=adv, total=total)


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge objective: relu(1-real) + relu(1+fake), averaged."""
    return F.relu(1.0 - real_logits).mean() + F.relu(1.0 + fake_logits).mean()


def stats_from_pyramids(pyramids) -> LatentStats:
    """Per-level mean/std accumulated over an iterable of pyramids.

    Moments are taken over all spatial positions and channels (and the
    batch dimension when present).  Raises if any level's spread has
    collapsed (std <= 1e-8), which signals a degenerate codebook.
    """
    sums: list[float] = []
    sq_sums: list[float] = []
    counts: list[int] = []
    for p in pyramids:
        if not sums:
            sums = [0.0] * p.N
            sq_sums = [0.0] * p.N
            counts = [0] * p.N
        elif p.N != len(sums):
            raise ValueError("pyramids disagree on level count")
        for i, z in enumerate(p.levels):
            z64 = z.detach().to(torch.float64)
            sums[i] += float(z64.sum())
            sq_sums[i] += float(z64.pow(2).sum())
            counts[i] += z.numel()
    if not sums:
        raise ValueError("no pyramids supplied")
    means, stds = [], []
    for s, sq, k in zip(sums, sq_sums, counts):
        mean = s / k
        var = max(sq / k - mean * mean, 0.0)
        std = math.sqrt(var)
        if std <= 1e-8:
            raise ValueError("latent spread collapsed (std <= 1e-8); codebook is degenerate")
        means.append(mean)
        stds.append(std)
    return LatentStats(means=tuple(means), stds=tuple(stds))


def fit_latent_stats(
    images: torch.Tensor,
    codec: PyramidCodec,
    batch_size: int = 32,
    min_samples: int = 256,
) -> LatentStats:
    """Per-level mean/std of quantized latents over a dataset sample."""
    if images.dim() != 4 or images.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} images in a [B,3,H,W] batch")

    def encoded():
        with torch.no_grad():
            for start in range(0, images.shape[0], batch_size):
                chunk = images[start : start + batch_size]
                yield codec.quantize_pyramid(codec.encode_pyramid(chunk)).pyramid

    return stats_from_pyramids(encoded())


def standardize(p: LatentPyramid, stats: LatentStats) -> LatentPyramid:
    """Per level: (z - mean) / std."""
    if len(stats.means) != p.N:
        raise ValueError(f"stats cover {len(stats.means)} levels, pyramid has {p.N}")
    return LatentPyramid(
        [(z - m) / s for z, m, s in zip(p.levels, stats.means, stats.stds)]
    )


def destandardize(p: LatentPyramid, stats: LatentStats) -> LatentPyramid:
    """Exact inverse of :func:`standardize`."""
    if len(stats.means) != p.N:
        raise ValueError(f"stats cover {len(stats.means)} levels, pyramid has {p.N}")
    return LatentPyramid(
        [z * s + m for z, m, s in zip(p.levels, stats.means, stats.stds)]
    )
