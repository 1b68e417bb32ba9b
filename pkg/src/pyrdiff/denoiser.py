"""Shared denoising U-Net with per-level adapters and coarse-to-fine gating.

One trunk serves every pyramid level and timestep.  The only level-specific
parameters are the input/output 1x1 projections (Phi_e, Phi_d) and the
gate's spatial-modulation convolutions; everything else, including the
stage and timestep embeddings, is shared.  The gate runs once at the trunk
input: coarser latents are noise-augmented, upsampled and concatenated,
two zero-initialized convolutions produce a spatial scale and shift, and an
instance-norm plus a stage-timestep perceptron applies channelwise
modulation.  Zero initialization makes the whole gate invisible to the
coarser content at the start of training.

Conditioning enters through cross-attention at the configured resolutions;
an empty or dropped-out condition attends to a single learned null token,
which is also what classifier-free guidance uses for its unconditional
branch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

__all__ = [
    "TrunkConfig",
    "GateConfig",
    "DenoiserContext",
    "Denoiser",
    "noise_augment",
    "sinusoidal_embedding",
]


@dataclass(frozen=True)
class TrunkConfig:
    """Shared U-Net shape parameters."""

    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    attn_sizes: tuple[int, ...] = (8, 4)  # self/cross-attend where the map is this wide
    res_blocks: int = 1
    heads: int = 4
    context_dim: int = 128

    def __post_init__(self):
        if len(self.channel_mults) < 1:
            raise ValueError("channel_mults must be nonempty")
        if self.base_channels < 1 or self.res_blocks < 1 or self.heads < 1:
            raise ValueError("base_channels, res_blocks and heads must be positive")
        if self.context_dim < 1:
            raise ValueError("context_dim must be positive")


@dataclass(frozen=True)
class GateConfig:
    """Coarse-to-fine gate behaviour."""

    alpha: float = 0.1
    apply_at_inference: bool = False
    embed_width: int = 128

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.embed_width < 2:
            raise ValueError("embed_width must be at least 2")


@dataclass
class DenoiserContext:
    """Everything one prediction needs.

    ``coarser_levels`` lists the clean latents z^{n+1}..z^N, nearest first,
    each half the spatial size of the previous entry.  ``cond_embeddings``
    is [L,D] or [B,L,D] (already in trunk context space) or None for
    unconditional; ``cond_mask`` marks valid tokens (None = all valid).
    ``cond_dropout_flag`` replaces the condition with the learned null
    sequence, per sample when given as a boolean tensor.
    """

    level: int
    timestep: int
    target: torch.Tensor
    coarser_levels: list[torch.Tensor] = field(default_factory=list)
    cond_embeddings: torch.Tensor | None = None
    cond_mask: torch.Tensor | None = None
    cond_dropout_flag: bool | torch.Tensor = False


def noise_augment(z: torch.Tensor, alpha: float, eps: torch.Tensor) -> torch.Tensor:
    """Blend toward noise: alpha*z + (1-alpha)*eps."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if eps.shape != z.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != z shape {tuple(z.shape)}")
    return alpha * z + (1.0 - alpha) * eps


def sinusoidal_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic transformer sin/cos position code for an integer timestep."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
    )
    angles = float(t) * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    if dim % 2 == 1:
        emb = torch.cat([emb, torch.zeros(1, dtype=torch.float64)])
    return emb.to(dtype)


def _group_norm(ch: int) -> nn.GroupNorm:
    groups = 32
    while ch % groups != 0:
        groups //= 2
    return nn.GroupNorm(groups, ch)


class _ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = _group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class _Attention(nn.Module):
    """Multi-head attention over spatial positions.

    Self-attention when no context is passed; cross-attention over a token
    sequence otherwise, with an optional validity mask.
    """

    def __init__(self, ch: int, heads: int, context_dim: int | None = None):
        super().__init__()
        if ch % heads != 0:
            raise ValueError(f"channels {ch} not divisible by {heads} heads")
        self.heads = heads
        self.norm = _group_norm(ch)
        kv_dim = context_dim if context_dim is not None else ch
        self.to_q = nn.Linear(ch, ch)
        self.to_k = nn.Linear(kv_dim, ch)
        self.to_v = nn.Linear(kv_dim, ch)
        self.to_out = nn.Linear(ch, ch)

    def forward(self, x, context=None, mask=None):
        B, C, H, W = x.shape
        h = self.norm(x).reshape(B, C, H * W).transpose(1, 2)  # [B, HW, C]
        kv = h if context is None else context
        q = self.to_q(h)
        k = self.to_k(kv)
        v = self.to_v(kv)
        dh = C // self.heads

        def split(z):
            return z.reshape(B, -1, self.heads, dh).transpose(1, 2)  # [B, hd, L, dh]

        q, k, v = split(q), split(k), split(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        if mask is not None:
            bad = ~mask[:, None, None, :]
            scores = scores.masked_fill(bad, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, H * W, C)
        out = self.to_out(out).transpose(1, 2).reshape(B, C, H, W)
        return x + out


class _Downsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class _Upsample(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class _TrunkCell(nn.Module):
    """Residual block, optionally followed by self- plus cross-attention.

    Attention engages only when the feature map width matches one of the
    configured sizes, so the same cell serves inputs of different
    resolutions (the trunk is reused by every pyramid level).
    """

    def __init__(self, c_in: int, c_out: int, emb_dim: int, trunk: TrunkConfig):
        super().__init__()
        self.res = _ResBlock(c_in, c_out, emb_dim)
        self.attn_sizes = trunk.attn_sizes
        self.attn = _Attention(c_out, trunk.heads)
        self.cross = _Attention(c_out, trunk.heads, trunk.context_dim)

    def forward(self, x, emb, tokens, mask):
        h = self.res(x, emb)
        if h.shape[-1] in self.attn_sizes:
            h = self.attn(h)
            h = self.cross(h, tokens, mask)
        return h


def _zero_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class Denoiser(nn.Module):
    """Noise predictor for every level of the latent pyramid."""

    def __init__(
        self,
        trunk: TrunkConfig = TrunkConfig(),
        gate: GateConfig = GateConfig(),
        levels: int = 2,
        latent_channels: int = 4,
    ):
        super().__init__()
        if levels < 1:
            raise ValueError("need at least one level")
        self.trunk_cfg = trunk
        self.gate_cfg = gate
        self.levels = levels
        self.latent_channels = latent_channels
        base = trunk.base_channels
        emb = gate.embed_width

        # Per-level adapters: the only level-specific weights besides gating.
        self.proj_in = nn.ModuleList(
            nn.Conv2d(latent_channels, base, 1) for _ in range(levels)
        )
        self.proj_out = nn.ModuleList(
            _zero_(nn.Conv2d(base, latent_channels, 1)) for _ in range(levels)
        )

        # Gate: per-level spatial modulation convs (levels 1..N-1 consume
        # coarser maps), plus one shared stage-timestep perceptron.
        self.gate_scale = nn.ModuleList(
            _zero_(nn.Conv2d(latent_channels * (levels - n), base, 3, padding=1))
            for n in range(1, levels)
        )
        self.gate_shift = nn.ModuleList(
            _zero_(nn.Conv2d(latent_channels * (levels - n), base, 3, padding=1))
            for n in range(1, levels)
        )
        self.gate_norm = nn.InstanceNorm2d(base, affine=False)
        self.gate_mlp = nn.Sequential(
            nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, 2 * base)
        )

        # Shared embeddings.
        self.stage_table = nn.Embedding(levels, emb)
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.null_token = nn.Parameter(torch.zeros(trunk.context_dim))
        nn.init.normal_(self.null_token, std=0.02)

        # Trunk.
        widths = [base * m for m in trunk.channel_mults]
        self.conv_in = nn.Conv2d(base, widths[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        skip_widths = [ch]
        for i, w in enumerate(widths):
            stage = nn.ModuleList()
            for _ in range(trunk.res_blocks):
                stage.append(_TrunkCell(ch, w, emb, trunk))
                ch = w
                skip_widths.append(ch)
            self.down_blocks.append(stage)
            if i < len(widths) - 1:
                self.downsamples.append(_Downsample(ch))
                skip_widths.append(ch)
        self.mid_block1 = _ResBlock(ch, ch, emb)
        self.mid_attn = _Attention(ch, trunk.heads)
        self.mid_cross = _Attention(ch, trunk.heads, trunk.context_dim)
        self.mid_block2 = _ResBlock(ch, ch, emb)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            stage = nn.ModuleList()
            for _ in range(trunk.res_blocks + 1):
                stage.append(_TrunkCell(ch + skip_widths.pop(), widths[i], emb, trunk))
                ch = widths[i]
            self.up_blocks.append(stage)
            if i > 0:
                self.upsamples.append(_Upsample(ch))
        self.out_norm = _group_norm(ch)
        self.out_conv = nn.Conv2d(ch, base, 3, padding=1)

    # ---------------- embeddings ----------------

    def stage_embedding(self, n: int) -> torch.Tensor:
        if not 1 <= n <= self.levels:
            raise ValueError(f"level {n} outside [1, {self.levels}]")
        return self.stage_table.weight[n - 1]

    def timestep_embedding(self, t: int) -> torch.Tensor:
        raw = sinusoidal_embedding(t, self.gate_cfg.embed_width, dtype=self.stage_table.weight.dtype)
        return self.time_mlp(raw.to(self.stage_table.weight.device))

    def embed_stage_timestep(self, n: int, t: int) -> torch.Tensor:
        """Summed stage + timestep embedding, width ``gate_cfg.embed_width``."""
        return self.stage_embedding(n) + self.timestep_embedding(t)

    # ---------------- adapters ----------------

    def level_project_in(self, z: torch.Tensor, n: int) -> torch.Tensor:
        if not 1 <= n <= self.levels:
            raise ValueError(f"level {n} outside [1, {self.levels}]")
        return self.proj_in[n - 1](z)

    def level_project_out(self, h: torch.Tensor, n: int) -> torch.Tensor:
        if not 1 <= n <= self.levels:
            raise ValueError(f"level {n} outside [1, {self.levels}]")
        return self.proj_out[n - 1](h)

    # ---------------- gate ----------------

    def c2f_gate(
        self,
        h: torch.Tensor,
        coarser: list[torch.Tensor],
        s_emb: torch.Tensor,
        t_emb: torch.Tensor,
        n: int,
        generator: torch.Generator | None = None,
    ) -> torch.Tensor:
        """Inject coarser-level content, then stage-timestep modulation.

        Training always noise-augments the coarser maps; inference does so
        only when the config asks for it.
        """
        if coarser:
            H = h.shape[-2]
            ups = []
            for z in coarser:
                if H % z.shape[-2] != 0 or h.shape[-1] % z.shape[-1] != 0:
                    raise ValueError(
                        f"coarser map {tuple(z.shape[-2:])} does not divide {tuple(h.shape[-2:])}"
                    )
                if self.training or self.gate_cfg.apply_at_inference:
                    eps = torch.randn(
                        z.shape, generator=generator, dtype=z.dtype, device=z.device
                    )
                    z = noise_augment(z, self.gate_cfg.alpha, eps)
                ups.append(F.interpolate(z, scale_factor=H // z.shape[-2], mode="nearest"))
            cat = torch.cat(ups, dim=1)
            gamma = self.gate_scale[n - 1](cat)
            beta = self.gate_shift[n - 1](cat)
            h = h * (1.0 + gamma) + beta
        emb = s_emb + t_emb
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        scale, shift = self.gate_mlp(emb).chunk(2, dim=-1)
        h = self.gate_norm(h)
        return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]

    # ---------------- full prediction ----------------

    def _check_context(self, ctx: DenoiserContext) -> tuple[torch.Tensor, list[torch.Tensor], bool]:
        n = ctx.level
        if not 1 <= n <= self.levels:
            raise ValueError(f"level {n} outside [1, {self.levels}]")
        z = ctx.target
        if z.dim() not in (3, 4) or z.shape[-3] != self.latent_channels:
            raise ValueError(f"bad target shape {tuple(z.shape)}")
        want = self.levels - n
        if len(ctx.coarser_levels) != want:
            raise ValueError(f"level {n} needs {want} coarser maps, got {len(ctx.coarser_levels)}")
        batched = z.dim() == 4
        zb = z if batched else z.unsqueeze(0)
        coarser = []
        prev = zb
        for c in ctx.coarser_levels:
            cb = c if batched else c.unsqueeze(0)
            if cb.dim() != 4 or cb.shape[-3] != self.latent_channels:
                raise ValueError(f"bad coarser shape {tuple(c.shape)}")
            if 2 * cb.shape[-1] != prev.shape[-1] or 2 * cb.shape[-2] != prev.shape[-2]:
                raise ValueError("coarser maps must halve the spatial size step by step")
            coarser.append(cb)
            prev = cb
        return zb, coarser, batched

    def _context_tokens(
        self, ctx: DenoiserContext, B: int, dtype, device
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        D = self.trunk_cfg.context_dim
        null = self.null_token.to(dtype)
        if ctx.cond_embeddings is None:
            return null.reshape(1, 1, D).expand(B, 1, D), None
        tokens = ctx.cond_embeddings
        if tokens.dim() == 2:
            tokens = tokens.unsqueeze(0).expand(B, -1, -1)
        if tokens.shape[-1] != D:
            raise ValueError(f"context dim {tokens.shape[-1]} != configured {D}")
        mask = ctx.cond_mask
        if mask is not None and mask.dim() == 1:
            mask = mask.unsqueeze(0).expand(B, -1)
        drop = ctx.cond_dropout_flag
        if isinstance(drop, bool):
            drop = torch.full((B,), drop, dtype=torch.bool, device=device)
        if drop.any():
            L = tokens.shape[1]
            filler = null.reshape(1, 1, D).expand(B, L, D)
            tokens = torch.where(drop[:, None, None], filler, tokens)
            if mask is not None:
                mask = torch.where(drop[:, None], torch.ones_like(mask), mask)
        return tokens, mask

    def predict_eps(
        self, ctx: DenoiserContext, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        """Predicted noise for z^n_t, shaped like the target."""
        zb, coarser, batched = self._check_context(ctx)
        n, t = ctx.level, ctx.timestep
        B = zb.shape[0]
        dtype, device = zb.dtype, zb.device
        s_emb = self.stage_embedding(n)
        t_emb = self.timestep_embedding(t)
        emb = (s_emb + t_emb).unsqueeze(0).expand(B, -1)
        tokens, mask = self._context_tokens(ctx, B, dtype, device)

        h = self.level_project_in(zb, n)
        h = self.c2f_gate(h, coarser, s_emb, t_emb, n, generator=generator)

        h = self.conv_in(h)
        skips = [h]
        for i, stage in enumerate(self.down_blocks):
            for cell in stage:
                h = cell(h, emb, tokens, mask)
                skips.append(h)
            if i < len(self.downsamples):
                h = self.downsamples[i](h)
                skips.append(h)
        h = self.mid_block1(h, emb)
        h = self.mid_attn(h)
        h = self.mid_cross(h, tokens, mask)
        h = self.mid_block2(h, emb)
        for j, stage in enumerate(self.up_blocks):
            for cell in stage:
                h = cell(torch.cat([h, skips.pop()], dim=1), emb, tokens, mask)
            if j < len(self.upsamples):
                h = self.upsamples[j](h)
        h = self.out_conv(F.silu(self.out_norm(h)))
        eps = self.level_project_out(h, n)
        return eps if batched else eps.squeeze(0)

    # ---------------- audits ----------------

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters split into trunk, per-level projections, and gate.

        The stage table counts as per-level: it grows one row per level,
        so the trunk group stays identical for any level count.
        """
        proj = (
            list(self.proj_in.parameters())
            + list(self.proj_out.parameters())
            + list(self.stage_table.parameters())
        )
        gate = (
            list(self.gate_scale.parameters())
            + list(self.gate_shift.parameters())
            + list(self.gate_mlp.parameters())
        )
        tagged = {id(p) for p in proj + gate}
        trunk = [p for p in self.parameters() if id(p) not in tagged]
        return {"trunk": trunk, "projections": proj, "gate": gate}

    def group_counts(self) -> dict[str, int]:
        return {k: sum(p.numel() for p in v) for k, v in self.parameter_groups().items()}
