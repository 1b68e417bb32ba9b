"""Sequential multi-level diffusion: training objective and sampler.

The generative process treats the pyramid as one long chain: the coarsest
level runs its full reverse diffusion first, then each finer level runs
conditioned on everything already completed.  Training never unrolls that
chain; it samples a single (level, timestep) uniformly and regresses the
injected noise, teacher-forcing the coarser conditions with clean latents.

Classifier-free guidance combines a conditional and an unconditional
prediction.  The scales 0 and 1 short-circuit to a single call so the
identities are bitwise; other scales run one batched pass with the
condition dropped on the second half.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .codec import LatentPyramid, LatentStats, PyramidCodec, destandardize, standardize
from .denoiser import DenoiserContext
from .quantizer import quantize
from .schedule import NoiseSchedule, Timeline, build_timeline, ddpm_step, q_sample, respace

__all__ = [
    "TrainBatchPlan",
    "SamplerState",
    "plan_train_batch",
    "denoising_train_loss",
    "guided_eps",
    "sample_pyramid",
    "generate_image",
    "forward_corruption_trace",
]


@dataclass
class TrainBatchPlan:
    """One training draw: which level, which timestep, which noise."""

    level: int
    timestep: int
    noise: torch.Tensor
    coarser_levels: list[torch.Tensor] = field(default_factory=list)

    def __post_init__(self):
        if self.level < 1 or self.timestep < 1:
            raise ValueError("level and timestep are 1-based positive integers")


@dataclass
class SamplerState:
    """Progress record for one sampling run.

    ``completed`` maps level -> finished z^m_0 for every level above the
    current one; ``call_log`` lists (level, timestep) for each denoiser
    invocation in order.
    """

    level: int
    timestep: int
    s_g: float
    completed: dict[int, torch.Tensor] = field(default_factory=dict)
    call_log: list[tuple[int, int]] = field(default_factory=list)


def plan_train_batch(
    pyramid: LatentPyramid, sched: NoiseSchedule, generator: torch.Generator | None = None
) -> TrainBatchPlan:
    """Uniformly sample (n, t), draw matching noise, teacher-force the rest."""
    n = int(torch.randint(1, pyramid.N + 1, (1,), generator=generator))
    t = int(torch.randint(1, sched.T + 1, (1,), generator=generator))
    z = pyramid.level(n)
    eps = torch.randn(z.shape, generator=generator, dtype=z.dtype, device=z.device)
    coarser = [pyramid.level(m).detach() for m in range(n + 1, pyramid.N + 1)]
    return TrainBatchPlan(level=n, timestep=t, noise=eps, coarser_levels=coarser)


def denoising_train_loss(
    pyramid: LatentPyramid,
    plan: TrainBatchPlan,
    denoiser,
    sched: NoiseSchedule,
    cond: torch.Tensor | None = None,
    cond_mask: torch.Tensor | None = None,
    cond_dropout: bool | torch.Tensor = False,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Noise-prediction MSE at the planned (level, timestep).

    The pyramid must already be standardized.  Coarser conditions enter
    detached: levels train independently, gradients never couple through
    the teacher-forced inputs.
    """
    z0 = pyramid.level(plan.level)
    if plan.noise.shape != z0.shape:
        raise ValueError("plan noise shape does not match the target level")
    z_t = q_sample(z0, plan.timestep, plan.noise, sched)
    ctx = DenoiserContext(
        level=plan.level,
        timestep=plan.timestep,
        target=z_t,
        coarser_levels=[c.detach() for c in plan.coarser_levels],
        cond_embeddings=cond,
        cond_mask=cond_mask,
        cond_dropout_flag=cond_dropout,
    )
    eps_hat = denoiser.predict_eps(ctx, generator=generator)
    return (plan.noise - eps_hat).pow(2).mean()


def guided_eps(
    denoiser,
    ctx_cond: DenoiserContext,
    ctx_uncond: DenoiserContext,
    s_g: float,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """eps_u + s_g * (eps_c - eps_u).

    s_g of exactly 0 or 1 runs a single prediction, so those identities
    hold bitwise.  Other scales evaluate both branches in one batched pass
    (condition dropped on the second half), which halves latency without
    changing the result's distribution.
    """
    if s_g < 0:
        raise ValueError(f"guidance scale must be nonnegative, got {s_g}")
    if s_g == 0.0:
        return denoiser.predict_eps(ctx_uncond, generator=generator)
    if s_g == 1.0 or ctx_cond.cond_embeddings is None:
        return denoiser.predict_eps(ctx_cond, generator=generator)
    target = ctx_cond.target
    batched = target.dim() == 4
    tb = target if batched else target.unsqueeze(0)
    B = tb.shape[0]
    tokens = ctx_cond.cond_embeddings
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0).expand(B, -1, -1)
    mask = ctx_cond.cond_mask
    if mask is not None and mask.dim() == 1:
        mask = mask.unsqueeze(0).expand(B, -1)
    coarser = []
    for c in ctx_cond.coarser_levels:
        cb = c if batched else c.unsqueeze(0)
        coarser.append(torch.cat([cb, cb]))
    both = DenoiserContext(
        level=ctx_cond.level,
        timestep=ctx_cond.timestep,
        target=torch.cat([tb, tb]),
        coarser_levels=coarser,
        cond_embeddings=torch.cat([tokens, tokens]),
        cond_mask=None if mask is None else torch.cat([mask, mask]),
        cond_dropout_flag=torch.cat(
            [torch.zeros(B, dtype=torch.bool), torch.ones(B, dtype=torch.bool)]
        ),
    )
    out = denoiser.predict_eps(both, generator=generator)
    eps_c, eps_u = out[:B], out[B:]
    guided = eps_u + s_g * (eps_c - eps_u)
    return guided if batched else guided.squeeze(0)


def sample_pyramid(
    denoiser,
    timeline: Timeline,
    sched: NoiseSchedule,
    finest_size: int,
    latent_channels: int,
    cond: torch.Tensor | None = None,
    cond_mask: torch.Tensor | None = None,
    s_g: float = 2.0,
    generator: torch.Generator | None = None,
    batch: int = 1,
    guidance_levels: set[int] | None = None,
    dtype: torch.dtype = torch.float32,
    variance: str = "posterior",
) -> tuple[LatentPyramid, SamplerState]:
    """Coarse-to-fine reverse diffusion over the whole pyramid.

    Every level starts from fresh N(0, I) at its own resolution and runs
    its complete timestep block before the next finer level begins,
    conditioned on all completed coarser latents.  Returns standardized
    latents plus the sampler state whose call log mirrors the timeline.
    """
    N = timeline.N
    if finest_size % (1 << (N - 1)) != 0:
        raise ValueError(f"finest size {finest_size} not divisible across {N} levels")
    expected = build_timeline(N, timeline.T_infer, sched)
    if expected.step_map != timeline.step_map:
        raise ValueError("timeline is inconsistent with the schedule")
    sub = respace(sched, timeline.T_infer)
    state = SamplerState(level=N, timestep=sub.T, s_g=float(s_g))
    completed: dict[int, torch.Tensor] = {}
    for n in range(N, 0, -1):
        size = finest_size >> (n - 1)
        z = torch.randn(batch, latent_channels, size, size, generator=generator, dtype=dtype)
        coarser = [completed[m] for m in range(n + 1, N + 1)]
        guide_here = cond is not None and (guidance_levels is None or n in guidance_levels)
        for pos in range(sub.T, 0, -1):
            t_orig = int(sub.timesteps[pos - 1])
            state.level, state.timestep = n, t_orig
            ctx_c = DenoiserContext(
                level=n, timestep=t_orig, target=z, coarser_levels=coarser,
                cond_embeddings=cond, cond_mask=cond_mask,
            )
            if guide_here:
                ctx_u = DenoiserContext(
                    level=n, timestep=t_orig, target=z, coarser_levels=coarser
                )
                eps_hat = guided_eps(denoiser, ctx_c, ctx_u, s_g, generator=generator)
            else:
                eps_hat = denoiser.predict_eps(ctx_c, generator=generator)
            state.call_log.append((n, t_orig))
            if pos > 1:
                xi = torch.randn(z.shape, generator=generator, dtype=dtype)
            else:
                xi = torch.zeros_like(z)
            z = ddpm_step(z, eps_hat, pos, sub, xi, variance=variance)
            if not torch.isfinite(z).all():
                raise RuntimeError(
                    f"non-finite latent during sampling at level {n}, timestep {t_orig}"
                )
        completed[n] = z
        state.completed = dict(completed)
    pyramid = LatentPyramid([completed[n] for n in range(1, N + 1)])
    return pyramid, state


def generate_image(
    denoiser,
    codec: PyramidCodec,
    stats: LatentStats,
    timeline: Timeline,
    sched: NoiseSchedule,
    cond: torch.Tensor | None = None,
    cond_mask: torch.Tensor | None = None,
    s_g: float = 2.0,
    generator: torch.Generator | None = None,
    batch: int = 1,
    requantize: bool = True,
    guidance_levels: set[int] | None = None,
    variance: str = "posterior",
) -> torch.Tensor:
    """Sample latents, undo standardization, optionally snap to the
    codebooks, and decode.  Returns [3,H,W] for batch 1, else [B,3,H,W]."""
    finest = codec.cfg.latent_size(1)
    pyramid, _ = sample_pyramid(
        denoiser, timeline, sched, finest, codec.cfg.channels,
        cond=cond, cond_mask=cond_mask, s_g=s_g, generator=generator,
        batch=batch, guidance_levels=guidance_levels, variance=variance,
    )
    raw = destandardize(pyramid, stats)
    if requantize:
        with torch.no_grad():
            raw = LatentPyramid(
                [quantize(z, book).quantized for z, book in zip(raw.levels, codec.codebooks)]
            )
    with torch.no_grad():
        img = codec.fuse_decode(raw)
    return img.squeeze(0) if batch == 1 else img


def forward_corruption_trace(
    pyramid: LatentPyramid,
    sched: NoiseSchedule,
    k_frames: int,
    codec: PyramidCodec,
    stats: LatentStats,
    generator: torch.Generator | None = None,
) -> list[torch.Tensor]:
    """Decoded snapshots of the sequential forward corruption.

    The chain corrupts level 1 (finest detail) through its full schedule
    first, then each coarser level in turn, so early frames lose detail
    while keeping structure.  Frame 0 is the clean reconstruction; the
    last frame decodes all-noise latents.  One noise draw per level is
    reused across frames so the trace is a coherent trajectory.
    """
    if k_frames < 1:
        raise ValueError("need at least one frame")
    std = standardize(pyramid, stats)
    T, N = sched.T, pyramid.N
    eps = [
        torch.randn(z.shape, generator=generator, dtype=z.dtype) for z in std.levels
    ]
    total = N * T
    frames = []
    with torch.no_grad():
        for j in range(k_frames):
            g = round(j * total / (k_frames - 1)) if k_frames > 1 else 0
            levels = []
            for m in range(1, N + 1):
                t_m = min(max(g - (m - 1) * T, 0), T)
                z0 = std.level(m)
                levels.append(q_sample(z0, t_m, eps[m - 1], sched) if t_m > 0 else z0.clone())
            corrupted = destandardize(LatentPyramid(levels), stats)
            frames.append(codec.fuse_decode(corrupted))
    return frames
