"""Shared test fixtures: analytic denoisers and tiny model builders."""

import math

import torch

from pyrdiff.codec import CodecConfig
from pyrdiff.config import (
    ConditioningSection,
    DataSection,
    OptimizerSection,
    RunConfig,
    ScheduleSection,
)
from pyrdiff.denoiser import Denoiser, GateConfig, TrunkConfig
from pyrdiff.schedule import NoiseSchedule


class GaussianOracleDenoiser:
    """Optimal noise predictor when level n's data is N(mu_n, sigma2_n I).

    For q(z_t | z_0) with z_0 ~ N(mu, sigma^2 I), the posterior-mean noise
    estimate is

        eps*(z_t) = sqrt(1 - ab_t) (z_t - sqrt(ab_t) mu) / (ab_t sigma^2 + 1 - ab_t)

    which is exact, so sampling with it must reproduce N(mu, sigma^2 I).
    Levels are independent; the oracle ignores coarser inputs and
    conditioning.  Timesteps are looked up by original identity, so the
    oracle works with respaced schedules too.
    """

    def __init__(self, sched: NoiseSchedule, mus, sigma2s):
        self.ab = {int(t): float(a) for t, a in zip(sched.timesteps, sched.alpha_bars)}
        self.mus = list(mus)
        self.sigma2s = list(sigma2s)
        self.calls: list[tuple[int, int]] = []

    def predict_eps(self, ctx, generator=None):
        self.calls.append((ctx.level, ctx.timestep))
        ab = self.ab[ctx.timestep]
        mu = self.mus[ctx.level - 1]
        s2 = self.sigma2s[ctx.level - 1]
        z = ctx.target
        return math.sqrt(1.0 - ab) * (z - math.sqrt(ab) * mu) / (ab * s2 + 1.0 - ab)


class ConstantDenoiser:
    """Returns a fixed tensor (or value) regardless of the context."""

    def __init__(self, value):
        self.value = value
        self.calls: list[tuple[int, int]] = []

    def predict_eps(self, ctx, generator=None):
        self.calls.append((ctx.level, ctx.timestep))
        if isinstance(self.value, torch.Tensor):
            return self.value.expand_as(ctx.target).clone()
        return torch.full_like(ctx.target, self.value)


def mini_run_config(out_dir: str, max_steps: int = 30, **overrides) -> RunConfig:
    """16x16 two-level run that trains in seconds on one CPU core."""
    base = dict(
        schedule=ScheduleSection(T=20, sample_steps=5),
        codec=CodecConfig(image_size=16, factors=(4, 2), codebook_sizes=(32, 32), hidden=8),
        denoiser=TrunkConfig(base_channels=8, channel_mults=(1, 2), attn_sizes=(4,), context_dim=32),
        gate=GateConfig(alpha=0.1, embed_width=32),
        conditioning=ConditioningSection(width=32, layers=1, heads=2),
        data=DataSection(dataset_size=12, val_size=4, image_size=16, seed=7),
        optimizer=OptimizerSection(lr=1e-3),
        batch_size=4,
        max_steps=max_steps,
        checkpoint_every=10,
        seed=23,
        out_dir=out_dir,
    )
    base.update(overrides)
    return RunConfig(**base)


def mini_denoiser(levels=2, latent_channels=2, alpha=0.1, seed=0, wake=True) -> Denoiser:
    """Small real denoiser for fast end-to-end tests."""
    torch.manual_seed(seed)
    d = Denoiser(
        trunk=TrunkConfig(base_channels=16, channel_mults=(1, 2), attn_sizes=(4,),
                          heads=2, context_dim=16),
        gate=GateConfig(alpha=alpha, embed_width=16),
        levels=levels,
        latent_channels=latent_channels,
    )
    if wake:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for conv in d.proj_out:
                conv.weight.normal_(0, 0.2, generator=g)
                conv.bias.normal_(0, 0.2, generator=g)
    return d
