"""Parameter, FLOP, and wall-time profiling for the denoiser stack.

FLOPs are analytic: forward hooks apply the textbook multiply-add
formulas (2 FLOPs per MAC) to the shapes that actually flow through
convolutions, linear layers, and attention matmuls.  Normalizations,
activations, and resampling are ignored as they are not MAC-dominated.
"""

from __future__ import annotations

import time
from typing import Callable

import torch
from torch import nn

from .codec import PyramidCodec
from .config import RunConfig
from .denoiser import Denoiser, DenoiserContext, _Attention
from .metrics import MetricReport
from .scenes import ConditionEncoder, default_vocab

__all__ = [
    "flops_of_call",
    "denoiser_call_flops",
    "denoiser_wall_time",
    "sampling_flops",
    "component_param_counts",
    "profile_run",
]


def flops_of_call(model: nn.Module, call: Callable[[], object]) -> float:
    """Analytic FLOPs for whatever ``call`` pushes through ``model``."""
    total = [0.0]

    def conv_hook(module, args, kwargs, output):
        macs_per_out = module.in_channels // module.groups
        for k in module.kernel_size:
            macs_per_out *= k
        total[0] += output.numel() * (2.0 * macs_per_out + (1.0 if module.bias is not None else 0.0))

    def linear_hook(module, args, kwargs, output):
        total[0] += output.numel() * (
            2.0 * module.in_features + (1.0 if module.bias is not None else 0.0)
        )

    def attention_hook(module, args, kwargs, output):
        x = args[0]
        context = kwargs.get("context", args[1] if len(args) > 1 else None)
        B, C, H, W = x.shape
        lq = H * W
        lk = lq if context is None else context.shape[-2]
        # q @ k^T and attn @ v, each B * heads * lq * lk * head_dim MACs.
        total[0] += 4.0 * B * lq * lk * C

    hooks = []
    for m in model.modules():
        if isinstance(m, _Attention):
            hooks.append(m.register_forward_hook(attention_hook, with_kwargs=True))
        elif isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(conv_hook, with_kwargs=True))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(linear_hook, with_kwargs=True))
    try:
        with torch.no_grad():
            call()
    finally:
        for h in hooks:
            h.remove()
    return total[0]


def _profile_context(
    denoiser: Denoiser, level: int, finest_size: int, batch: int, cond_len: int | None
) -> DenoiserContext:
    if finest_size % (1 << (denoiser.levels - 1)) != 0:
        raise ValueError(f"finest size {finest_size} not divisible across {denoiser.levels} levels")
    size = finest_size >> (level - 1)
    target = torch.zeros(batch, denoiser.latent_channels, size, size)
    coarser = [
        torch.zeros(batch, denoiser.latent_channels, finest_size >> (m - 1), finest_size >> (m - 1))
        for m in range(level + 1, denoiser.levels + 1)
    ]
    cond = None
    mask = None
    if cond_len is not None:
        cond = torch.zeros(batch, cond_len, denoiser.trunk_cfg.context_dim)
        mask = torch.ones(batch, cond_len, dtype=torch.bool)
    return DenoiserContext(
        level=level, timestep=1, target=target, coarser_levels=coarser,
        cond_embeddings=cond, cond_mask=mask,
    )


def denoiser_call_flops(
    denoiser: Denoiser,
    level: int,
    finest_size: int,
    batch: int = 1,
    cond_len: int | None = 16,
) -> float:
    """Analytic FLOPs of one ``predict_eps`` call at the given level."""
    ctx = _profile_context(denoiser, level, finest_size, batch, cond_len)
    was_training = denoiser.training
    denoiser.eval()
    try:
        return flops_of_call(denoiser, lambda: denoiser.predict_eps(ctx))
    finally:
        denoiser.train(was_training)


def denoiser_wall_time(
    denoiser: Denoiser,
    level: int,
    finest_size: int,
    batch: int = 1,
    cond_len: int | None = 16,
    calls: int = 50,
    warmup: int = 5,
) -> float:
    """Mean seconds per ``predict_eps`` call over ``calls`` warm invocations."""
    if calls < 1:
        raise ValueError("need at least one timed call")
    ctx = _profile_context(denoiser, level, finest_size, batch, cond_len)
    was_training = denoiser.training
    denoiser.eval()
    try:
        with torch.no_grad():
            for _ in range(warmup):
                denoiser.predict_eps(ctx)
            start = time.perf_counter()
            for _ in range(calls):
                denoiser.predict_eps(ctx)
            elapsed = time.perf_counter() - start
    finally:
        denoiser.train(was_training)
    return elapsed / calls


def sampling_flops(
    denoiser: Denoiser,
    T_infer: int,
    finest_size: int,
    batch: int = 1,
    cond_len: int | None = 16,
) -> float:
    """Total analytic FLOPs for a full coarse-to-fine sampling pass."""
    return sum(
        denoiser_call_flops(denoiser, n, finest_size, batch, cond_len) * T_infer
        for n in range(1, denoiser.levels + 1)
    )


def component_param_counts(
    denoiser: Denoiser | None = None,
    conditioner: nn.Module | None = None,
    codec: PyramidCodec | None = None,
) -> dict[str, int]:
    counts: dict[str, int] = {}
    if denoiser is not None:
        counts.update(denoiser.group_counts())
    if conditioner is not None:
        counts["conditioner"] = sum(p.numel() for p in conditioner.parameters())
    if codec is not None:
        counts["codec"] = sum(p.numel() for p in codec.parameters())
    return counts


def profile_run(config: RunConfig, calls: int = 50, batch: int = 1) -> MetricReport:
    """Build the configured models and profile the denoiser per level."""
    torch.manual_seed(config.seed)
    codec = PyramidCodec(config.codec)
    denoiser = Denoiser(
        config.denoiser,
        config.gate,
        levels=config.codec.N,
        latent_channels=config.codec.channels,
    )
    conditioner = ConditionEncoder(
        len(default_vocab()),
        max_len=config.conditioning.max_len,
        width=config.conditioning.width,
        layers=config.conditioning.layers,
        heads=config.conditioning.heads,
    )
    finest = config.codec.latent_size(1)
    cond_len = config.conditioning.max_len
    flops = {
        n: denoiser_call_flops(denoiser, n, finest, batch=batch, cond_len=cond_len)
        for n in range(1, codec.cfg.N + 1)
    }
    wall = {
        n: denoiser_wall_time(denoiser, n, finest, batch=batch, cond_len=cond_len, calls=calls)
        for n in range(1, codec.cfg.N + 1)
    }
    return MetricReport(
        wall_time_per_level=wall,
        flops_per_level=flops,
        param_counts=component_param_counts(denoiser, conditioner, codec),
    )
