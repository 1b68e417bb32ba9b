"""Analytic FLOP counting and the profiling report."""

import pytest
import torch
from torch import nn

from pyrdiff.config import (
    ConditioningSection,
    DataSection,
    RunConfig,
    ScheduleSection,
)
from pyrdiff.codec import CodecConfig
from pyrdiff.denoiser import Denoiser, GateConfig, TrunkConfig
from pyrdiff.profiling import (
    component_param_counts,
    denoiser_call_flops,
    denoiser_wall_time,
    flops_of_call,
    profile_run,
    sampling_flops,
)


def _mini_denoiser(levels=2, base=8):
    trunk = TrunkConfig(base_channels=base, channel_mults=(1, 2), attn_sizes=(4,), context_dim=32)
    gate = GateConfig(alpha=0.1, embed_width=32)
    torch.manual_seed(0)
    return Denoiser(trunk, gate, levels=levels, latent_channels=4)


def test_conv_flops_match_hand_count():
    conv = nn.Conv2d(3, 8, kernel_size=3, padding=1, bias=True)
    x = torch.zeros(1, 3, 10, 10)
    got = flops_of_call(conv, lambda: conv(x))
    # 8 output maps of 10x10, each position: 2 * (3*3*3) MACs + 1 bias add
    expected = 8 * 10 * 10 * (2 * 27 + 1)
    assert got == expected


def test_linear_flops_match_hand_count():
    lin = nn.Linear(12, 5, bias=False)
    x = torch.zeros(7, 12)
    got = flops_of_call(lin, lambda: lin(x))
    assert got == 7 * 5 * (2 * 12)


def test_coarse_level_cheaper():
    d = _mini_denoiser()
    f1 = denoiser_call_flops(d, 1, finest_size=16)
    f2 = denoiser_call_flops(d, 2, finest_size=16)
    assert f2 < f1


def test_halved_resolution_is_about_quarter_flops():
    d = _mini_denoiser()
    f1 = denoiser_call_flops(d, 1, finest_size=16, cond_len=None)
    f2 = denoiser_call_flops(d, 2, finest_size=16, cond_len=None)
    ratio = f1 / f2
    assert 4.0 / 1.3 <= ratio <= 4.0 * 1.3


def test_trunk_params_shared_across_level_counts():
    one = _mini_denoiser(levels=1)
    two = _mini_denoiser(levels=2)
    assert one.group_counts()["trunk"] == two.group_counts()["trunk"]


def test_sampling_flops_sum():
    d = _mini_denoiser()
    per_level = [denoiser_call_flops(d, n, 16) for n in (1, 2)]
    assert sampling_flops(d, T_infer=7, finest_size=16) == pytest.approx(7 * sum(per_level))


def test_wall_time_positive_and_coarse_faster():
    d = _mini_denoiser()
    t1 = denoiser_wall_time(d, 1, finest_size=16, calls=5, warmup=1)
    t2 = denoiser_wall_time(d, 2, finest_size=16, calls=5, warmup=1)
    assert t1 > 0 and t2 > 0
    assert t2 < t1 * 1.5


def test_param_counts_cover_components():
    d = _mini_denoiser()
    counts = component_param_counts(denoiser=d)
    assert set(counts) == {"trunk", "projections", "gate"}
    assert all(v > 0 for v in counts.values())
    total = sum(p.numel() for p in d.parameters())
    assert sum(counts.values()) == total


def test_profile_run_report():
    cfg = RunConfig(
        schedule=ScheduleSection(T=50, sample_steps=5),
        codec=CodecConfig(image_size=16, factors=(4, 2), codebook_sizes=(32, 32), hidden=8),
        denoiser=TrunkConfig(base_channels=8, channel_mults=(1, 2), attn_sizes=(4,), context_dim=32),
        gate=GateConfig(embed_width=32),
        conditioning=ConditioningSection(width=32, layers=1, heads=2),
        data=DataSection(dataset_size=8, val_size=4, image_size=16),
    )
    report = profile_run(cfg, calls=3)
    assert set(report.flops_per_level) == {1, 2}
    assert set(report.wall_time_per_level) == {1, 2}
    assert report.flops_per_level[2] < report.flops_per_level[1]
    assert report.param_counts["trunk"] > 0
    assert report.psnr is None and report.proxy_fd is None
