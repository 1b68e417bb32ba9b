"""Training objective, guidance, coarse-to-fine sampler, corruption trace."""

import numpy as np
import pytest
import torch

from helpers import ConstantDenoiser, GaussianOracleDenoiser, mini_denoiser
from pyrdiff.codec import CodecConfig, LatentPyramid, LatentStats, PyramidCodec
from pyrdiff.denoiser import DenoiserContext
from pyrdiff.process import (
    TrainBatchPlan,
    denoising_train_loss,
    forward_corruption_trace,
    generate_image,
    guided_eps,
    plan_train_batch,
    sample_pyramid,
)
from pyrdiff.schedule import Timeline, build_timeline, make_linear_schedule


def _pyramid(g, c=2, s=16, N=2, batch=None):
    shape = lambda size: (batch, c, size, size) if batch else (c, size, size)
    return LatentPyramid([torch.randn(shape(s >> i), generator=g) for i in range(N)])


def test_plan_train_batch_ranges_and_shapes():
    g = torch.Generator().manual_seed(0)
    sched = make_linear_schedule(40)
    seen_levels = set()
    for _ in range(60):
        p = _pyramid(g)
        plan = plan_train_batch(p, sched, generator=g)
        assert 1 <= plan.level <= 2
        assert 1 <= plan.timestep <= 40
        assert plan.noise.shape == p.level(plan.level).shape
        assert len(plan.coarser_levels) == 2 - plan.level
        seen_levels.add(plan.level)
    assert seen_levels == {1, 2}


def test_plan_validation():
    with pytest.raises(ValueError):
        TrainBatchPlan(level=0, timestep=1, noise=torch.zeros(1))


def test_train_loss_zero_for_perfect_denoiser():
    g = torch.Generator().manual_seed(1)
    sched = make_linear_schedule(40)
    p = _pyramid(g)
    plan = plan_train_batch(p, sched, generator=g)

    class Perfect:
        def predict_eps(self, ctx, generator=None):
            return plan.noise

    loss = denoising_train_loss(p, plan, Perfect(), sched)
    assert loss.item() == 0.0


def test_train_loss_ignores_finer_levels():
    g = torch.Generator().manual_seed(2)
    sched = make_linear_schedule(40)
    d = mini_denoiser().eval()
    base = _pyramid(g)
    plan = TrainBatchPlan(level=2, timestep=7, noise=torch.randn(base.level(2).shape, generator=g))
    loss_a = denoising_train_loss(base, plan, d, sched)
    altered = LatentPyramid([torch.randn_like(base.level(1)), base.level(2)])
    loss_b = denoising_train_loss(altered, plan, d, sched)
    assert loss_a.item() == loss_b.item()


def test_train_loss_untrained_near_one():
    # Zero-initialized output projections predict exactly 0, so the loss is
    # the mean square of unit Gaussian noise.
    g = torch.Generator().manual_seed(3)
    sched = make_linear_schedule(100)
    d = mini_denoiser(wake=False).eval()
    losses = []
    for _ in range(100):
        p = _pyramid(g)
        plan = plan_train_batch(p, sched, generator=g)
        losses.append(denoising_train_loss(p, plan, d, sched).item())
    assert np.mean(losses) == pytest.approx(1.0, abs=0.05)


def test_teacher_forced_coarser_detached():
    g = torch.Generator().manual_seed(4)
    sched = make_linear_schedule(40)
    d = mini_denoiser()
    d.train()
    z1 = torch.randn(2, 16, 16, generator=g)
    z2 = torch.randn(2, 8, 8, generator=g, requires_grad=True)
    p = LatentPyramid([z1, z2])
    plan = TrainBatchPlan(level=1, timestep=5, noise=torch.randn(2, 16, 16, generator=g),
                          coarser_levels=[z2])
    loss = denoising_train_loss(p, plan, d, sched, generator=torch.Generator().manual_seed(0))
    loss.backward()
    assert z2.grad is None  # condition path carries no gradient


def test_guidance_identities_bitwise():
    g = torch.Generator().manual_seed(5)
    d = mini_denoiser().eval()
    for _ in range(8):
        x = torch.randn(1, 2, 8, 8, generator=g)
        tokens = torch.randn(1, 4, 16, generator=g)
        ctx_c = DenoiserContext(2, 9, x, cond_embeddings=tokens)
        ctx_u = DenoiserContext(2, 9, x)
        with torch.no_grad():
            eps_c = d.predict_eps(ctx_c)
            eps_u = d.predict_eps(ctx_u)
            assert torch.equal(guided_eps(d, ctx_c, ctx_u, 1.0), eps_c)
            assert torch.equal(guided_eps(d, ctx_c, ctx_u, 0.0), eps_u)


def test_guidance_formula_general_scale():
    g = torch.Generator().manual_seed(6)
    d = mini_denoiser().eval()
    x = torch.randn(3, 2, 8, 8, generator=g)
    tokens = torch.randn(3, 4, 16, generator=g)
    ctx_c = DenoiserContext(2, 9, x, cond_embeddings=tokens)
    ctx_u = DenoiserContext(2, 9, x)
    with torch.no_grad():
        eps_c = d.predict_eps(ctx_c)
        eps_u = d.predict_eps(ctx_u)
        got = guided_eps(d, ctx_c, ctx_u, 2.0)
    want = eps_u + 2.0 * (eps_c - eps_u)
    assert torch.allclose(got, want, atol=1e-5)
    with pytest.raises(ValueError):
        guided_eps(d, ctx_c, ctx_u, -0.5)


def test_sampler_call_log_matches_timeline():
    sched = make_linear_schedule(20)
    for N in (1, 2, 3):
        d = mini_denoiser(levels=N).eval()
        tl = build_timeline(N, 5, sched)
        with torch.no_grad():
            p, state = sample_pyramid(d, tl, sched, finest_size=16, latent_channels=2,
                                      generator=torch.Generator().manual_seed(N))
        assert tuple(state.call_log) == tl.step_map
        assert p.N == N
        assert sorted(state.completed) == list(range(1, N + 1))
        assert p.level(1).shape == (1, 2, 16, 16)


def test_sampler_rejects_inconsistent_timeline():
    sched = make_linear_schedule(20)
    tl = build_timeline(2, 5, sched)
    bad = Timeline(N=2, T_infer=5, step_map=tuple(reversed(tl.step_map)))
    d = ConstantDenoiser(0.0)
    with pytest.raises(ValueError):
        sample_pyramid(d, bad, sched, finest_size=8, latent_channels=2)


def test_sampler_nan_guard():
    sched = make_linear_schedule(10)
    tl = build_timeline(1, 10, sched)
    d = ConstantDenoiser(float("nan"))
    with pytest.raises(RuntimeError, match="level 1"):
        sample_pyramid(d, tl, sched, finest_size=4, latent_channels=1,
                       generator=torch.Generator().manual_seed(0))


def test_gaussian_oracle_single_level():
    # With the exact noise predictor, full-chain sampling reproduces the
    # data distribution.  Small version; the full-scale run lives in the
    # acceptance suite.
    mu, sigma2 = 0.7, 0.25
    # Steeper betas so 400 steps already reach alpha_bar ~ 3e-5: the
    # N(0, I) initialization is only exact when the forward marginal at T
    # is essentially pure noise.  The fixed-variance reverse chain also
    # carries a small discretization deficit (exact recursion gives
    # var 0.2409 here), well inside the 10% tolerance.
    sched = make_linear_schedule(400, 2.5e-4, 5e-2)
    oracle = GaussianOracleDenoiser(sched, [mu], [sigma2])
    tl = build_timeline(1, 400, sched)
    p, _ = sample_pyramid(oracle, tl, sched, finest_size=4, latent_channels=1,
                          generator=torch.Generator().manual_seed(7), batch=2000)
    z = p.level(1).reshape(-1)
    assert z.mean().item() == pytest.approx(mu, abs=0.05)
    assert z.var().item() == pytest.approx(sigma2, rel=0.10)


def test_gaussian_oracle_two_level_factorization():
    # Independent per-level oracles: the coarse level's statistics must be
    # unaffected by the fine level's sampling, and vice versa.
    sched = make_linear_schedule(200, 5e-4, 0.1)
    oracle = GaussianOracleDenoiser(sched, [0.5, -1.0], [0.25, 1.0])
    tl = build_timeline(2, 200, sched)
    p, _ = sample_pyramid(oracle, tl, sched, finest_size=4, latent_channels=1,
                          generator=torch.Generator().manual_seed(8), batch=3000)
    fine = p.level(1).reshape(-1)
    coarse = p.level(2).reshape(-1)
    assert fine.mean().item() == pytest.approx(0.5, abs=0.05)
    assert fine.var().item() == pytest.approx(0.25, rel=0.12)
    assert coarse.mean().item() == pytest.approx(-1.0, abs=0.07)
    assert coarse.var().item() == pytest.approx(1.0, rel=0.12)


def test_sampler_determinism():
    sched = make_linear_schedule(20)
    d = mini_denoiser(levels=2).eval()
    tl = build_timeline(2, 5, sched)
    with torch.no_grad():
        a, _ = sample_pyramid(d, tl, sched, 16, 2, generator=torch.Generator().manual_seed(9))
        b, _ = sample_pyramid(d, tl, sched, 16, 2, generator=torch.Generator().manual_seed(9))
    for za, zb in zip(a.levels, b.levels):
        assert torch.equal(za, zb)


def _trained_like_codec(seed=10):
    torch.manual_seed(seed)
    cfg = CodecConfig(image_size=32, factors=(4, 2), channels=2,
                      codebook_sizes=(32, 32), hidden=8)
    return PyramidCodec(cfg, generator=torch.Generator().manual_seed(seed))


def test_generate_image_contract():
    codec = _trained_like_codec()
    d = mini_denoiser(levels=2).eval()
    sched = make_linear_schedule(10)
    tl = build_timeline(2, 4, sched)
    stats = LatentStats(means=(0.1, -0.2), stds=(0.9, 1.1))
    kw = dict(timeline=tl, sched=sched, generator=None)
    with torch.no_grad():
        img = generate_image(d, codec, stats, tl, sched, s_g=0.0,
                             generator=torch.Generator().manual_seed(11))
    assert img.shape == (3, 32, 32)
    assert img.min() >= -1 and img.max() <= 1
    # Fixed seed reproduces the image bitwise.
    with torch.no_grad():
        img2 = generate_image(d, codec, stats, tl, sched, s_g=0.0,
                              generator=torch.Generator().manual_seed(11))
    assert torch.equal(img, img2)
    # Conditional path with guidance and no re-quantization also runs.
    tokens = torch.randn(1, 4, 16, generator=torch.Generator().manual_seed(12))
    with torch.no_grad():
        img3 = generate_image(d, codec, stats, tl, sched, cond=tokens, s_g=2.0,
                              generator=torch.Generator().manual_seed(13), requantize=False)
    assert img3.shape == (3, 32, 32)


def test_generated_latents_snap_to_codebook():
    codec = _trained_like_codec()
    d = mini_denoiser(levels=2).eval()
    sched = make_linear_schedule(10)
    tl = build_timeline(2, 4, sched)
    stats = LatentStats(means=(0.0, 0.0), stds=(1.0, 1.0))
    from pyrdiff.process import sample_pyramid as sp
    from pyrdiff.quantizer import quantize
    with torch.no_grad():
        p, _ = sp(d, tl, sched, codec.cfg.latent_size(1), codec.cfg.channels,
                  generator=torch.Generator().manual_seed(14))
        snapped = [quantize(z, book).quantized for z, book in zip(p.levels, codec.codebooks)]
    for z, book in zip(snapped, codec.codebooks):
        flat = z.permute(0, 2, 3, 1).reshape(-1, codec.cfg.channels)
        rows = book.table.detach()
        d2 = (flat[:, None, :] - rows[None, :, :]).pow(2).sum(-1)
        assert d2.min(dim=1).values.max().item() == 0.0


def test_forward_corruption_trace_trend():
    g = torch.Generator().manual_seed(15)
    codec = _trained_like_codec()
    sched = make_linear_schedule(50)
    stats = LatentStats(means=(0.0, 0.0), stds=(1.0, 1.0))
    k = 6
    mse_per_frame = np.zeros(k)
    runs = 6
    for r in range(runs):
        img = torch.rand(3, 32, 32, generator=g) * 2 - 1
        with torch.no_grad():
            quant = codec.quantize_pyramid(codec.encode_pyramid(img))
        frames = forward_corruption_trace(quant.pyramid, sched, k, codec, stats, generator=g)
        clean = frames[0]
        with torch.no_grad():
            recon = codec.fuse_decode(quant.pyramid)
        assert torch.allclose(clean, recon, atol=1e-6)  # frame 0 is the clean decode
        for i, f in enumerate(frames):
            mse_per_frame[i] += (f - clean).pow(2).mean().item() / runs
    # Corruption accumulates: averaged distance from clean never shrinks
    # much between consecutive frames, and the last frame is far away.
    assert mse_per_frame[-1] > mse_per_frame[0]
    for a, b in zip(mse_per_frame, mse_per_frame[1:]):
        assert b >= a - 1e-3
    assert len(frames) == k


def test_trace_frame_counts():
    codec = _trained_like_codec()
    sched = make_linear_schedule(10)
    stats = LatentStats(means=(0.0, 0.0), stds=(1.0, 1.0))
    img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(16)) * 2 - 1
    with torch.no_grad():
        quant = codec.quantize_pyramid(codec.encode_pyramid(img))
    with pytest.raises(ValueError):
        forward_corruption_trace(quant.pyramid, sched, 0, codec, stats)
    one = forward_corruption_trace(quant.pyramid, sched, 1, codec, stats,
                                   generator=torch.Generator().manual_seed(17))
    assert len(one) == 1
