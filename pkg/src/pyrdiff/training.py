"""Two-stage training: the pyramid codec first, then the denoiser.

Both trainers follow the same protocol: decoupled-weight-decay Adam
with betas (0.9, 0.999) and eps 1e-8, a fixed seed for every random
draw, an EMA shadow of the weights, append-only CSV metric logs, and
bit-exact checkpoint archives.  The diffusion stage freezes the codec,
caches the standardized latents of the whole dataset once, and selects
its best checkpoint by the lowest EMA-smoothed training loss.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

import torch
from torch import nn

from .checkpoint import Checkpoint, load_checkpoint, load_into_module, module_tensors, save_checkpoint
from .codec import (
    LatentPyramid,
    LatentStats,
    PatchDiscriminator,
    PyramidCodec,
    codec_loss,
    fit_latent_stats,
    hinge_d_loss,
    standardize,
)
from .config import ConditioningSection, DataSection, RunConfig, ScheduleSection, config_from_dict, config_to_dict
from .denoiser import Denoiser
from .metrics import psnr, ssim
from .process import denoising_train_loss, generate_image, plan_train_batch
from .scenes import (
    ConditionEncoder,
    SceneSpec,
    default_vocab,
    render_scene,
    spec_at,
    spec_to_caption_tokens,
    spec_to_layout_tokens,
    stack_sequences,
)
from .schedule import NoiseSchedule, build_timeline, make_linear_schedule

__all__ = [
    "EmaShadow",
    "MetricLog",
    "make_schedule",
    "render_dataset",
    "dataset_tokens",
    "to_model_range",
    "to_unit_range",
    "train_codec",
    "load_codec_checkpoint",
    "train_diffusion",
    "SamplerBundle",
    "load_diffusion_checkpoint",
    "generate_from_tokens",
    "generate_eval_images",
]

_LOG_EVERY = 50
_LOSS_SMOOTHING = 0.99


class EmaShadow:
    """Exponential moving average of a module's parameters.

    shadow <- decay * shadow + (1 - decay) * param, starting from the
    parameter values at construction.
    """

    def __init__(self, module: nn.Module, decay: float):
        if not 0.0 < decay < 1.0:
            raise ValueError(f"decay must be in (0, 1), got {decay}")
        self.decay = decay
        self.shadow = {
            name: p.detach().clone() for name, p in module.named_parameters()
        }

    def update(self, module: nn.Module) -> None:
        with torch.no_grad():
            for name, p in module.named_parameters():
                self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def full_state(self, module: nn.Module) -> dict[str, torch.Tensor]:
        """A loadable state dict: shadowed parameters plus live buffers."""
        state = {k: v.detach().clone() for k, v in module.state_dict().items()}
        for name, value in self.shadow.items():
            state[name] = value.clone()
        return state


class MetricLog:
    """Append-only CSV log with a (step, metric, value) header."""

    def __init__(self, path: str):
        self.path = path
        if not os.path.exists(path):
            with open(path, "w", encoding="utf-8") as fh:
                fh.write("step,metric,value\n")

    def log(self, step: int, metric: str, value: float) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{step},{metric},{value:.8g}\n")


def make_schedule(section: ScheduleSection) -> NoiseSchedule:
    return make_linear_schedule(section.T, section.beta_start, section.beta_end)


def to_model_range(images: torch.Tensor) -> torch.Tensor:
    """[0,1] renders to the [-1,1] domain the codec trains in."""
    return images * 2.0 - 1.0


def to_unit_range(images: torch.Tensor) -> torch.Tensor:
    return ((images + 1.0) / 2.0).clamp(0.0, 1.0)


def render_dataset(
    data: DataSection, start: int = 0, count: int | None = None
) -> tuple[list[SceneSpec], torch.Tensor]:
    """Specs and [0,1] renders for dataset indices [start, start+count).

    The validation convention puts held-out scenes at indices from
    ``dataset_size`` upward, so they never collide with training data.
    """
    count = data.dataset_size if count is None else count
    specs = [spec_at(data.seed, i, data.max_objects) for i in range(start, start + count)]
    images = torch.stack([render_scene(s, data.image_size) for s in specs])
    return specs, images


def dataset_tokens(
    specs: list[SceneSpec], conditioning: ConditioningSection
) -> tuple[torch.Tensor, torch.Tensor]:
    """Stacked (ids, mask) for the configured conditioning source."""
    if conditioning.source == "caption":
        seqs = [spec_to_caption_tokens(s, max_len=conditioning.max_len) for s in specs]
    else:
        seqs = [spec_to_layout_tokens(s, max_len=conditioning.max_len) for s in specs]
    return stack_sequences(seqs)


def _check_finite(value: torch.Tensor, step: int, parts: dict[str, float]) -> None:
    if not bool(torch.isfinite(value)):
        detail = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
        raise RuntimeError(f"non-finite loss at step {step} ({detail}); aborting run")


def _stats_tensors(stats: LatentStats) -> dict[str, torch.Tensor]:
    return {
        "latent_stats.means": torch.tensor(stats.means, dtype=torch.float32),
        "latent_stats.stds": torch.tensor(stats.stds, dtype=torch.float32),
    }


def _stats_from_tensors(tensors: dict[str, torch.Tensor]) -> LatentStats:
    if "latent_stats.means" not in tensors or "latent_stats.stds" not in tensors:
        raise ValueError("checkpoint carries no latent statistics; run the codec stage first")
    return LatentStats(
        means=tuple(float(v) for v in tensors["latent_stats.means"]),
        stds=tuple(float(v) for v in tensors["latent_stats.stds"]),
    )


def train_codec(config: RunConfig, out_dir: str | None = None) -> str:
    """Stage one: fit the autoencoder; returns the final archive path."""
    out = out_dir if out_dir is not None else config.out_dir
    os.makedirs(out, exist_ok=True)
    torch.manual_seed(config.seed)
    specs, images = render_dataset(config.data)
    _, val_images = render_dataset(config.data, start=config.data.dataset_size, count=config.data.val_size)
    x_train = to_model_range(images)
    x_val = to_model_range(val_images)

    codec = PyramidCodec(config.codec)
    disc = PatchDiscriminator(config.codec.hidden) if config.codec.use_discriminator else None
    opt = torch.optim.AdamW(
        codec.parameters(),
        lr=config.optimizer.effective_lr(config.batch_size),
        betas=config.optimizer.betas,
        eps=config.optimizer.eps,
        weight_decay=config.optimizer.weight_decay,
    )
    d_opt = None
    if disc is not None:
        d_opt = torch.optim.AdamW(
            disc.parameters(),
            lr=config.optimizer.effective_lr(config.batch_size),
            betas=config.optimizer.betas,
            eps=config.optimizer.eps,
            weight_decay=config.optimizer.weight_decay,
        )
    ema = EmaShadow(codec, config.ema_decay)
    g = torch.Generator().manual_seed(config.seed)
    log = MetricLog(os.path.join(out, "metrics.csv"))
    snapshot = config_to_dict(config)
    history: list[dict] = []
    smoothed = None

    n = x_train.shape[0]
    for step in range(1, config.max_steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=g)
        batch = x_train[idx]
        recon, quant = codec(batch)
        use_disc = disc is not None and step >= config.codec.disc_start_step
        logits = disc(recon) if use_disc else None
        breakdown = codec_loss(batch, recon, quant, config.codec, logits)
        parts = {
            "recon": float(breakdown.recon.detach()),
            "vq": float(breakdown.vq.detach()),
            "adv": float(breakdown.adversarial.detach()) if breakdown.adversarial is not None else 0.0,
        }
        _check_finite(breakdown.total, step, parts)
        opt.zero_grad(set_to_none=True)
        breakdown.total.backward()
        opt.step()
        ema.update(codec)
        if use_disc:
            d_loss = hinge_d_loss(disc(batch), disc(recon.detach()))
            _check_finite(d_loss, step, {"disc": float(d_loss.detach())})
            d_opt.zero_grad(set_to_none=True)
            d_loss.backward()
            d_opt.step()

        total = float(breakdown.total.detach())
        smoothed = total if smoothed is None else _LOSS_SMOOTHING * smoothed + (1 - _LOSS_SMOOTHING) * total
        if step == 1 or step % _LOG_EVERY == 0:
            log.log(step, "loss/total", total)
            log.log(step, "loss/recon", parts["recon"])
            log.log(step, "loss/vq", parts["vq"])
            log.log(step, "loss/smoothed", smoothed)

        if step % config.checkpoint_every == 0 or step == config.max_steps:
            with torch.no_grad():
                val_recon, _ = codec(x_val)
            val_psnr = psnr(to_unit_range(val_recon), to_unit_range(x_val))
            val_ssim = ssim(to_unit_range(val_recon), to_unit_range(x_val))
            log.log(step, "val/psnr", val_psnr)
            log.log(step, "val/ssim", val_ssim)
            history.append({"step": step, "metric": "val/psnr", "value": val_psnr})
            history.append({"step": step, "metric": "val/ssim", "value": val_ssim})
            if step != config.max_steps:
                tensors = module_tensors(codec, "model.")
                tensors.update(("ema." + k, v) for k, v in ema.full_state(codec).items())
                save_checkpoint(os.path.join(out, f"step_{step:06d}"), tensors, snapshot, step, history)

    stats = fit_latent_stats(
        x_train, codec, batch_size=config.batch_size, min_samples=min(256, n)
    )
    tensors = module_tensors(codec, "model.")
    tensors.update(("ema." + k, v) for k, v in ema.full_state(codec).items())
    tensors.update(_stats_tensors(stats))
    final = save_checkpoint(os.path.join(out, "final"), tensors, snapshot, config.max_steps, history)
    return final


def load_codec_checkpoint(path: str) -> tuple[PyramidCodec, LatentStats, RunConfig]:
    """Rebuild a frozen codec plus its latent statistics from an archive."""
    ckpt = load_checkpoint(path)
    cfg = config_from_dict(ckpt.config)
    codec = PyramidCodec(cfg.codec)
    load_into_module(codec, ckpt.tensors, "model.")
    stats = _stats_from_tensors(ckpt.tensors)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, stats, cfg


def _encode_dataset(
    codec: PyramidCodec, images: torch.Tensor, stats: LatentStats, batch: int
) -> list[torch.Tensor]:
    """Standardized quantized latents for every image, one tensor per level."""
    per_level: list[list[torch.Tensor]] = [[] for _ in range(codec.cfg.N)]
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            pre = codec.encode_pyramid(images[i : i + batch])
            quant = codec.quantize_pyramid(pre)
            std = standardize(quant.pyramid, stats)
            for lvl, z in enumerate(std.levels):
                per_level[lvl].append(z)
    return [torch.cat(chunks) for chunks in per_level]


def _diffusion_models(config: RunConfig, levels: int, channels: int) -> tuple[Denoiser, ConditionEncoder]:
    denoiser = Denoiser(config.denoiser, config.gate, levels=levels, latent_channels=channels)
    conditioner = ConditionEncoder(
        len(default_vocab()),
        max_len=config.conditioning.max_len,
        width=config.conditioning.width,
        layers=config.conditioning.layers,
        heads=config.conditioning.heads,
    )
    return denoiser, conditioner


def train_diffusion(config: RunConfig, codec_ckpt: str, out_dir: str | None = None) -> str:
    """Stage two: fit the denoiser on frozen-codec latents.

    Returns the path of the best checkpoint (lowest EMA-smoothed
    training loss at a checkpoint boundary).
    """
    out = out_dir if out_dir is not None else config.out_dir
    os.makedirs(out, exist_ok=True)
    codec, stats, codec_run = load_codec_checkpoint(codec_ckpt)
    if codec_run.codec != config.codec:
        raise ValueError("codec section of the run config differs from the codec checkpoint")

    torch.manual_seed(config.seed)
    specs, images = render_dataset(config.data)
    val_specs, val_images = render_dataset(
        config.data, start=config.data.dataset_size, count=config.data.val_size
    )
    levels_cache = _encode_dataset(codec, to_model_range(images), stats, config.batch_size)
    val_cache = _encode_dataset(codec, to_model_range(val_images), stats, config.batch_size)
    ids, mask = dataset_tokens(specs, config.conditioning)
    val_ids, val_mask = dataset_tokens(val_specs, config.conditioning)

    sched = make_schedule(config.schedule)
    denoiser, conditioner = _diffusion_models(config, codec.cfg.N, codec.cfg.channels)
    opt = torch.optim.AdamW(
        itertools.chain(denoiser.parameters(), conditioner.parameters()),
        lr=config.optimizer.effective_lr(config.batch_size),
        betas=config.optimizer.betas,
        eps=config.optimizer.eps,
        weight_decay=config.optimizer.weight_decay,
    )
    ema_d = EmaShadow(denoiser, config.ema_decay)
    ema_c = EmaShadow(conditioner, config.ema_decay)
    g = torch.Generator().manual_seed(config.seed)
    log = MetricLog(os.path.join(out, "metrics.csv"))
    snapshot = config_to_dict(config)
    history: list[dict] = []
    smoothed = None
    best = float("inf")
    best_dir = os.path.join(out, "best")
    codec_tensors = module_tensors(codec, "codec.")
    codec_tensors.update(_stats_tensors(stats))

    def _save(dirpath: str, step: int) -> str:
        tensors = module_tensors(denoiser, "denoiser.")
        tensors.update(module_tensors(conditioner, "conditioner."))
        tensors.update(("ema.denoiser." + k, v) for k, v in ema_d.full_state(denoiser).items())
        tensors.update(("ema.conditioner." + k, v) for k, v in ema_c.full_state(conditioner).items())
        tensors.update(codec_tensors)
        return save_checkpoint(dirpath, tensors, snapshot, step, history)

    def _val_loss() -> float:
        gv = torch.Generator().manual_seed(config.seed + 1)
        losses = []
        with torch.no_grad():
            cond_all = conditioner(val_ids, val_mask)
            pyramid = LatentPyramid(val_cache)
            for _ in range(8):
                plan = plan_train_batch(pyramid, sched, gv)
                losses.append(
                    float(
                        denoising_train_loss(
                            pyramid, plan, denoiser, sched, cond_all, val_mask, generator=gv
                        )
                    )
                )
        return sum(losses) / len(losses)

    n = levels_cache[0].shape[0]
    for step in range(1, config.max_steps + 1):
        idx = torch.randint(0, n, (config.batch_size,), generator=g)
        pyramid = LatentPyramid([lvl[idx] for lvl in levels_cache])
        plan = plan_train_batch(pyramid, sched, g)
        cond = conditioner(ids[idx], mask[idx])
        drop = torch.rand(config.batch_size, generator=g) < config.cond_dropout
        loss = denoising_train_loss(
            pyramid, plan, denoiser, sched, cond, mask[idx], cond_dropout=drop, generator=g
        )
        _check_finite(loss, step, {"loss": float(loss.detach()), "level": plan.level, "t": plan.timestep})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema_d.update(denoiser)
        ema_c.update(conditioner)

        total = float(loss.detach())
        smoothed = total if smoothed is None else _LOSS_SMOOTHING * smoothed + (1 - _LOSS_SMOOTHING) * total
        if step == 1 or step % _LOG_EVERY == 0:
            log.log(step, "loss/train", total)
            log.log(step, "loss/smoothed", smoothed)

        if step % config.checkpoint_every == 0 or step == config.max_steps:
            vl = _val_loss()
            log.log(step, "loss/val", vl)
            history.append({"step": step, "metric": "loss/val", "value": vl})
            history.append({"step": step, "metric": "loss/smoothed", "value": smoothed})
            if smoothed < best:
                best = smoothed
                _save(best_dir, step)
                log.log(step, "checkpoint/best", smoothed)
            if step == config.max_steps:
                _save(os.path.join(out, "final"), step)

    return best_dir


@dataclass
class SamplerBundle:
    """Everything sampling and evaluation need from one archive."""

    denoiser: Denoiser
    conditioner: ConditionEncoder
    codec: PyramidCodec
    stats: LatentStats
    config: RunConfig
    sched: NoiseSchedule
    step: int


def load_diffusion_checkpoint(path: str, use_ema: bool = True) -> SamplerBundle:
    """Rebuild the full sampling stack from a diffusion archive.

    ``use_ema`` loads the shadow weights (the evaluation convention);
    the raw weights remain available with ``use_ema=False``.
    """
    ckpt = load_checkpoint(path)
    cfg = config_from_dict(ckpt.config)
    codec = PyramidCodec(cfg.codec)
    load_into_module(codec, ckpt.tensors, "codec.")
    stats = _stats_from_tensors(ckpt.tensors)
    denoiser, conditioner = _diffusion_models(cfg, codec.cfg.N, codec.cfg.channels)
    prefix = "ema." if use_ema else ""
    load_into_module(denoiser, ckpt.tensors, prefix + "denoiser.")
    load_into_module(conditioner, ckpt.tensors, prefix + "conditioner.")
    for module in (codec, denoiser, conditioner):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    sched = make_schedule(cfg.schedule)
    return SamplerBundle(
        denoiser=denoiser, conditioner=conditioner, codec=codec,
        stats=stats, config=cfg, sched=sched, step=ckpt.step,
    )


def generate_from_tokens(
    bundle: SamplerBundle,
    ids: torch.Tensor,
    mask: torch.Tensor,
    s_g: float = 2.0,
    sample_steps: int | None = None,
    seed: int = 0,
    batch: int = 16,
    requantize: bool = True,
) -> torch.Tensor:
    """Samples conditioned on [N,L] token ids, as [N,3,H,W] images in [0,1]."""
    steps = sample_steps if sample_steps is not None else bundle.config.schedule.sample_steps
    timeline = build_timeline(bundle.codec.cfg.N, steps, bundle.sched)
    g = torch.Generator().manual_seed(seed)
    chunks = []
    for i in range(0, ids.shape[0], batch):
        with torch.no_grad():
            cond = bundle.conditioner(ids[i : i + batch], mask[i : i + batch])
        img = generate_image(
            bundle.denoiser,
            bundle.codec,
            bundle.stats,
            timeline,
            bundle.sched,
            cond=cond,
            cond_mask=mask[i : i + batch],
            s_g=s_g,
            generator=g,
            batch=cond.shape[0],
            requantize=requantize,
            variance=bundle.config.schedule.variance,
        )
        if img.dim() == 3:
            img = img.unsqueeze(0)
        chunks.append(to_unit_range(img))
    return torch.cat(chunks)


def generate_eval_images(
    bundle: SamplerBundle,
    specs: list[SceneSpec],
    s_g: float = 2.0,
    sample_steps: int | None = None,
    seed: int = 0,
    batch: int = 16,
    requantize: bool = True,
) -> torch.Tensor:
    """Conditioned samples for each spec, as [N,3,H,W] images in [0,1]."""
    ids, mask = dataset_tokens(specs, bundle.config.conditioning)
    return generate_from_tokens(
        bundle, ids, mask, s_g=s_g, sample_steps=sample_steps,
        seed=seed, batch=batch, requantize=requantize,
    )
