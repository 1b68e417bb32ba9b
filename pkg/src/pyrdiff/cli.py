"""Command-line front end.

Subcommands cover the full pipeline: ``train-ae`` and ``train-dm`` for
the two stages, ``sample`` for conditioned generation, ``eval`` for
reconstruction and distribution metrics, ``profile`` for FLOP and
wall-time reports, and ``trace`` for forward-corruption visualizations.
Every flag is mirrored by an environment variable with the ``PYRDIFF_``
prefix, e.g. ``PYRDIFF_SAMPLE_SEED=7 pyrdiff sample ...``.
"""

from __future__ import annotations

import json
import math
import os

import click
import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint
from .codec import PyramidCodec
from .config import RunConfig, config_from_dict, load_config
from .metrics import probe_accuracy, probe_labels, proxy_fd, psnr, ssim, train_probe
from .process import forward_corruption_trace
from .profiling import profile_run
from .scenes import (
    BOS_WORD,
    ObjectSpec,
    SceneSpec,
    null_sequence,
    pack_tokens,
    render_scene,
    spec_to_layout_tokens,
)
from .training import (
    MetricLog,
    dataset_tokens,
    generate_from_tokens,
    load_codec_checkpoint,
    load_diffusion_checkpoint,
    make_schedule,
    render_dataset,
    to_model_range,
    train_codec,
    train_diffusion,
)

ENV_PREFIX = "PYRDIFF"


def _load_run_config(path: str, **overrides) -> RunConfig:
    cfg = load_config(path)
    fields = {k: v for k, v in overrides.items() if v is not None}
    if not fields:
        return cfg
    from dataclasses import replace

    data_keys = {k: fields.pop(k) for k in ("dataset_size", "image_size", "max_objects") if k in fields}
    if data_keys:
        fields["data"] = replace(cfg.data, **data_keys)
    return replace(cfg, **fields)


def _image_to_array(img: torch.Tensor) -> np.ndarray:
    """[3,H,W] float in [0,1] to HWC uint8."""
    arr = img.clamp(0.0, 1.0).numpy()
    return (arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0)


def _save_png(img: torch.Tensor, path: str) -> None:
    Image.fromarray(_image_to_array(img)).save(path, format="PNG")


def _save_grid(images: torch.Tensor, path: str) -> None:
    """Tile [N,3,H,W] images into one PNG, row-major."""
    n, _, h, w = images.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * h : (r + 1) * h, c * w : (c + 1) * w] = _image_to_array(images[i])
    Image.fromarray(canvas).save(path, format="PNG")


@click.group()
def root() -> None:
    """Feature-pyramid diffusion tools."""


@root.command("train-ae")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", default=None, help="Output directory (defaults to the config's out_dir).")
@click.option("--max-steps", type=int, default=None, help="Override the configured step budget.")
@click.option("--dataset-size", type=int, default=None, help="Override the training-set size.")
def cmd_train_ae(config: str, out: str | None, max_steps: int | None, dataset_size: int | None) -> None:
    """Train the pyramid autoencoder (stage one)."""
    cfg = _load_run_config(config, max_steps=max_steps, dataset_size=dataset_size)
    path = train_codec(cfg, out_dir=out)
    click.echo(f"codec checkpoint written to {path}")


@root.command("train-dm")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--codec-ckpt", required=True, type=click.Path(), help="Stage-one checkpoint directory.")
@click.option("--out", default=None, help="Output directory (defaults to the config's out_dir).")
@click.option("--max-steps", type=int, default=None, help="Override the configured step budget.")
def cmd_train_dm(config: str, codec_ckpt: str, out: str | None, max_steps: int | None) -> None:
    """Train the latent denoiser (stage two) on a frozen codec."""
    if not os.path.isfile(os.path.join(codec_ckpt, "manifest.json")):
        raise click.ClickException(
            f"no codec checkpoint at {codec_ckpt}; run train-ae first"
        )
    cfg = _load_run_config(config, max_steps=max_steps)
    path = train_diffusion(cfg, codec_ckpt, out_dir=out)
    click.echo(f"best diffusion checkpoint at {path}")


def _layout_spec(path: str, image_seed: int = 0) -> SceneSpec:
    """A scene spec from a JSON layout file.

    The file holds ``{"background": int, "objects": [{"shape", "color",
    "bbox"}, ...]}`` with bboxes as [x0, y0, x1, y1] unit-square floats.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    objects = tuple(
        ObjectSpec(o["shape"], o["color"], tuple(float(v) for v in o["bbox"]))
        for o in doc["objects"]
    )
    return SceneSpec(objects=objects, background=int(doc.get("background", 0)), seed=image_seed)


@root.command("sample")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--n", default=4, show_default=True, help="Number of samples.")
@click.option("--steps", type=int, default=None, help="Inference steps (defaults to the config).")
@click.option("--guidance", default=2.0, show_default=True, help="Guidance scale s_g.")
@click.option("--seed", default=0, show_default=True)
@click.option("--cond", "caption", default=None, help='Caption words, e.g. "red circle left-of blue square".')
@click.option("--layout", type=click.Path(exists=True, dir_okay=False), default=None, help="JSON layout file.")
@click.option("--uncond", is_flag=True, help="Sample without conditioning.")
@click.option("--out", default="samples", show_default=True, type=click.Path(file_okay=False))
def cmd_sample(
    ckpt: str, n: int, steps: int | None, guidance: float, seed: int,
    caption: str | None, layout: str | None, uncond: bool, out: str,
) -> None:
    """Generate images from a diffusion checkpoint."""
    chosen = sum(x is not None for x in (caption, layout)) + int(uncond)
    if chosen > 1:
        raise click.UsageError("--cond, --layout and --uncond are mutually exclusive")
    bundle = load_diffusion_checkpoint(ckpt)
    max_len = bundle.config.conditioning.max_len
    if caption is not None:
        words = caption.split()
        if not words or words[0] != BOS_WORD:
            words = [BOS_WORD] + words
        seq = pack_tokens(words, max_len=max_len)
    elif layout is not None:
        seq = spec_to_layout_tokens(_layout_spec(layout), max_len=max_len)
    else:
        seq = null_sequence(max_len=max_len)
        guidance = 1.0
    ids = seq.tensor().unsqueeze(0).repeat(n, 1)
    mask = seq.mask().unsqueeze(0).repeat(n, 1)
    images = generate_from_tokens(bundle, ids, mask, s_g=guidance, sample_steps=steps, seed=seed)
    os.makedirs(out, exist_ok=True)
    for i in range(n):
        _save_png(images[i], os.path.join(out, f"sample_{i:03d}.png"))
    _save_grid(images, os.path.join(out, "grid.png"))
    click.echo(f"wrote {n} samples and grid.png to {out}")


@root.command("eval")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--n", default=64, show_default=True, help="Held-out/generated image count.")
@click.option("--steps", type=int, default=None, help="Inference steps (defaults to the config).")
@click.option("--guidance", default=2.0, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--probe-steps", default=400, show_default=True, help="Probe training steps.")
@click.option("--csv", type=click.Path(dir_okay=False), default=None, help="Append metrics to this CSV.")
def cmd_eval(
    ckpt: str, n: int, steps: int | None, guidance: float, seed: int,
    probe_steps: int, csv: str | None,
) -> None:
    """Reconstruction, distribution and faithfulness metrics."""
    bundle = load_diffusion_checkpoint(ckpt)
    data = bundle.config.data
    held_specs, held_images = render_dataset(data, start=data.dataset_size, count=n)
    with torch.no_grad():
        recon, _ = bundle.codec(to_model_range(held_images))
    recon = ((recon + 1.0) / 2.0).clamp(0.0, 1.0)
    results = {
        "recon/psnr": psnr(recon, held_images),
        "recon/ssim": ssim(recon, held_images),
    }

    generated = generate_from_tokens(
        bundle, *dataset_tokens(held_specs, bundle.config.conditioning),
        s_g=guidance, sample_steps=steps, seed=seed,
    )
    noise = torch.rand(held_images.shape, generator=torch.Generator().manual_seed(seed))
    results["fd/generated"] = proxy_fd(generated, held_images)
    results["fd/noise"] = proxy_fd(noise, held_images)

    train_specs, train_images = render_dataset(data, count=min(data.dataset_size, 512))
    colors, shapes = probe_labels(train_specs)
    probe = train_probe(train_images, colors, shapes, steps=probe_steps)
    held_colors, held_shapes = probe_labels(held_specs)
    real_acc = probe_accuracy(probe, held_images, held_colors, held_shapes)
    gen_acc = probe_accuracy(probe, generated, held_colors, held_shapes)
    results["probe/real_joint"] = real_acc["joint"]
    results["probe/generated_color"] = gen_acc["color"]
    results["probe/generated_shape"] = gen_acc["shape"]
    results["probe/generated_joint"] = gen_acc["joint"]

    for name, value in results.items():
        click.echo(f"{name} {value:.6g}")
    if csv is not None:
        log = MetricLog(csv)
        for name, value in results.items():
            log.log(bundle.step, name, float(value))


@root.command("profile")
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--calls", default=50, show_default=True, help="Timed denoiser calls per level.")
@click.option("--batch", default=1, show_default=True)
@click.option("--csv", type=click.Path(dir_okay=False), default=None, help="Append the report to this CSV.")
def cmd_profile(config: str, calls: int, batch: int, csv: str | None) -> None:
    """Per-level FLOP and wall-time report for a config."""
    cfg = load_config(config)
    report = profile_run(cfg, calls=calls, batch=batch)
    rows: list[tuple[str, float]] = []
    for level in sorted(report.flops_per_level):
        rows.append((f"flops/level_{level}", report.flops_per_level[level]))
        rows.append((f"wall_seconds/level_{level}", report.wall_time_per_level[level]))
    for name, count in report.param_counts.items():
        rows.append((f"params/{name}", float(count)))
    for name, value in rows:
        click.echo(f"{name} {value:.6g}")
    if csv is not None:
        log = MetricLog(csv)
        for name, value in rows:
            log.log(0, name, value)


@root.command("trace")
@click.option("--ckpt", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--index", default=0, show_default=True, help="Dataset index of the traced scene.")
@click.option("--frames", default=6, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", default="trace", show_default=True, type=click.Path(file_okay=False))
def cmd_trace(ckpt: str, index: int, frames: int, seed: int, out: str) -> None:
    """Decode snapshots of the coarse-to-fine forward corruption."""
    arc = load_checkpoint(ckpt)
    cfg = config_from_dict(arc.config)
    if any(name.startswith("codec.") for name in arc.tensors):
        bundle = load_diffusion_checkpoint(ckpt)
        codec, stats = bundle.codec, bundle.stats
    else:
        codec, stats, cfg = load_codec_checkpoint(ckpt)
    from .scenes import spec_at

    spec = spec_at(cfg.data.seed, index, cfg.data.max_objects)
    image = to_model_range(render_scene(spec, cfg.data.image_size)).unsqueeze(0)
    with torch.no_grad():
        pyramid = codec.quantize_pyramid(codec.encode_pyramid(image)).pyramid
    sched = make_schedule(cfg.schedule)
    g = torch.Generator().manual_seed(seed)
    decoded = forward_corruption_trace(pyramid, sched, frames, codec, stats, generator=g)
    os.makedirs(out, exist_ok=True)
    for i, frame in enumerate(decoded):
        _save_png(((frame[0] + 1.0) / 2.0).clamp(0.0, 1.0), os.path.join(out, f"frame_{i:02d}.png"))
    click.echo(f"wrote {len(decoded)} frames to {out}")


def cli(argv: list[str] | None = None) -> int:
    """Run the command line; returns the exit status instead of raising."""
    try:
        root.main(args=argv, standalone_mode=False, auto_envvar_prefix=ENV_PREFIX)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    return 0


def entry() -> None:
    raise SystemExit(cli())
