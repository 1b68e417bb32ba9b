"""Two visual checks on a trained archive, no CLI involved.

First: the forward corruption of a real scene's latent pyramid, decoded
frame by frame, so you can watch structure dissolve into noise.  Second:
the same caption sampled at several guidance scales, showing how s_g
trades diversity for prompt adherence.

    python3 demos/corruption_and_guidance.py --ckpt runs/dm_a01/final
"""

import argparse
from pathlib import Path

import torch

from pyrdiff.process import forward_corruption_trace
from pyrdiff.scenes import (
    default_vocab,
    render_scene,
    spec_at,
    spec_to_caption_tokens,
    stack_sequences,
)
from pyrdiff.training import (
    generate_from_tokens,
    load_diffusion_checkpoint,
    to_model_range,
    to_unit_range,
)

from train_tiny_pipeline import save_grid


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", required=True, help="diffusion archive directory")
    ap.add_argument("--index", type=int, default=0, help="scene to corrupt")
    ap.add_argument("--frames", type=int, default=8)
    ap.add_argument("--out", default="runs/demo_frames")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bundle = load_diffusion_checkpoint(args.ckpt)
    cfg = bundle.config

    spec = spec_at(cfg.data.seed, args.index, cfg.data.max_objects)
    image = render_scene(spec, cfg.data.image_size)
    with torch.no_grad():
        pyramid = bundle.codec.quantize_pyramid(
            bundle.codec.encode_pyramid(to_model_range(image.unsqueeze(0)))
        ).pyramid
    frames = forward_corruption_trace(
        pyramid, bundle.sched, args.frames, bundle.codec, bundle.stats,
        generator=torch.Generator().manual_seed(0),
    )
    save_grid(to_unit_range(torch.cat(frames)), out / "corruption.png", cols=args.frames)
    print(f"wrote {out / 'corruption.png'} (clean on the left, all-noise on the right)")

    seq = spec_to_caption_tokens(spec, max_len=cfg.conditioning.max_len)
    ids, mask = stack_sequences([seq])
    scales = (0.0, 1.0, 2.0, 4.0)
    panels = [
        generate_from_tokens(bundle, ids, mask, s_g=s, seed=1).squeeze(0)
        for s in scales
    ]
    save_grid(torch.stack([image] + panels), out / "guidance.png", cols=len(scales) + 1)
    print(f"wrote {out / 'guidance.png'} (real render, then s_g = "
          + ", ".join(str(s) for s in scales) + ")")
    caption = " ".join(default_vocab().detokenize(seq.ids[: seq.content_length]))
    print(f"caption: {caption}")


if __name__ == "__main__":
    main()
