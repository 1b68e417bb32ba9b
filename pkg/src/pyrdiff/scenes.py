"""Procedural scene dataset and token-sequence conditioning.

A scene is a handful of colored geometric shapes placed over a vertical
two-color gradient.  Every scene is fully described by a compact spec
that can be (a) rendered to an anti-aliased image, (b) serialized to a
caption-like token sequence ("red circle above blue square"), or (c)
serialized to discretized layout tuples, one (top-left bin, bottom-right
bin, category) triple per object.  Scenes are pure functions of a seed,
so a manifest only has to store spec fields and images are regenerated
on demand.

A small self-attention encoder maps token sequences to the per-token
context vectors consumed by the denoiser's cross-attention.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

__all__ = [
    "PALETTE",
    "SHAPES",
    "RELATIONS",
    "GRADIENTS",
    "PAD_WORD",
    "BOS_WORD",
    "NULL_WORD",
    "PAD_ID",
    "BOS_ID",
    "NULL_ID",
    "MAX_TOKENS",
    "LAYOUT_BINS",
    "LEAD_SIZE_MARGIN",
    "Vocabulary",
    "default_vocab",
    "TokenSequence",
    "pack_tokens",
    "null_sequence",
    "stack_sequences",
    "ObjectSpec",
    "SceneSpec",
    "relation",
    "largest_object",
    "color_index",
    "shape_index",
    "render_scene",
    "generate_scene",
    "spec_at",
    "scene_at",
    "build_dataset",
    "write_manifest",
    "read_manifest",
    "spec_to_caption_tokens",
    "spec_to_layout_tokens",
    "boxes_from_layout_tokens",
    "ConditionEncoder",
    "encode_condition",
]

# Eight saturated fill colors.  Interiors of anti-aliased shapes keep the
# exact palette value, so a render can be inspected for color presence.
PALETTE: tuple[tuple[str, tuple[float, float, float]], ...] = (
    ("red", (0.90, 0.10, 0.10)),
    ("green", (0.10, 0.75, 0.20)),
    ("blue", (0.15, 0.25, 0.90)),
    ("yellow", (0.95, 0.85, 0.10)),
    ("cyan", (0.10, 0.80, 0.85)),
    ("magenta", (0.85, 0.15, 0.80)),
    ("orange", (0.95, 0.55, 0.10)),
    ("purple", (0.55, 0.20, 0.80)),
)

SHAPES: tuple[str, ...] = ("circle", "square", "triangle")

RELATIONS: tuple[str, ...] = ("above", "below", "left-of", "right-of")

# Desaturated (top, bottom) gradient pairs so backgrounds never collide
# with the saturated object palette.
GRADIENTS: tuple[tuple[tuple[float, float, float], tuple[float, float, float]], ...] = (
    ((0.08, 0.08, 0.10), (0.38, 0.38, 0.44)),
    ((0.86, 0.87, 0.90), (0.52, 0.55, 0.60)),
    ((0.18, 0.24, 0.21), (0.46, 0.54, 0.50)),
    ((0.32, 0.24, 0.30), (0.62, 0.52, 0.60)),
)

PAD_WORD = "<pad>"
BOS_WORD = "<bos>"
NULL_WORD = "<null>"

PAD_ID = 0
BOS_ID = 1
NULL_ID = 2

MAX_TOKENS = 16
LAYOUT_BINS = 8

_SUPERSAMPLE = 4
_PALETTE_RGB = {name: np.asarray(rgb, dtype=np.float64) for name, rgb in PALETTE}
_COLOR_NAMES = tuple(name for name, _ in PALETTE)


class Vocabulary:
    """Closed, enumerable token vocabulary shared by captions and layouts.

    Word order is fixed: specials, colors, shapes, relations, the
    color-shape category words, then one word per layout grid cell
    (``bin-0`` .. ``bin-{bins*bins-1}``, row-major from the top-left).
    """

    def __init__(self, bins: int = LAYOUT_BINS) -> None:
        if bins < 2:
            raise ValueError(f"need at least 2 layout bins per axis, got {bins}")
        self.bins = bins
        words = [PAD_WORD, BOS_WORD, NULL_WORD]
        words.extend(_COLOR_NAMES)
        words.extend(SHAPES)
        words.extend(RELATIONS)
        words.extend(f"{color}-{shape}" for color in _COLOR_NAMES for shape in SHAPES)
        words.extend(f"bin-{i}" for i in range(bins * bins))
        self.words: tuple[str, ...] = tuple(words)
        self._ids = {word: i for i, word in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        try:
            return self._ids[word]
        except KeyError:
            raise ValueError(f"word {word!r} is not in the vocabulary") from None

    def word_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.words):
            raise ValueError(f"token id {idx} outside vocabulary of size {len(self.words)}")
        return self.words[idx]

    def tokenize(self, words: Sequence[str]) -> list[int]:
        return [self.id_of(w) for w in words]

    def detokenize(self, ids: Sequence[int]) -> list[str]:
        return [self.word_of(i) for i in ids]


@functools.lru_cache(maxsize=None)
def default_vocab() -> Vocabulary:
    return Vocabulary(bins=LAYOUT_BINS)


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length padded token ids with their content length."""

    ids: tuple[int, ...]
    content_length: int
    vocab_size: int

    def __post_init__(self) -> None:
        if not 0 < self.content_length <= len(self.ids):
            raise ValueError(
                f"content length {self.content_length} outside 1..{len(self.ids)}"
            )
        for i in self.ids:
            if not 0 <= i < self.vocab_size:
                raise ValueError(f"token id {i} outside vocabulary of size {self.vocab_size}")
        if any(i != PAD_ID for i in self.ids[self.content_length :]):
            raise ValueError("positions beyond the content length must hold the pad token")

    @property
    def max_len(self) -> int:
        return len(self.ids)

    def tensor(self) -> torch.Tensor:
        return torch.tensor(self.ids, dtype=torch.long)

    def mask(self) -> torch.Tensor:
        """Boolean content mask, True at non-pad positions."""
        return torch.arange(len(self.ids)) < self.content_length


def pack_tokens(
    words: Sequence[str], vocab: Vocabulary | None = None, max_len: int = MAX_TOKENS
) -> TokenSequence:
    """Tokenize ``words`` and pad the ids out to ``max_len``."""
    vocab = vocab if vocab is not None else default_vocab()
    ids = vocab.tokenize(words)
    if len(ids) > max_len:
        raise ValueError(f"{len(ids)} tokens exceed the maximum length {max_len}")
    padded = tuple(ids) + (PAD_ID,) * (max_len - len(ids))
    return TokenSequence(padded, len(ids), len(vocab))


def null_sequence(vocab: Vocabulary | None = None, max_len: int = MAX_TOKENS) -> TokenSequence:
    """The all-null sequence whose encoding is the unconditional context."""
    return pack_tokens([NULL_WORD], vocab, max_len)


def stack_sequences(seqs: Sequence[TokenSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack sequences into (ids [B, L], content mask [B, L]) tensors."""
    if not seqs:
        raise ValueError("need at least one sequence to stack")
    lengths = {s.max_len for s in seqs}
    if len(lengths) != 1:
        raise ValueError(f"sequences have mixed lengths {sorted(lengths)}")
    ids = torch.stack([s.tensor() for s in seqs])
    mask = torch.stack([s.mask() for s in seqs])
    return ids, mask


@dataclass(frozen=True)
class ObjectSpec:
    """One shape: what it is, its fill color, and its normalized bbox."""

    shape: str
    color: str
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in _PALETTE_RGB:
            raise ValueError(f"unknown color {self.color!r}")
        x0, y0, x1, y1 = self.bbox
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"bbox {self.bbox} must satisfy 0 <= min < max <= 1 per axis")


@dataclass(frozen=True)
class SceneSpec:
    """Complete description of one scene; rendering is pure given a spec."""

    objects: tuple[ObjectSpec, ...]
    background: int
    seed: int

    def __post_init__(self) -> None:
        if not 1 <= len(self.objects) <= 4:
            raise ValueError(f"scenes hold 1..4 objects, got {len(self.objects)}")
        if not 0 <= self.background < len(GRADIENTS):
            raise ValueError(f"background id {self.background} outside 0..{len(GRADIENTS) - 1}")


def _area(bbox: tuple[float, float, float, float]) -> float:
    x0, y0, x1, y1 = bbox
    return (x1 - x0) * (y1 - y0)


def _center(bbox: tuple[float, float, float, float]) -> tuple[float, float]:
    x0, y0, x1, y1 = bbox
    return (x0 + x1) / 2.0, (y0 + y1) / 2.0


def _ordered(objects: Sequence[ObjectSpec]) -> list[ObjectSpec]:
    """Canonical serialization order: descending area, stable."""
    return sorted(objects, key=lambda o: -_area(o.bbox))


def relation(a: tuple[float, float], b: tuple[float, float]) -> str:
    """Relation word describing center ``a`` relative to center ``b``.

    The dominant axis wins; an exact tie counts as vertical.  Image y
    grows downward, so smaller y means "above".
    """
    dx = a[0] - b[0]
    dy = a[1] - b[1]
    if abs(dy) >= abs(dx):
        return "above" if dy < 0 else "below"
    return "left-of" if dx < 0 else "right-of"


def largest_object(spec: SceneSpec) -> ObjectSpec:
    return _ordered(spec.objects)[0]


def color_index(color: str) -> int:
    try:
        return _COLOR_NAMES.index(color)
    except ValueError:
        raise ValueError(f"unknown color {color!r}") from None


def shape_index(shape: str) -> int:
    try:
        return SHAPES.index(shape)
    except ValueError:
        raise ValueError(f"unknown shape {shape!r}") from None


def _shape_mask(obj: ObjectSpec, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    x0, y0, x1, y1 = obj.bbox
    if obj.shape == "square":
        return (gx >= x0) & (gx < x1) & (gy >= y0) & (gy < y1)
    if obj.shape == "circle":
        cx, cy = _center(obj.bbox)
        rx, ry = (x1 - x0) / 2.0, (y1 - y0) / 2.0
        return ((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2 <= 1.0
    # Upward-pointing triangle: apex at the top edge midpoint, base on
    # the bottom edge.  Inside test via consistent half-plane signs.
    ax, ay = (x0 + x1) / 2.0, y0
    d1 = (x0 - ax) * (gy - ay) - (y1 - ay) * (gx - ax)
    d2 = (x1 - x0) * (gy - y1)
    d3 = (ax - x1) * (gy - y1) - (ay - y1) * (gx - x1)
    neg = (d1 <= 0) & (d2 <= 0) & (d3 <= 0)
    pos = (d1 >= 0) & (d2 >= 0) & (d3 >= 0)
    return neg | pos


def render_scene(spec: SceneSpec, image_size: int = 64) -> torch.Tensor:
    """Render a spec to a float32 image tensor [3, S, S] with values in [0, 1].

    Shapes are drawn at ``_SUPERSAMPLE`` times the target resolution and
    box-averaged down, which anti-aliases edges while leaving interior
    pixels at the exact palette color.
    """
    s = image_size * _SUPERSAMPLE
    coords = (np.arange(s, dtype=np.float64) + 0.5) / s
    gx = coords[None, :]
    gy = coords[:, None]
    top, bottom = (np.asarray(c, dtype=np.float64) for c in GRADIENTS[spec.background])
    img = (1.0 - coords)[:, None, None] * top + coords[:, None, None] * bottom
    img = np.broadcast_to(img, (s, s, 3)).copy()
    for obj in spec.objects:
        img[_shape_mask(obj, gx, gy)] = _PALETTE_RGB[obj.color]
    img = img.reshape(image_size, _SUPERSAMPLE, image_size, _SUPERSAMPLE, 3).mean(axis=(1, 3))
    return torch.from_numpy(img.astype(np.float32)).permute(2, 0, 1).contiguous()


def _boxes_disjoint(
    a: tuple[float, float, float, float], b: tuple[float, float, float, float], gap: float
) -> bool:
    return a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1]


LEAD_SIZE_MARGIN = 0.10
"""Minimum side-length gap between the largest object and any other.

The gap keeps "the largest object" readable from pixels (>= 6px at
64px), which the faithfulness probe and the caption ordering rely on.
The first object is placed on an empty canvas so it never shrinks;
crowding only ever shrinks the others, widening the gap.
"""


def _sample_spec(seed: int, max_objects: int) -> SceneSpec:
    if not 1 <= max_objects <= 4:
        raise ValueError(f"max_objects must be in 1..4, got {max_objects}")
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, max_objects + 1))
    lead = float(rng.uniform(0.34, 0.48))
    placed: list[tuple[float, float, float, float]] = []
    objects: list[ObjectSpec] = []
    for i in range(count):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        color = _COLOR_NAMES[int(rng.integers(len(_COLOR_NAMES)))]
        side = lead if i == 0 else float(rng.uniform(0.18, lead - LEAD_SIZE_MARGIN))
        attempts = 0
        while True:
            x0 = float(rng.uniform(0.0, 1.0 - side))
            y0 = float(rng.uniform(0.0, 1.0 - side))
            box = (x0, y0, x0 + side, y0 + side)
            if all(_boxes_disjoint(box, other, gap=0.01) for other in placed):
                break
            attempts += 1
            if attempts % 40 == 0:
                # Crowded scene: shrink until a slot opens up.
                side = max(side * 0.8, 0.08)
        placed.append(box)
        objects.append(ObjectSpec(shape=shape, color=color, bbox=box))
    objects = _ordered(objects)
    background = int(rng.integers(len(GRADIENTS)))
    return SceneSpec(objects=tuple(objects), background=background, seed=seed)


def generate_scene(
    rng: np.random.Generator | int, image_size: int = 64, max_objects: int = 4
) -> tuple[SceneSpec, torch.Tensor]:
    """Sample a scene and render it.

    ``rng`` may be a generator (a fresh per-scene seed is drawn from it
    and recorded on the spec) or an integer used as the scene seed
    directly, so ``generate_scene(spec.seed)`` reproduces a scene.
    Object boxes are pairwise disjoint by construction.
    """
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
    else:
        seed = int(rng.integers(0, 2**31 - 1))
    spec = _sample_spec(seed, max_objects)
    return spec, render_scene(spec, image_size)


def spec_at(dataset_seed: int, index: int, max_objects: int = 4) -> SceneSpec:
    """Deterministic spec for position ``index`` of dataset ``dataset_seed``."""
    ss = np.random.SeedSequence(dataset_seed, spawn_key=(index,))
    return _sample_spec(int(ss.generate_state(1)[0]), max_objects)


def scene_at(
    dataset_seed: int, index: int, image_size: int = 64, max_objects: int = 4
) -> tuple[SceneSpec, torch.Tensor]:
    spec = spec_at(dataset_seed, index, max_objects)
    return spec, render_scene(spec, image_size)


def build_dataset(dataset_seed: int, size: int, max_objects: int = 4) -> list[SceneSpec]:
    """Generate ``size`` specs; images are rendered on demand elsewhere."""
    if size < 1:
        raise ValueError(f"dataset size must be positive, got {size}")
    return [spec_at(dataset_seed, i, max_objects) for i in range(size)]


def write_manifest(path: str, specs: Iterable[SceneSpec]) -> None:
    """Write one JSON record per scene: index, seed, and all spec fields."""
    with open(path, "w", encoding="utf-8") as fh:
        for index, spec in enumerate(specs):
            record = {
                "index": index,
                "seed": spec.seed,
                "background": spec.background,
                "objects": [
                    {"shape": o.shape, "color": o.color, "bbox": list(o.bbox)}
                    for o in spec.objects
                ],
            }
            fh.write(json.dumps(record) + "\n")


def read_manifest(path: str) -> list[SceneSpec]:
    entries: list[tuple[int, SceneSpec]] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            objects = tuple(
                ObjectSpec(shape=o["shape"], color=o["color"], bbox=tuple(o["bbox"]))
                for o in rec["objects"]
            )
            entries.append(
                (rec["index"], SceneSpec(objects=objects, background=rec["background"], seed=rec["seed"]))
            )
    entries.sort(key=lambda e: e[0])
    return [spec for _, spec in entries]


def spec_to_caption_tokens(
    spec: SceneSpec, vocab: Vocabulary | None = None, max_len: int = MAX_TOKENS
) -> TokenSequence:
    """Caption-like serialization: color-shape phrases joined by relations.

    Objects appear in descending area order and each object is related
    to the next one by the dominant-axis relation of their box centers,
    e.g. "<bos> red circle left-of blue square".  A single object emits
    no relation words.
    """
    objs = _ordered(spec.objects)
    words = [BOS_WORD]
    for i, obj in enumerate(objs):
        if i > 0:
            words.append(relation(_center(objs[i - 1].bbox), _center(obj.bbox)))
        words.extend((obj.color, obj.shape))
    return pack_tokens(words, vocab, max_len)


def _corner_bin(x: float, y: float, bins: int) -> int:
    bx = min(int(x * bins), bins - 1)
    by = min(int(y * bins), bins - 1)
    return by * bins + bx


def spec_to_layout_tokens(
    spec: SceneSpec,
    bins: int = LAYOUT_BINS,
    vocab: Vocabulary | None = None,
    max_len: int = MAX_TOKENS,
) -> TokenSequence:
    """Layout serialization: one (l, b, c) triple per object.

    ``l`` is the grid cell of the top-left corner, ``b`` the cell of the
    bottom-right corner on a bins-by-bins grid, and ``c`` the color-shape
    category word.  Objects follow the same descending-area order as
    captions.
    """
    vocab = vocab if vocab is not None else default_vocab()
    if bins != vocab.bins:
        raise ValueError(f"vocabulary was built for {vocab.bins} bins, got {bins}")
    words = [BOS_WORD]
    for obj in _ordered(spec.objects):
        x0, y0, x1, y1 = obj.bbox
        words.append(f"bin-{_corner_bin(x0, y0, bins)}")
        words.append(f"bin-{_corner_bin(x1, y1, bins)}")
        words.append(f"{obj.color}-{obj.shape}")
    return pack_tokens(words, vocab, max_len)


def boxes_from_layout_tokens(
    seq: TokenSequence, vocab: Vocabulary | None = None
) -> list[tuple[tuple[float, float, float, float], str, str]]:
    """Invert layout tokens to (bbox, color, shape) triples.

    The corner cells only bound the true corners, so a decoded box
    reproduces the original within one bin width per coordinate.
    """
    vocab = vocab if vocab is not None else default_vocab()
    words = vocab.detokenize(seq.ids[: seq.content_length])
    if words and words[0] == BOS_WORD:
        words = words[1:]
    if len(words) % 3 != 0:
        raise ValueError(f"layout content must be (l, b, c) triples, got {len(words)} words")
    bins = vocab.bins
    out: list[tuple[tuple[float, float, float, float], str, str]] = []
    for i in range(0, len(words), 3):
        l_word, b_word, cat = words[i : i + 3]
        if not (l_word.startswith("bin-") and b_word.startswith("bin-")):
            raise ValueError(f"expected two bin words, got {l_word!r}, {b_word!r}")
        li, bi = int(l_word[4:]), int(b_word[4:])
        color, shape = cat.split("-", 1)
        bbox = (
            (li % bins) / bins,
            (li // bins) / bins,
            (bi % bins + 1) / bins,
            (bi // bins + 1) / bins,
        )
        out.append((bbox, color, shape))
    return out


class ConditionEncoder(nn.Module):
    """Token and position embeddings through a small self-attention stack.

    Output is one context vector per input position; pad positions are
    excluded from attention so content-position outputs never depend on
    what sits in the padding.
    """

    def __init__(
        self,
        vocab_size: int,
        max_len: int = MAX_TOKENS,
        width: int = 128,
        layers: int = 2,
        heads: int = 4,
    ) -> None:
        super().__init__()
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.width = width
        self.token_embed = nn.Embedding(vocab_size, width)
        self.pos_embed = nn.Embedding(max_len, width)
        layer = nn.TransformerEncoderLayer(
            d_model=width,
            nhead=heads,
            dim_feedforward=2 * width,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(width)

    def forward(
        self, tokens: TokenSequence | torch.Tensor, mask: torch.Tensor | None = None
    ) -> torch.Tensor:
        single = False
        if isinstance(tokens, TokenSequence):
            ids = tokens.tensor().unsqueeze(0)
            if mask is None:
                mask = tokens.mask().unsqueeze(0)
            single = True
        else:
            ids = tokens
            if ids.dim() == 1:
                ids = ids.unsqueeze(0)
                single = True
        if ids.dim() != 2:
            raise ValueError(f"expected token ids of shape [B, L] or [L], got {list(ids.shape)}")
        if ids.shape[1] > self.max_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds maximum {self.max_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise ValueError(f"token ids must lie in 0..{self.vocab_size - 1}")
        if mask is None:
            mask = ids != PAD_ID
        elif mask.dim() == 1:
            mask = mask.unsqueeze(0)
        positions = torch.arange(ids.shape[1], device=ids.device)
        h = self.token_embed(ids) + self.pos_embed(positions)
        h = self.encoder(h, src_key_padding_mask=~mask)
        h = self.norm(h)
        return h.squeeze(0) if single else h


def encode_condition(
    encoder: ConditionEncoder,
    tokens: TokenSequence | torch.Tensor,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Map a (batch of) token sequence(s) to context vectors [.., L, width]."""
    return encoder(tokens, mask)
