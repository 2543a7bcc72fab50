"""Seeded synthetic scenes: colored shapes over stuff regions, with referring expressions.

Every image is a partition into stuff regions and non-overlapping thing
instances, so the panoptic ground truth has no void pixels. Expressions are
built to identify their target uniquely, either by color and shape alone or
with a spatial relation to another uniquely described instance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import Annotation, BinaryMask, LabeledImage
from .metrics import PanopticScene

THING_COLORS = {
    "red": (220, 40, 40),
    "blue": (40, 70, 220),
    "yellow": (235, 215, 40),
    "purple": (150, 50, 200),
}
STUFF_COLORS = {
    "sky": (175, 210, 240),
    "grass": (60, 125, 55),
    "road": (95, 95, 95),
}
SHAPES = ("square", "circle", "triangle")
RELATIONS = ("left of", "right of", "above", "below")


class SynthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 128
    num_images: int = 16
    shapes: tuple = SHAPES
    colors: tuple = tuple(THING_COLORS)
    stuff: tuple = tuple(STUFF_COLORS)
    min_instances: int = 2
    max_instances: int = 4
    min_size_frac: float = 0.18
    max_size_frac: float = 0.3
    expressions_per_image: int = 2
    noise: int = 10
    seed: int = 0
    max_retries: int = 50

    def __post_init__(self):
        if not 1 <= self.min_instances <= self.max_instances <= 6:
            raise ValueError("instance count range must satisfy 1 <= min <= max <= 6")
        if not 32 <= self.image_size <= 512:
            raise ValueError(f"image_size {self.image_size} out of range")

    @property
    def categories(self) -> list[str]:
        """Thing shapes first, then stuff classes; indices are the panoptic category ids."""
        return list(self.shapes) + list(self.stuff)

    @property
    def is_thing(self) -> dict[int, bool]:
        return {i: i < len(self.shapes) for i in range(len(self.categories))}


@dataclass(frozen=True)
class ReferringPair:
    image_index: int
    expression: str
    annotation_index: int


@dataclass
class SynthDataset:
    spec: SynthSpec
    images: list[LabeledImage]
    panoptic: list[PanopticScene]
    referring: list[ReferringPair]
    categories: list[str] = field(default_factory=list)

    def target(self, pair: ReferringPair) -> Annotation:
        return self.images[pair.image_index].annotations[pair.annotation_index]


def _shape_mask(kind: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2.0
        return (xx + 0.5 - r) ** 2 + (yy + 0.5 - r) ** 2 <= r * r
    if kind == "triangle":
        # apex at the top center, base on the bottom row
        half = (yy + 1) / size * (size / 2.0)
        return np.abs(xx + 0.5 - size / 2.0) <= half
    raise ValueError(f"unknown shape {kind!r}")


def _relation_holds(rel: str, a: dict, b: dict) -> bool:
    ax1, ay1, ax2, ay2 = a["bbox"]
    bx1, by1, bx2, by2 = b["bbox"]
    if rel == "left of":
        return ax2 <= bx1
    if rel == "right of":
        return ax1 >= bx2
    if rel == "above":
        return ay2 <= by1
    if rel == "below":
        return ay1 >= by2
    raise ValueError(rel)


def _describe(target: dict, things: list[dict], rng: np.random.Generator) -> Optional[str]:
    key = (target["color"], target["shape"])
    same = [t for t in things if (t["color"], t["shape"]) == key]
    base = f"the {target['color']} {target['shape']}"
    anchors = [
        o for o in things
        if o is not target and sum((u["color"], u["shape"]) == (o["color"], o["shape"]) for u in things) == 1
    ]
    options = []
    for o in anchors:
        for rel in RELATIONS:
            if not _relation_holds(rel, target, o):
                continue
            if sum(_relation_holds(rel, s, o) for s in same if s is not o) == 1:
                options.append(f"{base} {rel} the {o['color']} {o['shape']}")
    if len(same) == 1:
        if options and rng.random() < 0.5:
            return options[int(rng.integers(len(options)))]
        return base
    if options:
        return options[int(rng.integers(len(options)))]
    return None


def _render_one(spec: SynthSpec, rng: np.random.Generator):
    S = spec.image_size
    img = np.zeros((S, S, 3), dtype=np.int32)
    stuff_map = np.zeros((S, S), dtype=np.int64)

    n_stuff = int(rng.integers(2, len(spec.stuff) + 1))
    stuff_ids = sorted(rng.choice(len(spec.stuff), size=n_stuff, replace=False).tolist())
    rng.shuffle(stuff_ids)
    vertical = bool(rng.integers(2))
    cuts = np.sort(rng.choice(np.arange(S // 5, S - S // 5), size=n_stuff - 1, replace=False))
    edges = [0, *cuts.tolist(), S]
    for k, sid in enumerate(stuff_ids):
        if vertical:
            stuff_map[:, edges[k]:edges[k + 1]] = sid
        else:
            stuff_map[edges[k]:edges[k + 1], :] = sid
    stuff_rgb = np.array([STUFF_COLORS[n] for n in spec.stuff])
    img[:] = stuff_rgb[stuff_map]

    n_things = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    things: list[dict] = []
    occupied = np.zeros((S, S), dtype=bool)
    lo, hi = int(spec.min_size_frac * S), int(spec.max_size_frac * S)
    attempts = 0
    while len(things) < n_things and attempts < 200:
        attempts += 1
        size = int(rng.integers(lo, hi + 1))
        x0 = int(rng.integers(1, S - size - 1))
        y0 = int(rng.integers(1, S - size - 1))
        gap = 3
        if occupied[max(0, y0 - gap):y0 + size + gap, max(0, x0 - gap):x0 + size + gap].any():
            continue
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        color = spec.colors[int(rng.integers(len(spec.colors)))]
        m = np.zeros((S, S), dtype=bool)
        m[y0:y0 + size, x0:x0 + size] = _shape_mask(shape, size)
        occupied[y0:y0 + size, x0:x0 + size] = True
        ys, xs = np.nonzero(m)
        things.append({
            "shape": shape, "color": color, "mask": m,
            "bbox": (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1),
        })
    if len(things) < spec.min_instances:
        return None

    for t in things:
        img[t["mask"]] = THING_COLORS[t["color"]]
    img = img + rng.integers(-spec.noise, spec.noise + 1, size=img.shape)
    img = np.clip(img, 0, 255).astype(np.uint8)

    thing_union = np.zeros((S, S), dtype=bool)
    for t in things:
        thing_union |= t["mask"]
    stuff_regions = []
    for sid in sorted(set(stuff_ids)):
        m = (stuff_map == sid) & ~thing_union
        if m.any():
            stuff_regions.append((sid, m))
    return img, things, stuff_regions


def synth_generate(spec: SynthSpec) -> SynthDataset:
    """Generate ``spec.num_images`` scenes deterministically from ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    n_shapes = len(spec.shapes)
    images, scenes, pairs = [], [], []
    for idx in range(spec.num_images):
        for _ in range(spec.max_retries):
            out = _render_one(spec, rng)
            if out is None:
                continue
            img, things, stuff_regions = out
            order = rng.permutation(len(things))
            exprs = []
            for j in order:
                e = _describe(things[j], things, rng)
                if e is not None:
                    exprs.append((int(j), e))
                if len(exprs) == spec.expressions_per_image:
                    break
            if len(exprs) == min(spec.expressions_per_image, len(things)):
                break
        else:
            raise SynthError(f"image {idx}: could not build unique expressions after {spec.max_retries} retries")

        anns = []
        for t in things:
            anns.append(Annotation.from_mask(spec.shapes.index(t["shape"]), BinaryMask(t["mask"]), is_thing=True))
        for sid, m in stuff_regions:
            anns.append(Annotation.from_mask(n_shapes + sid, BinaryMask(m), is_thing=False))
        meta = {"things": [{"shape": t["shape"], "color": t["color"]} for t in things]}
        images.append(LabeledImage(img, tuple(anns), image_id=f"synth-{spec.seed}-{idx:04d}", meta=meta))
        scenes.append(PanopticScene.from_segments(
            [(a.label, a.mask) for a in anns], (spec.image_size, spec.image_size), spec.is_thing))
        for j, e in exprs:
            pairs.append(ReferringPair(idx, e, j))
    return SynthDataset(spec, images, scenes, pairs, spec.categories)


def describe_scene(img: LabeledImage, categories: list[str], style: int = 0) -> str:
    """Template caption for a synthetic scene; ``style`` selects one of four phrasings."""
    things = img.meta.get("things", [])
    stuff = sorted({categories[a.label] for a in img.annotations if not a.is_thing})
    objs = [f"{t['color']} {t['shape']}" for t in things]
    counts: dict[str, int] = {}
    for t in things:
        counts[t["shape"]] = counts.get(t["shape"], 0) + 1
    words = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}
    count_phrase = " and ".join(
        f"{words[n]} {s}{'s' if n > 1 else ''}" for s, n in sorted(counts.items()))
    bg = " and ".join(stuff)
    style = style % 4
    if style == 0:
        return f"a toy scene with {count_phrase} over {bg}"
    if style == 1:
        return f"this synthetic picture shows a {', a '.join(objs)} in front of {bg}"
    if style == 2:
        return f"flat colored shapes: {', '.join(objs)}, placed on a background of {bg}"
    return f"an abstract drawing of {len(things)} objects, namely {' and '.join(objs)}, with {bg} behind them"
