"""Training data: the caption corpus, the stage-2 sources and the seeded mixture sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np
import torch

from ..backbones import CAPTION_PROMPT, TokenSequence, Tokenizer, build_caption_sequence, build_sequence
from ..core import LabeledImage
from ..curation import (RESPONSE_SUFFIX, SENTENCE_TASK, WORD_TASK, MockCaptioner, SftSample,
                        build_sentence_sample, build_word_sample, caption_images, format_response)
from ..objective import Targets
from ..synth import SynthDataset, SynthSpec, describe_scene, synth_generate


def step_rng(seed: int, step: int, slot: int = 0, stream: int = 0) -> np.random.Generator:
    """Independent generator for one (step, batch slot); resuming at any step reproduces it."""
    return np.random.default_rng([seed, step, slot, stream])


def torch_generator(seed: int, step: int, slot: int = 0, stream: int = 1) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(step_rng(seed, step, slot, stream).integers(2 ** 62)))
    return g


class MixSampler:
    """I.i.d. categorical draws over named sources, then a uniform item within the source.

    ``draw(step, slot)`` depends only on ``(seed, step, slot)``.
    """

    def __init__(self, sources: Mapping[str, Sequence], probabilities: Mapping[str, float], seed: int = 0):
        names = [k for k, p in probabilities.items() if p > 0]
        if not names:
            raise ValueError("no source has positive probability")
        for k in names:
            if k not in sources or len(sources[k]) == 0:
                raise ValueError(f"source {k!r} is empty")
        p = np.array([probabilities[k] for k in names], dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()}, expected 1")
        self.names = names
        self.cdf = np.cumsum(p)
        self.sources = sources
        self.seed = seed

    def draw(self, step: int, slot: int = 0):
        rng = step_rng(self.seed, step, slot)
        k = min(int(np.searchsorted(self.cdf, rng.random(), side="right")), len(self.names) - 1)
        name = self.names[k]
        items = self.sources[name]
        return name, items[int(rng.integers(len(items)))], rng


def mix_sampler(sources: Mapping[str, Sequence], probabilities: Mapping[str, float], seed: int = 0) -> Iterator:
    """Endless ``(source, item)`` stream, one draw per step."""
    sampler = MixSampler(sources, probabilities, seed)
    step = 0
    while True:
        name, item, _ = sampler.draw(step)
        yield name, item
        step += 1


# --------------------------------------------------------------------------- corpora

def style_captioners(categories) -> list[MockCaptioner]:
    """Four template captioners standing in for external caption models."""
    return [MockCaptioner(f"template-{s}", lambda ref, img, s=s: describe_scene(img, categories, s))
            for s in range(4)]


def caption_dataset(ds: SynthDataset) -> list[LabeledImage]:
    return caption_images(ds.images, style_captioners(ds.categories))


def caption_corpus(seed: int = 0, num_images: int = 50, image_size: int = 128):
    """Images and captions for connector alignment: every accepted caption of every scene."""
    ds = synth_generate(SynthSpec(image_size=image_size, num_images=num_images, seed=seed + 1000))
    images = caption_dataset(ds)
    pairs = [(i, c) for i, img in enumerate(images) for c in img.captions]
    return images, pairs


def tokenizer_texts(*datasets: Sequence[LabeledImage], categories=(), expressions=()) -> list[str]:
    texts = [WORD_TASK, SENTENCE_TASK, RESPONSE_SUFFIX, CAPTION_PROMPT, "none", *categories, *expressions]
    for images in datasets:
        for img in images:
            texts.extend(img.captions)
    return texts


# --------------------------------------------------------------------------- stage-2 items

def downsample_mask(mask: np.ndarray, grid: int) -> np.ndarray:
    """Area-majority resampling of an ``H x W`` mask to ``grid x grid`` (H divisible by grid)."""
    h, w = mask.shape
    fy, fx = h // grid, w // grid
    if fy * grid != h or fx * grid != w:
        raise ValueError(f"mask {mask.shape} not divisible into a {grid} grid")
    return mask.reshape(grid, fy, grid, fx).mean(axis=(1, 3)) >= 0.5


@dataclass
class TrainItem:
    source: str
    sample: SftSample
    seq: TokenSequence
    image_index: int
    targets: Targets
    mode: str            # "word" or "sentence"
    panoptic: bool

    @property
    def num_labels(self) -> int:
        return len(self.sample.candidate_labels) if self.mode == "word" else 1


def make_targets(sample: SftSample, mode: str, grid: int, use_masks: bool) -> Targets:
    labels = sample.candidate_labels
    idx, boxes, masks = [], [], []
    for a in sample.targets:
        idx.append(labels.index(a.label) if mode == "word" else 0)
        boxes.append(a.box.as_array())
        masks.append(downsample_mask(a.mask.data, grid))
    G = len(idx)
    return Targets(
        labels=torch.tensor(idx, dtype=torch.long),
        boxes=torch.tensor(np.array(boxes), dtype=torch.float32).reshape(G, 4),
        masks=torch.tensor(np.array(masks), dtype=torch.float32).reshape(G, grid, grid),
        has_mask=torch.full((G,), use_masks and sample.targets[0].has_mask if G else False, dtype=torch.bool),
    )


SOURCES = ("panoptic", "referring", "detection", "grounding")


class Stage2Data:
    """The four stage-2 sources over one captioned synthetic set.

    panoptic: word mode over all categories with masks and stuff queries.
    detection: word mode over thing categories, boxes only.
    referring: sentence mode with masks. grounding: sentence mode, boxes only.
    """

    def __init__(self, ds: SynthDataset, images: Sequence[LabeledImage], tok: Tokenizer, n_visual: int,
                 grid: int, response_setting: str = "caption", neg_budget: Optional[int] = None):
        self.ds = ds
        self.images = list(images)
        self.tok = tok
        self.n_visual = n_visual
        self.grid = grid
        self.response_setting = response_setting
        self.neg_budget = neg_budget
        img_idx = list(range(len(self.images)))
        pair_idx = list(range(len(ds.referring)))
        self.sources = {"panoptic": img_idx, "detection": img_idx, "referring": pair_idx, "grounding": pair_idx}

    @property
    def categories(self) -> list[str]:
        return self.ds.categories

    @property
    def thing_vocab(self) -> list[str]:
        return [c for i, c in enumerate(self.categories) if self.ds.spec.is_thing[i]]

    def item(self, source: str, index: int, rng: np.random.Generator) -> TrainItem:
        if source in ("panoptic", "detection"):
            img = self.images[index]
            if source == "panoptic":
                sample = build_word_sample(img, self.categories, rng, self.neg_budget, self.response_setting)
            else:
                sample = build_word_sample(img, self.thing_vocab, rng, None, self.response_setting,
                                           keep_targets=lambda a: a.is_thing)
            mode, image_index = "word", index
        elif source in ("referring", "grounding"):
            pair = self.ds.referring[index]
            img = self.images[pair.image_index]
            sample = build_sentence_sample(img, pair.expression, self.ds.target(pair), rng,
                                           self.response_setting, self.categories)
            mode, image_index = "sentence", pair.image_index
        else:
            raise ValueError(f"unknown source {source!r}")
        seq = build_sequence(self.tok, sample, self.n_visual)
        use_masks = source in ("panoptic", "referring")
        return TrainItem(source, sample, seq, image_index, make_targets(sample, mode, self.grid, use_masks),
                         mode, source == "panoptic")


def caption_sequence(tok: Tokenizer, caption: str, n_visual: int) -> TokenSequence:
    return build_caption_sequence(tok, format_response(caption), n_visual)
