"""Inference, panoptic merging, evaluation and overlay images."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..backbones import EOS, TokenSequence, Tokenizer, build_sequence, letterbox
from ..core import BinaryMask, Box, GeometryError
from ..curation import RESPONSE_SUFFIX, SENTENCE_TASK, SUMMARY_TOKEN, WORD_TASK, SftSample
from ..metrics import CumulativeIoU, PanopticScene, box_accuracy, mean_iou, panoptic_quality
from .model import PerceptionModel

MASK_THRESHOLD = 0.5
MODES = ("word", "sentence")


@dataclass
class Detection:
    query: int
    label: str
    score: float
    box: Box
    mask: BinaryMask


@dataclass
class InferenceResult:
    mode: str
    caption: str
    probs: torch.Tensor               # word: Q x (k + 1) distribution; sentence: Q scores
    detections: list = field(default_factory=list)
    panoptic: Optional[PanopticScene] = None


def prompt_sample(mode: str, labels: Optional[Sequence[str]] = None, expression: Optional[str] = None) -> SftSample:
    if mode == "word":
        if not labels:
            raise ValueError("word mode needs at least one label")
        return SftSample("word_based", WORD_TASK, ", ".join(labels), RESPONSE_SUFFIX, "query")
    if mode == "sentence":
        if not expression or not expression.strip():
            raise ValueError("sentence mode needs an expression")
        return SftSample("sentence_based", SENTENCE_TASK, expression.strip(), RESPONSE_SUFFIX, "query")
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


@torch.no_grad()
def generate(model: PerceptionModel, tok: Tokenizer, visual: torch.Tensor, seq: TokenSequence,
             max_new: int = 64) -> TokenSequence:
    """Greedy decoding of the response until the summary token; returns the completed sequence."""
    per, eos = tok.id(SUMMARY_TOKEN), tok.id(EOS)
    ids = list(seq.ids)
    room = model.lm.context - seq.n_visual - len(ids) - 1
    for _ in range(max(0, min(max_new, room))):
        logits = model.lm(visual, torch.tensor([ids])).logits[0, -1]
        nxt = int(logits.argmax())
        if nxt == eos:
            break
        ids.append(nxt)
        if nxt == per:
            break
    if ids[-1] != per:
        ids.append(per)
    return TokenSequence(ids, seq.n_visual, seq.spans, seq.n_visual + len(ids) - 1, seq.response_start)


def split_caption(tok: Tokenizer, seq: TokenSequence) -> str:
    text = tok.decode(seq.ids[seq.response_start - seq.n_visual:])
    suffix = RESPONSE_SUFFIX.replace(SUMMARY_TOKEN, "").strip()
    head = text.split(suffix)[0].strip() if suffix in text else text.replace(SUMMARY_TOKEN, "").strip()
    return head.rstrip(".").strip()


def _upsample(mask_logits: torch.Tensor, size: int, hw: tuple[int, int], scale: float) -> torch.Tensor:
    up = F.interpolate(mask_logits[None], size=(size, size), mode="bilinear", align_corners=False)[0]
    nh, nw = max(1, round(hw[0] * scale)), max(1, round(hw[1] * scale))
    up = up[:, :nh, :nw]
    if (nh, nw) != hw:
        up = F.interpolate(up[None], size=hw, mode="bilinear", align_corners=False)[0]
    return up


def _detection(q: int, label: str, score: float, prob: np.ndarray, box: torch.Tensor) -> Detection:
    cx, cy, w, h = (float(v) for v in box)
    try:
        b = Box(min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), min(max(w, 1e-6), 1.0), min(max(h, 1e-6), 1.0))
    except GeometryError:
        b = Box(0.5, 0.5, 1.0, 1.0)
    return Detection(q, label, score, b, BinaryMask(prob > MASK_THRESHOLD))


def panoptic_merge(probs: torch.Tensor, mask_probs: torch.Tensor, labels: Sequence[str], categories: Sequence[str],
                   is_thing: dict, score_threshold: float = 0.5, overlap: float = 0.8) -> PanopticScene:
    """One segment per confident query, pixels to the highest score x mask probability, stuff merged per class."""
    n = len(labels)
    scores, cls = probs.max(-1)
    keep = (cls != n) & (scores > score_threshold)
    H, W = mask_probs.shape[-2:]
    segments = []
    stuff: dict[int, np.ndarray] = {}
    if keep.any():
        mp = mask_probs[keep]
        sc = scores[keep]
        owner = (sc[:, None, None] * mp).argmax(0)
        for k, c in enumerate(cls[keep].tolist()):
            full = mp[k] > MASK_THRESHOLD
            area = int(full.sum())
            mask = (owner == k) & full
            if area == 0 or int(mask.sum()) == 0 or int(mask.sum()) / area < overlap:
                continue
            cat = list(categories).index(labels[c])
            m = mask.numpy()
            if is_thing.get(cat, True):
                segments.append((cat, m))
            else:
                stuff[cat] = stuff.get(cat, np.zeros((H, W), dtype=bool)) | m
    segments += sorted(stuff.items())
    return PanopticScene.from_segments(segments, (H, W), is_thing)


@torch.no_grad()
def infer(model: PerceptionModel, tok: Tokenizer, image: np.ndarray, mode: str, labels=None, expression=None,
          image_size: int = 128, categories: Optional[Sequence[str]] = None, is_thing: Optional[dict] = None,
          score_threshold: float = 0.5, features=None) -> InferenceResult:
    """Caption, then perceive. Only the final decoder layer is used.

    Word mode keeps queries whose best class is a label with probability above
    ``score_threshold``; with ``categories`` and ``is_thing`` it also builds a
    panoptic partition. Sentence mode returns the single best query.
    """
    sample = prompt_sample(mode, labels, expression)
    model.eval()
    x, scale = letterbox(image, image_size)
    feats = model.encoder(x[None]) if features is None else features
    n_visual = feats.levels[-1].shape[-2] * feats.levels[-1].shape[-1]
    visual = model.visual_tokens(feats)
    seq = generate(model, tok, visual, build_sequence(tok, sample, n_visual, with_response=False))
    hidden = model.lm(visual, torch.tensor([seq.ids])).hidden[0]
    memory, pixel_map = model.decoder.encode_memory(feats)
    out = model.perceive(hidden, seq, [m[0] for m in memory], pixel_map[0], mode,
                         panoptic=mode == "word" and categories is not None, training=False)
    pred = out.final
    hw = image.shape[:2]
    mask_probs = _upsample(pred.masks, image_size, hw, scale).sigmoid()
    cands = sample.candidate_labels
    if mode == "sentence":
        scores = pred.logits.sigmoid()
        best = int(scores.argmax())
        det = _detection(best, cands[0], float(scores[best]), mask_probs[best].numpy(), pred.boxes[best])
        return InferenceResult(mode, split_caption(tok, seq), scores, [det])
    probs = pred.logits.softmax(-1)
    sc, cls = probs.max(-1)
    dets = [_detection(q, cands[int(c)], float(s), mask_probs[q].numpy(), pred.boxes[q])
            for q, (s, c) in enumerate(zip(sc.tolist(), cls.tolist())) if c != len(cands) and s > score_threshold]
    pan = None
    if categories is not None:
        pan = panoptic_merge(probs, mask_probs, cands, categories, is_thing or {}, score_threshold)
    return InferenceResult(mode, split_caption(tok, seq), probs, dets, pan)


# --------------------------------------------------------------------------- evaluation

METRICS = ("pq", "miou", "ciou", "acc")


def evaluate(sess, metrics: Sequence[str] = METRICS, overlay_dir=None) -> dict:
    """Metrics on the session's synthetic set: panoptic (word mode) and referring (sentence mode)."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    model, ds = sess.model, sess.ds
    cats, is_thing = ds.categories, ds.spec.is_thing
    report: dict = {}
    if {"pq", "miou"} & set(metrics):
        preds, gts = [], []
        for i, img in enumerate(sess.images):
            res = infer(model, sess.tok, img.image, "word", labels=cats, image_size=sess.image_size,
                        categories=cats, is_thing=is_thing, features=sess.gather("train", [i]))
            preds.append(res.panoptic)
            gts.append(ds.panoptic[i])
            if overlay_dir is not None:
                save_overlay(Path(overlay_dir) / f"{img.image_id}-word.png", img.image, res.detections)
        if "pq" in metrics:
            pq = panoptic_quality(preds, gts)
            report["pq"] = pq.pq
            report["pq_detail"] = pq.summary()
        if "miou" in metrics:
            report["miou"] = mean_iou(np.stack([p.semantic() for p in preds]),
                                      np.stack([g.semantic() for g in gts]), len(cats))
    if {"ciou", "acc"} & set(metrics):
        ciou = CumulativeIoU()
        pb, gb = [], []
        for k, pair in enumerate(ds.referring):
            img = sess.images[pair.image_index]
            res = infer(model, sess.tok, img.image, "sentence", expression=pair.expression,
                        image_size=sess.image_size, features=sess.gather("train", [pair.image_index]))
            det, gt = res.detections[0], ds.target(pair)
            ciou.add(det.mask, gt.mask)
            pb.append(det.box)
            gb.append(gt.box)
            if overlay_dir is not None:
                save_overlay(Path(overlay_dir) / f"{img.image_id}-ref{k}.png", img.image, res.detections)
        if "ciou" in metrics:
            report["ciou"] = ciou.value
        if "acc" in metrics:
            report["acc"] = float(box_accuracy(pb, gb))
    return report


def write_report(path, report: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- overlays

_PALETTE = np.array([[230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
                     [145, 30, 180], [70, 240, 240], [240, 50, 230]], dtype=np.float64)


def save_overlay(path, image: np.ndarray, detections: Sequence[Detection], alpha: float = 0.5) -> str:
    """Blend each detection's mask onto the image and outline its box."""
    from PIL import Image, ImageDraw

    out = np.asarray(image, dtype=np.float64).copy()
    for i, d in enumerate(detections):
        color = _PALETTE[i % len(_PALETTE)]
        m = d.mask.data
        out[m] = (1 - alpha) * out[m] + alpha * color
    pil = Image.fromarray(out.clip(0, 255).astype(np.uint8))
    draw = ImageDraw.Draw(pil)
    H, W = image.shape[:2]
    for i, d in enumerate(detections):
        x1, y1, x2, y2 = d.box.to_corners()
        draw.rectangle([x1 * W, y1 * H, x2 * W - 1, y2 * H - 1], outline=tuple(int(c) for c in _PALETTE[i % 8]))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pil.save(path)
    return str(path)
