"""Evaluation metrics: panoptic quality, mIoU, cumulative IoU and box accuracy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import BinaryMask, Box, box_iou

VOID = -1


@dataclass(frozen=True, eq=False)
class PanopticScene:
    """Per-pixel ``(category, instance)`` labelling. ``category == VOID`` marks void pixels."""

    category: np.ndarray
    instance: np.ndarray
    is_thing: Mapping[int, bool] = field(default_factory=dict)

    def __post_init__(self):
        cat = np.asarray(self.category, dtype=np.int64)
        inst = np.asarray(self.instance, dtype=np.int64)
        if cat.shape != inst.shape or cat.ndim != 2:
            raise ValueError(f"category/instance maps must be equal 2-D shapes, got {cat.shape}, {inst.shape}")
        cat = cat.copy()
        inst = np.where(cat == VOID, 0, inst)
        cat.setflags(write=False)
        inst.setflags(write=False)
        object.__setattr__(self, "category", cat)
        object.__setattr__(self, "instance", inst)
        object.__setattr__(self, "is_thing", dict(self.is_thing))

    @property
    def shape(self):
        return self.category.shape

    @classmethod
    def from_segments(cls, segments: Sequence[tuple[int, np.ndarray]], shape, is_thing=None) -> "PanopticScene":
        """Build a scene from ``(category, mask)`` pairs; overlapping masks are rejected."""
        cat = np.full(shape, VOID, dtype=np.int64)
        inst = np.zeros(shape, dtype=np.int64)
        taken = np.zeros(shape, dtype=bool)
        next_id: dict[int, int] = {}
        for c, m in segments:
            m = m.data if isinstance(m, BinaryMask) else np.asarray(m, dtype=bool)
            if m.shape != tuple(shape):
                raise ValueError(f"segment mask shape {m.shape} != scene shape {tuple(shape)}")
            if np.any(taken & m):
                raise ValueError("predicted segments overlap; a panoptic map must be a partition")
            taken |= m
            next_id[c] = next_id.get(c, 0) + 1
            cat[m] = c
            inst[m] = next_id[c]
        return cls(cat, inst, is_thing or {})

    def segments(self) -> dict[tuple[int, int], np.ndarray]:
        out = {}
        for c, i in sorted(set(zip(self.category.ravel().tolist(), self.instance.ravel().tolist()))):
            if c == VOID:
                continue
            out[(c, i)] = (self.category == c) & (self.instance == i)
        return out

    def semantic(self) -> np.ndarray:
        return self.category.copy()


@dataclass
class PQStat:
    iou: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "PQStat"):
        self.iou += other.iou
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou / denom if denom else 0.0

    @property
    def sq(self) -> float:
        return self.iou / self.tp if self.tp else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom else 0.0


@dataclass
class PQResult:
    per_category: dict[int, PQStat]
    is_thing: dict[int, bool]

    def _mean(self, pick) -> dict[str, float]:
        cats = [c for c, s in self.per_category.items() if (s.tp + s.fp + s.fn) > 0 and pick(c)]
        if not cats:
            return {"pq": 0.0, "sq": 0.0, "rq": 0.0, "n": 0}
        return {
            "pq": float(np.mean([self.per_category[c].pq for c in cats])),
            "sq": float(np.mean([self.per_category[c].sq for c in cats])),
            "rq": float(np.mean([self.per_category[c].rq for c in cats])),
            "n": len(cats),
        }

    @property
    def pq(self) -> float:
        return self._mean(lambda c: True)["pq"]

    def summary(self) -> dict[str, dict[str, float]]:
        return {
            "all": self._mean(lambda c: True),
            "things": self._mean(lambda c: self.is_thing.get(c, True)),
            "stuff": self._mean(lambda c: not self.is_thing.get(c, True)),
        }


def pq_stats(pred: PanopticScene, gt: PanopticScene) -> dict[int, PQStat]:
    """Per-category matching statistics for one image.

    A predicted and a ground-truth segment of the same category match iff
    their IoU exceeds 0.5, which makes the matching unique. Pixels that are
    void in the ground truth are left out of every union, and a predicted
    segment lying mostly on void is neither a TP nor an FP.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"scene shapes differ: {pred.shape} vs {gt.shape}")
    gt_void = gt.category == VOID
    gt_segs = gt.segments()
    pred_segs = pred.segments()
    stats: dict[int, PQStat] = {}
    matched_gt, matched_pred = set(), set()
    for gk, gm in gt_segs.items():
        g_area = int(gm.sum())
        for pk, pm in pred_segs.items():
            if pk[0] != gk[0] or pk in matched_pred:
                continue
            inter = int(np.logical_and(gm, pm).sum())
            if inter == 0:
                continue
            union = g_area + int(pm.sum()) - inter - int(np.logical_and(pm, gt_void).sum())
            iou = inter / union
            if iou > 0.5:
                s = stats.setdefault(gk[0], PQStat())
                s.iou += iou
                s.tp += 1
                matched_gt.add(gk)
                matched_pred.add(pk)
                break
    for gk in gt_segs:
        if gk not in matched_gt:
            stats.setdefault(gk[0], PQStat()).fn += 1
    for pk, pm in pred_segs.items():
        if pk in matched_pred:
            continue
        if np.logical_and(pm, gt_void).sum() / pm.sum() > 0.5:
            continue
        stats.setdefault(pk[0], PQStat()).fp += 1
    return stats


def panoptic_quality(pred, gt) -> PQResult:
    """PQ/SQ/RQ per category and averaged. Accepts one scene or parallel sequences of scenes."""
    if isinstance(pred, PanopticScene):
        pred, gt = [pred], [gt]
    total: dict[int, PQStat] = {}
    is_thing: dict[int, bool] = {}
    for p, g in zip(pred, gt, strict=True):
        for c, s in pq_stats(p, g).items():
            acc = total.setdefault(c, PQStat())
            acc += s
        is_thing.update(g.is_thing)
    return PQResult(total, is_thing)


def mean_iou(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = VOID) -> float:
    """Per-class IoU averaged over the classes present in ``gt``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"semantic map shapes differ: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_index
    ious = []
    for c in range(num_classes):
        g = (gt == c) & valid
        if not g.any():
            continue
        p = (pred == c) & valid
        ious.append(np.logical_and(p, g).sum() / np.logical_or(p, g).sum())
    return float(np.mean(ious)) if ious else 0.0


class CumulativeIoU:
    """Running sum of intersections and unions over a referring-segmentation stream."""

    def __init__(self):
        self.intersection = 0
        self.union = 0

    def add_counts(self, intersection: int, union: int) -> None:
        if union == 0:
            return
        self.intersection += intersection
        self.union += union

    def add(self, pred: BinaryMask, gt: BinaryMask) -> None:
        p = pred.data if isinstance(pred, BinaryMask) else np.asarray(pred, dtype=bool)
        g = gt.data if isinstance(gt, BinaryMask) else np.asarray(gt, dtype=bool)
        if p.shape != g.shape:
            raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
        self.add_counts(int(np.logical_and(p, g).sum()), int(np.logical_or(p, g).sum()))

    @property
    def value(self) -> float:
        return self.intersection / self.union if self.union else 0.0


def cumulative_iou(pairs: Iterable[tuple[BinaryMask, BinaryMask]]) -> float:
    """Dataset-level sum of intersections over sum of unions (empty/empty pairs skipped)."""
    acc = CumulativeIoU()
    for p, g in pairs:
        acc.add(p, g)
    return acc.value


def box_accuracy(pred: Sequence[Box], gt: Sequence[Box], iou_threshold: float = 0.5) -> float:
    """Fraction of predictions whose IoU with the paired ground truth is at least the threshold."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    if not pred:
        return 0.0
    hits = sum(box_iou(p, g) >= iou_threshold for p, g in zip(pred, gt))
    return hits / len(pred)
