"""Bipartite matching and the composite training loss.

total = llm * L_llm + sum over prediction groups of
        cls * L_cls + l1 * L_l1 + giou * L_giou + bce * L_bce + dice * L_dice

where ``cls`` is the word weight (softmax CE) or the sentence weight
(per-query BCE) depending on the sample's mode. Prediction groups are the
initial (query-selection) predictions, every decoder layer, and every
decoder layer of the denoising queries, which use their fixed source
assignment instead of matching.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .core import Box
from .decoder import DecoderOutput, PredictionSet


@dataclass(frozen=True)
class LossWeights:
    word: float = 2.0
    sent: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    llm: float = 1.0
    no_object: float = 0.1     # relative weight of the no-object class inside L_word

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def cls(self, mode: str) -> float:
        return self.word if mode == "word" else self.sent


@dataclass
class MatchResult:
    pairs: list                      # (query index, gt index), sorted by query
    unmatched: list                  # query indices
    cost: float = 0.0

    @property
    def query_index(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def gt_index(self) -> list[int]:
        return [g for _, g in self.pairs]


def _assignment(C: np.ndarray):
    r, c = linear_sum_assignment(C)
    return dict(zip(r.tolist(), c.tolist())), float(C[r, c].sum())


def hungarian(cost) -> MatchResult:
    """Minimum-cost partial injection between queries (rows) and ground truth (columns).

    Among optimal assignments the lexicographically smallest sorted pair list
    is returned: each row, in order, takes the smallest column that still
    admits an optimal completion, or stays unmatched if none does.
    """
    C = np.asarray(cost.detach().cpu() if torch.is_tensor(cost) else cost, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {C.shape}")
    if not np.isfinite(C).all():
        raise ValueError("cost matrix has non-finite entries")
    Q, G = C.shape
    if Q == 0 or G == 0:
        return MatchResult([], list(range(Q)), 0.0)
    cur, opt = _assignment(C)
    k = min(Q, G)
    tol = 1e-10 * (1.0 + abs(opt))

    fixed: dict[int, int] = {}
    fixed_cost = 0.0
    free_cols = set(range(G))
    for q in range(Q):
        if len(fixed) == k:
            break
        needed = k - len(fixed) - 1
        rest_rows = list(range(q + 1, Q))
        chosen = None
        limit = cur.get(q, G)
        for g in sorted(free_cols):
            if g >= limit:
                break
            rest_cols = sorted(free_cols - {g})
            if needed == 0:
                total, sub = fixed_cost + C[q, g], {}
            else:
                if len(rest_rows) < needed:
                    continue
                sub_local, sub_cost = _assignment(C[np.ix_(rest_rows, rest_cols)])
                if len(sub_local) != needed:
                    continue
                total = fixed_cost + C[q, g] + sub_cost
                sub = {rest_rows[r]: rest_cols[c] for r, c in sub_local.items()}
            if total <= opt + tol:
                chosen = g
                cur = {**fixed, q: g, **sub}
                break
        if chosen is None and q in cur:
            chosen = cur[q]
        if chosen is not None:
            fixed[q] = chosen
            fixed_cost += C[q, chosen]
            free_cols.discard(chosen)
    pairs = sorted(fixed.items())
    unmatched = [q for q in range(Q) if q not in fixed]
    return MatchResult(pairs, unmatched, float(sum(C[q, g] for q, g in pairs)))


# --------------------------------------------------------------------------- boxes

def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU between corner-form boxes ``N x 4`` and ``M x 4``."""
    area_a, area_b = box_area(a), box_area(b)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    iou = inter / union
    lt_h = torch.min(a[:, None, :2], b[None, :, :2])
    rb_h = torch.max(a[:, None, 2:], b[None, :, 2:])
    hull = (rb_h - lt_h).clamp(min=0).prod(-1)
    return iou - (hull - union) / hull


def paired_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU of corner-form boxes ``M x 4`` and ``M x 4``."""
    lt = torch.max(a[:, :2], b[:, :2])
    rb = torch.min(a[:, 2:], b[:, 2:])
    inter = (rb - lt).clamp(min=0).prod(-1)
    union = box_area(a) + box_area(b) - inter
    hull = (torch.max(a[:, 2:], b[:, 2:]) - torch.min(a[:, :2], b[:, :2])).clamp(min=0).prod(-1)
    return inter / union - (hull - union) / hull


def loss_box(pred, gt):
    """Per-pair ``(l1, 1 - GIoU)`` for center-form boxes.

    Accepts two :class:`Box` values (returns floats) or ``M x 4`` tensors
    (returns two length-``M`` tensors).
    """
    if isinstance(pred, Box):
        p = torch.from_numpy(pred.as_array()[None])
        g = torch.from_numpy(gt.as_array()[None])
        l1, gl = loss_box(p, g)
        return float(l1[0]), float(gl[0])
    if (gt[:, 2:] <= 0).any():
        raise ValueError("degenerate ground-truth box")
    l1 = (pred - gt).abs().sum(-1)
    giou = paired_giou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(gt))
    return l1, 1.0 - giou


# --------------------------------------------------------------------------- masks

def loss_mask(logits: torch.Tensor, gt: torch.Tensor, eps: float = 1.0):
    """Per-mask ``(mean sigmoid BCE, dice loss)`` for ``M x h x w`` logits and targets."""
    if logits.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {tuple(logits.shape)} vs {tuple(gt.shape)}")
    gt = gt.to(logits.dtype)
    bce = F.binary_cross_entropy_with_logits(logits, gt, reduction="none").flatten(1).mean(-1)
    p = logits.sigmoid().flatten(1)
    g = gt.flatten(1)
    dice = 1.0 - (2.0 * (p * g).sum(-1) + eps) / (p.sum(-1) + g.sum(-1) + eps)
    return bce, dice


def pairwise_mask_cost(logits: torch.Tensor, gt: torch.Tensor, eps: float = 1.0):
    """All-pairs BCE and dice between ``Q`` predicted and ``G`` target masks: two ``Q x G`` matrices."""
    x = logits.flatten(1)
    g = gt.flatten(1).to(x.dtype)
    hw = x.shape[1]
    pos = F.binary_cross_entropy_with_logits(x, torch.ones_like(x), reduction="none")
    neg = F.binary_cross_entropy_with_logits(x, torch.zeros_like(x), reduction="none")
    bce = (pos @ g.t() + neg @ (1 - g).t()) / hw
    p = x.sigmoid()
    dice = 1.0 - (2.0 * (p @ g.t()) + eps) / (p.sum(-1)[:, None] + g.sum(-1)[None, :] + eps)
    return bce, dice


# --------------------------------------------------------------------------- classification

def query_targets(num_queries: int, match: MatchResult, gt_labels: torch.Tensor, mode: str,
                  num_labels: int) -> torch.Tensor:
    if mode == "word":
        t = torch.full((num_queries,), num_labels, dtype=torch.long)
        for q, g in match.pairs:
            lab = int(gt_labels[g])
            if not 0 <= lab < num_labels:
                raise ValueError(f"label {lab} outside the {num_labels} candidate labels")
            t[q] = lab
        return t
    t = torch.zeros(num_queries)
    for q, _ in match.pairs:
        t[q] = 1.0
    return t


def loss_cls(logits: torch.Tensor, match: MatchResult, gt_labels: torch.Tensor, mode: str,
             no_object_weight: float = 0.1) -> torch.Tensor:
    """Word mode: weighted softmax CE over labels + no-object. Sentence mode: per-query BCE."""
    Q = logits.shape[0]
    if mode == "word":
        n = logits.shape[1] - 1
        target = query_targets(Q, match, gt_labels, mode, n)
        weight = torch.ones(n + 1, dtype=logits.dtype)
        weight[-1] = no_object_weight
        return F.cross_entropy(logits, target, weight=weight)
    if mode == "sentence":
        target = query_targets(Q, match, gt_labels, mode, 1).to(logits.dtype)
        return F.binary_cross_entropy_with_logits(logits, target)
    raise ValueError(f"unknown mode {mode!r}")


# --------------------------------------------------------------------------- matching cost

@dataclass
class Targets:
    labels: torch.Tensor                 # G, candidate index (word) or 0 (sentence)
    boxes: torch.Tensor                  # G x 4 center form
    masks: torch.Tensor                  # G x h x w on the logit grid
    has_mask: torch.Tensor               # G bool

    def __len__(self):
        return self.boxes.shape[0]


def class_cost(pred: PredictionSet, labels: torch.Tensor) -> torch.Tensor:
    if pred.mode == "word":
        return -pred.logits.softmax(-1)[:, labels]
    return -pred.logits.sigmoid()[:, None].expand(-1, labels.shape[0])


def cost_matrix(pred: PredictionSet, tgt: Targets, w: LossWeights) -> torch.Tensor:
    """``Q x G`` matching cost reusing the loss terms; mask terms only for masked targets."""
    C = w.cls(pred.mode) * class_cost(pred, tgt.labels)
    C = C + w.l1 * torch.cdist(pred.boxes, tgt.boxes.to(pred.boxes.dtype), p=1)
    giou = generalized_box_iou(box_cxcywh_to_xyxy(pred.boxes), box_cxcywh_to_xyxy(tgt.boxes.to(pred.boxes.dtype)))
    C = C + w.giou * (1.0 - giou)
    if bool(tgt.has_mask.any()):
        bce, dice = pairwise_mask_cost(pred.masks, tgt.masks)
        m = tgt.has_mask.to(C.dtype)[None, :]
        C = C + m * (w.bce * bce + w.dice * dice)
    return C


TERMS = ("cls", "l1", "giou", "bce", "dice")


def _term_weight(term: str, w: LossWeights, mode: str) -> float:
    return w.cls(mode) if term == "cls" else getattr(w, term)


def set_losses(pred: PredictionSet, tgt: Targets, pairs_q, pairs_g, w: LossWeights,
               match: Optional[MatchResult] = None) -> dict[str, torch.Tensor]:
    """Unweighted loss terms for one prediction group given a query-to-target assignment."""
    zero = pred.boxes.sum() * 0.0
    q = torch.as_tensor(pairs_q, dtype=torch.long)
    g = torch.as_tensor(pairs_g, dtype=torch.long)
    if match is None:
        match = MatchResult(list(zip(q.tolist(), g.tolist())), [])
    out = {"cls": loss_cls(pred.logits, match, tgt.labels, pred.mode, w.no_object)}
    n = max(len(q), 1)
    if len(q):
        l1, gl = loss_box(pred.boxes[q], tgt.boxes[g].to(pred.boxes.dtype))
        out["l1"] = l1.sum() / n
        out["giou"] = gl.sum() / n
        keep = tgt.has_mask[g]
        if bool(keep.any()):
            bce, dice = loss_mask(pred.masks[q[keep]], tgt.masks[g[keep]])
            nm = int(keep.sum())
            out["bce"] = bce.sum() / nm
            out["dice"] = dice.sum() / nm
        else:
            out["bce"] = out["dice"] = zero
    else:
        out["l1"] = out["giou"] = out["bce"] = out["dice"] = zero
    return out


def match_predictions(pred: PredictionSet, tgt: Targets, w: LossWeights) -> MatchResult:
    with torch.no_grad():
        return hungarian(cost_matrix(pred, tgt, w))


def _cls_name(mode: str) -> str:
    return "word" if mode == "word" else "sent"


def total_loss(out: DecoderOutput, tgt: Targets, w: LossWeights, llm: Optional[torch.Tensor] = None):
    """Weighted sum of every term plus an itemized report.

    The report maps ``"llm"`` and ``"<group>.<term>"`` to unweighted values,
    with the classification term named ``word`` or ``sent`` after the mode.
    ``weights_of(report, w, mode)`` gives the matching weights.
    """
    mode = out.final.mode
    report: dict[str, torch.Tensor] = {}
    if llm is not None:
        report["llm"] = llm
    groups = []
    if out.initial is not None:
        groups.append(("init", out.initial, None))
    groups += [(f"layer{i + 1}", p, None) for i, p in enumerate(out.layers)]
    if out.dn is not None:
        groups += [(f"dn{i + 1}", p, out.dn) for i, p in enumerate(out.dn_layers)]
    for name, pred, dn in groups:
        if dn is None:
            match = match_predictions(pred, tgt, w)
            terms = set_losses(pred, tgt, match.query_index, match.gt_index, w, match)
        else:
            qi = list(range(len(dn)))
            terms = set_losses(pred, tgt, qi, dn.gt_index.tolist(), w)
        for t, v in terms.items():
            report[f"{name}.{_cls_name(mode) if t == 'cls' else t}"] = v
    total = recompose(report, w)
    return total, report


def weights_of(report: dict, w: LossWeights) -> dict[str, float]:
    out = {}
    for key in report:
        if key == "llm":
            out[key] = w.llm
            continue
        out[key] = getattr(w, key.split(".", 1)[1])
    return out


def recompose(report: dict, w: LossWeights):
    ws = weights_of(report, w)
    total = None
    for key, v in report.items():
        term = ws[key] * v
        total = term if total is None else total + term
    return total
