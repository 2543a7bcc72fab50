"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np
import torch


def brute_force_assignment(C: np.ndarray):
    """Exhaustive minimum over all injections of the smaller side; returns (cost, sorted pairs)."""
    Q, G = C.shape
    best, best_pairs = math.inf, None
    if Q >= G:
        for rows in itertools.permutations(range(Q), G):
            pairs = sorted(zip(rows, range(G)))
            cost = sum(C[q, g] for q, g in pairs)
            if cost < best or (cost == best and pairs < best_pairs):
                best, best_pairs = cost, pairs
    else:
        for cols in itertools.permutations(range(G), Q):
            pairs = list(zip(range(Q), cols))
            cost = sum(C[q, g] for q, g in pairs)
            if cost < best or (cost == best and pairs < best_pairs):
                best, best_pairs = cost, pairs
    return best, best_pairs


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of a scalar function of one float64 tensor."""
    x = x.detach().clone()
    g = torch.zeros_like(x)
    flat = x.view(-1)
    f = torch.no_grad()(f)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        hi = float(f(x))
        flat[i] = old - eps
        lo = float(f(x))
        flat[i] = old
        g.view(-1)[i] = (hi - lo) / (2 * eps)
    return g


def autograd(f, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    f(x).backward()
    return x.grad.detach()


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-12))


def giou_closed_form(a, b) -> float:
    """GIoU of two corner boxes by direct arithmetic."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area = lambda r: (r[2] - r[0]) * (r[3] - r[1])
    union = area(a) + area(b) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (hull - union) / hull


def naive_word_ce(logits: np.ndarray, targets: list[int], no_object_weight: float) -> float:
    n = logits.shape[1] - 1
    num = den = 0.0
    for q, t in enumerate(targets):
        row = logits[q]
        m = row.max()
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        w = no_object_weight if t == n else 1.0
        num += w * (lse - row[t])
        den += w
    return num / den


def naive_sentence_bce(logits: np.ndarray, positives: set) -> float:
    tot = 0.0
    for q, x in enumerate(logits):
        p = 1.0 / (1.0 + math.exp(-x))
        y = 1.0 if q in positives else 0.0
        tot += -(y * math.log(p) + (1 - y) * math.log(1 - p))
    return tot / len(logits)


def resolve_expression(expr: str, things: list[dict]) -> list[int]:
    """Rule interpreter for "the <color> <shape> [<relation> the <color> <shape>]" over scene objects.

    Each thing is ``{"color", "shape", "bbox": (x1, y1, x2, y2)}``; returns every index it denotes.
    """
    words = expr.split()
    assert words[0] == "the"
    color, shape = words[1], words[2]
    cands = [i for i, t in enumerate(things) if t["color"] == color and t["shape"] == shape]
    if len(words) == 3:
        return cands
    rest = " ".join(words[3:])
    for rel in ("left of", "right of", "above", "below"):
        if rest.startswith(rel + " the "):
            c2, s2 = rest[len(rel) + 5:].split()
            anchors = [j for j, t in enumerate(things) if t["color"] == c2 and t["shape"] == s2]
            break
    else:
        raise ValueError(expr)

    def holds(a, b):
        ax1, ay1, ax2, ay2 = a["bbox"]
        bx1, by1, bx2, by2 = b["bbox"]
        return {"left of": ax2 <= bx1, "right of": ax1 >= bx2, "above": ay2 <= by1, "below": ay1 >= by2}[rel]

    return [i for i in cands if any(j != i and holds(things[i], things[j]) for j in anchors)]
