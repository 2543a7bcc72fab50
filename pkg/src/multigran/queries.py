"""Dynamic query generation.

Each final query is a base vector expanded from the summary-token hidden
state plus a residual taken from the visual cell that best matches the
instruction embeddings. The selected cell's center becomes the query's
reference point.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


@dataclass
class QuerySet:
    content: torch.Tensor                 # Q x D
    reference: torch.Tensor               # Q x 4, (cx, cy, w, h) in [0, 1]
    provenance: list = field(default_factory=list)   # (level, cell) or "stuff" / "bank"
    num_stuff: int = 0
    init_logits: Optional[torch.Tensor] = None       # Q x n selection scores per label

    def __post_init__(self):
        if self.content.shape[0] != self.reference.shape[0]:
            raise ValueError("content and reference point counts differ")

    def __len__(self):
        return self.content.shape[0]


@dataclass
class Selection:
    indices: torch.Tensor        # N, flat cell indices, descending score
    residuals: torch.Tensor      # N x D
    positions: torch.Tensor      # N x 2


def select_top_n(scores: torch.Tensor, n: int, features: Optional[torch.Tensor] = None,
                 positions: Optional[torch.Tensor] = None) -> Selection:
    """Top-``n`` cells by descending score, ties broken toward the smaller flat index."""
    if n > scores.numel():
        raise ValueError(f"cannot select {n} of {scores.numel()} cells")
    order = torch.sort(scores.detach(), descending=True, stable=True).indices[:n]
    res = features[order] if features is not None else None
    pos = positions[order] if positions is not None else None
    return Selection(order, res, pos)


class QueryGenerator(nn.Module):
    def __init__(self, lm_dim: int = 128, dim: int = 64, num_queries: int = 100, num_stuff: int = 100,
                 hidden: int = 256, query_selection: bool = True, init_size: float = 0.2):
        super().__init__()
        self.dim = dim
        self.num_queries = num_queries
        self.num_stuff = num_stuff
        self.query_selection = query_selection
        self.base_mlp = nn.Sequential(nn.Linear(lm_dim, hidden), nn.ReLU(), nn.Linear(hidden, num_queries * dim))
        self.align = nn.Sequential(nn.Linear(lm_dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))
        self.residual_proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))
        self.ref_size = nn.Parameter(inverse_sigmoid(torch.full((2,), init_size)))
        self.stuff_content = nn.Embedding(max(num_stuff, 1), dim)
        if not query_selection:
            self.bank_content = nn.Embedding(num_queries, dim)
            self.bank_ref = nn.Parameter(torch.rand(num_queries, 2))

    def expand_base(self, summary: torch.Tensor, n: Optional[int] = None) -> torch.Tensor:
        """``d_lm`` summary vector to ``N x D`` base query vectors."""
        n = self.num_queries if n is None else n
        if n < 1 or n > self.num_queries:
            raise ValueError(f"n must be in [1, {self.num_queries}], got {n}")
        return self.base_mlp(summary).view(self.num_queries, self.dim)[:n]

    def align_text(self, text: torch.Tensor) -> torch.Tensor:
        if text.numel() == 0:
            raise ValueError("empty text embedding list")
        return self.align(text)

    def label_scores(self, features: torch.Tensor, aligned_text: torch.Tensor) -> torch.Tensor:
        """Scaled cosine similarity of every cell with every label: ``S x n``."""
        if aligned_text.shape[0] == 0:
            raise ValueError("empty text embedding list")
        f = F.normalize(features, dim=-1)
        t = F.normalize(aligned_text, dim=-1)
        return self.logit_scale.exp() * (f @ t.t())

    def score_features(self, features: torch.Tensor, aligned_text: torch.Tensor) -> torch.Tensor:
        """One score per cell: the max over labels of the scaled cosine similarity."""
        return self.label_scores(features, aligned_text).max(dim=-1).values

    def assemble(self, base: torch.Tensor, residuals: torch.Tensor, positions: torch.Tensor,
                 panoptic: bool = False, provenance=None, init_logits=None) -> QuerySet:
        if not (base.shape[0] == residuals.shape[0] == positions.shape[0]):
            raise ValueError(f"count mismatch: {base.shape[0]}, {residuals.shape[0]}, {positions.shape[0]}")
        n = base.shape[0]
        content = base + self.residual_proj(residuals)
        wh = self.ref_size.sigmoid().to(base.dtype).expand(n, 2)
        reference = torch.cat([positions.to(base.dtype), wh], dim=-1)
        provenance = list(provenance) if provenance is not None else [None] * n
        if panoptic and self.num_stuff > 0:
            stuff = self.stuff_content.weight.to(base.dtype)
            full = torch.tensor([0.5, 0.5, 1.0, 1.0], dtype=base.dtype).expand(self.num_stuff, 4)
            content = torch.cat([content, stuff], dim=0)
            reference = torch.cat([reference, full], dim=0)
            provenance += ["stuff"] * self.num_stuff
        return QuerySet(content, reference, provenance, self.num_stuff if panoptic else 0, init_logits)

    def forward(self, summary: torch.Tensor, memory: torch.Tensor, positions: torch.Tensor,
                aligned_text: torch.Tensor, level_sizes, panoptic: bool = False) -> QuerySet:
        """Build the query set for one sample.

        ``memory`` is the flattened multi-scale feature set ``S x D`` and
        ``positions`` the matching cell centers ``S x 2``.
        """
        base = self.expand_base(summary)
        n = self.num_queries
        if self.query_selection:
            per_label = self.label_scores(memory, aligned_text)
            sel = select_top_n(per_label.max(dim=-1).values, n, memory, positions)
            starts = torch.tensor([0, *level_sizes]).cumsum(0)
            prov = []
            for i in sel.indices.tolist():
                lvl = int(torch.searchsorted(starts, i, right=True)) - 1
                prov.append((lvl, i - int(starts[lvl])))
            return self.assemble(base, sel.residuals, sel.positions, panoptic, prov, per_label[sel.indices])
        residuals = self.bank_content.weight.to(base.dtype)
        pos = self.bank_ref.to(base.dtype).clamp(0.0, 1.0)
        return self.assemble(base, residuals, pos, panoptic, ["bank"] * n, None)
