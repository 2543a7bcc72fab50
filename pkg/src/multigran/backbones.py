"""Toy stand-ins for the vision encoder, the connector and the causal language model."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .curation import SUMMARY_TOKEN, SftSample

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP, SUMMARY_TOKEN)
CAPTION_PROMPT = "Describe the image briefly."

_TOKEN_RE = re.compile(re.escape(SUMMARY_TOKEN) + r"|\w+|[^\w\s]", re.UNICODE)


class ContextOverflow(ValueError):
    pass


class Tokenizer:
    """Whitespace and punctuation splitting over a closed word list, bytes as fallback.

    Words are lowercased. Any word outside the vocabulary is spelled out as
    UTF-8 byte tokens ``<0xNN>`` so every string is encodable.
    """

    def __init__(self, words: Sequence[str]):
        byte_tokens = [f"<0x{i:02X}>" for i in range(256)]
        words = sorted(set(w.lower() for w in words) - set(SPECIALS) - set(byte_tokens))
        self.itos = list(SPECIALS) + byte_tokens + words
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.n_bytes_offset = len(SPECIALS)

    @classmethod
    def build(cls, texts: Sequence[str]) -> "Tokenizer":
        words = set()
        for t in texts:
            for m in _TOKEN_RE.finditer(t):
                if m.group() != SUMMARY_TOKEN:
                    words.add(m.group().lower())
        return cls(sorted(words))

    def __len__(self):
        return len(self.itos)

    def id(self, tok: str) -> int:
        return self.stoi[tok]

    def encode(self, text: str) -> tuple[list[int], list[tuple[int, int]]]:
        """Token ids and the ``(start, end)`` character span each token came from."""
        ids, offsets = [], []
        for m in _TOKEN_RE.finditer(text):
            tok = m.group()
            key = tok if tok == SUMMARY_TOKEN else tok.lower()
            if key in self.stoi:
                ids.append(self.stoi[key])
                offsets.append(m.span())
            else:
                for b in tok.encode("utf-8"):
                    ids.append(self.n_bytes_offset + b)
                    offsets.append(m.span())
        return ids, offsets

    def decode(self, ids: Sequence[int]) -> str:
        out: list[str] = []
        pending = bytearray()
        for i in ids:
            tok = self.itos[i]
            if self.n_bytes_offset <= i < self.n_bytes_offset + 256:
                pending.append(i - self.n_bytes_offset)
                continue
            if pending:
                out.append(pending.decode("utf-8", errors="replace"))
                pending = bytearray()
            if tok in (PAD, BOS, EOS, SEP):
                continue
            out.append(tok)
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
        text = " ".join(out)
        return re.sub(r" ([.,:;!?])", r"\1", text)


@dataclass
class TokenSequence:
    """Text token ids placed after ``n_visual`` visual tokens.

    ``spans`` and ``summary_pos`` index the full sequence (visual prefix
    included). ``response_start`` is the first response token; only
    response tokens are next-token targets.
    """

    ids: list[int]
    n_visual: int
    spans: list[tuple[int, int]] = field(default_factory=list)
    summary_pos: Optional[int] = None
    response_start: Optional[int] = None

    def __post_init__(self):
        prev_end = -1
        for s, e in self.spans:
            if not s < e or s < prev_end:
                raise ValueError(f"spans must be non-empty, disjoint and ordered: {self.spans}")
            prev_end = e

    def __len__(self):
        return self.n_visual + len(self.ids)


def _label_char_spans(instruction: str, labels: Sequence[str]) -> list[tuple[int, int]]:
    spans, pos = [], 0
    for lab in labels:
        start = instruction.index(lab, pos)
        spans.append((start, start + len(lab)))
        pos = start + len(lab)
    return spans


def build_sequence(tok: Tokenizer, sample: SftSample, n_visual: int, with_response: bool = True) -> TokenSequence:
    """Lay out ``<bos> task instruction <sep> response`` and record the instruction spans."""
    ids = [tok.id(BOS)]
    task_ids, _ = tok.encode(sample.task_description)
    ids += task_ids
    instr_start = len(ids)
    instr_ids, instr_offsets = tok.encode(sample.instruction)
    ids += instr_ids

    if sample.task_kind == "word_based":
        char_spans = _label_char_spans(sample.instruction, sample.candidate_labels)
    else:
        char_spans = [(0, len(sample.instruction))]
    spans = []
    for cs, ce in char_spans:
        idx = [i for i, (s, e) in enumerate(instr_offsets) if s < ce and e > cs]
        if not idx:
            raise ValueError(f"label span {sample.instruction[cs:ce]!r} produced no tokens")
        spans.append((n_visual + instr_start + idx[0], n_visual + instr_start + idx[-1] + 1))

    ids.append(tok.id(SEP))
    response_start = n_visual + len(ids)
    summary_pos = None
    if with_response:
        resp_ids, _ = tok.encode(sample.response)
        ids += resp_ids
        per = tok.id(SUMMARY_TOKEN)
        if resp_ids.count(per) != 1:
            raise ValueError("response must contain exactly one summary token")
        summary_pos = n_visual + ids.index(per)
    return TokenSequence(ids, n_visual, spans, summary_pos, response_start)


def build_caption_sequence(tok: Tokenizer, caption_response: str, n_visual: int) -> TokenSequence:
    """Caption pretraining layout: ``<bos> prompt <sep> response``."""
    ids = [tok.id(BOS)] + tok.encode(CAPTION_PROMPT)[0] + [tok.id(SEP)]
    response_start = n_visual + len(ids)
    resp_ids, _ = tok.encode(caption_response)
    ids += resp_ids
    per = tok.id(SUMMARY_TOKEN)
    summary_pos = n_visual + ids.index(per) if per in resp_ids else None
    return TokenSequence(ids, n_visual, [], summary_pos, response_start)


# --------------------------------------------------------------------------- vision

def letterbox(rgb: np.ndarray, size: int) -> tuple[torch.Tensor, float]:
    """Resize the longer side to ``size`` and zero-pad the shorter side (bottom/right).

    Returns a ``3 x size x size`` float tensor in [0, 1] and the resize scale.
    """
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 RGB image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    scale = size / max(h, w)
    t = torch.from_numpy(np.array(arr, dtype=np.float32)).permute(2, 0, 1).div(255.0)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (nh, nw) != (h, w):
        t = F.interpolate(t[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
    out = torch.zeros(3, size, size)
    out[:, :nh, :nw] = t
    return out, scale


@dataclass
class MultiScaleFeatures:
    """Three feature grids at strides 8, 16 and 32, plus the stride-4 map used for masks."""

    levels: list[torch.Tensor]             # each B x C x H_l x W_l
    stride4: Optional[torch.Tensor] = None
    strides: tuple = (8, 16, 32)

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(l.shape[-2:]) for l in self.levels]

    def positions(self) -> torch.Tensor:
        """Normalized cell centers for the flattened levels, ``sum(H_l W_l) x 2`` as (x, y)."""
        out = []
        for h, w in self.shapes:
            ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
            xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
            gy, gx = torch.meshgrid(ys, xs, indexing="ij")
            out.append(torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1))
        return torch.cat(out, dim=0).to(self.levels[0].dtype)

    def flatten(self, batch_index: int = 0) -> torch.Tensor:
        return torch.cat([l[batch_index].flatten(1).t() for l in self.levels], dim=0)

    def select(self, idx) -> "MultiScaleFeatures":
        return MultiScaleFeatures([l[idx] for l in self.levels],
                                  None if self.stride4 is None else self.stride4[idx], self.strides)


def _conv(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), nn.GroupNorm(8, cout), nn.ReLU())


class VisionEncoder(nn.Module):
    """Small strided conv pyramid."""

    def __init__(self, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.stem = nn.Sequential(_conv(3, dim // 2, 2), _conv(dim // 2, dim, 2))
        self.down = nn.ModuleList([_conv(dim, dim, 2) for _ in range(3)])
        self.register_buffer("mean", torch.tensor([0.5, 0.5, 0.5]).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor([0.25, 0.25, 0.25]).view(1, 3, 1, 1), persistent=False)

    def forward(self, images: torch.Tensor) -> MultiScaleFeatures:
        if images.dim() == 3:
            images = images[None]
        if images.shape[1] != 3:
            raise ValueError(f"expected RGB input with 3 channels, got {images.shape[1]}")
        x = (images - self.mean.to(images.dtype)) / self.std.to(images.dtype)
        s4 = self.stem(x)
        levels, x = [], s4
        for blk in self.down:
            x = blk(x)
            levels.append(x)
        return MultiScaleFeatures(levels, s4)


class Connector(nn.Module):
    """Affine projection of coarsest-level cells into the language model's embedding space."""

    def __init__(self, visual_dim: int = 64, lm_dim: int = 128):
        super().__init__()
        self.proj = nn.Linear(visual_dim, lm_dim)
        self.visual_dim = visual_dim

    def forward(self, level: torch.Tensor) -> torch.Tensor:
        """``B x C x H x W`` grid to ``B x HW x lm_dim`` visual tokens."""
        if level.shape[1] != self.visual_dim:
            raise ValueError(f"connector expects {self.visual_dim} channels, got {level.shape[1]}")
        return self.proj(level.flatten(2).transpose(1, 2))


# --------------------------------------------------------------------------- language model

class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=-1)
        q, k, v = (t.view(B, T, self.heads, C // self.heads).transpose(1, 2) for t in (q, k, v))
        att = (q @ k.transpose(-2, -1)) / math.sqrt(C // self.heads)
        future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(future, float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(B, T, C)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


@dataclass
class LmOutput:
    hidden: torch.Tensor   # B x T x d_lm
    logits: torch.Tensor   # B x T x V


class ToyLM(nn.Module):
    def __init__(self, vocab_size: int, dim: int = 128, layers: int = 2, heads: int = 4, context: int = 256):
        super().__init__()
        self.context = context
        self.tok_emb = nn.Embedding(vocab_size, dim)
        self.pos_emb = nn.Embedding(context, dim)
        self.blocks = nn.ModuleList([Block(dim, heads) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb.weight, std=0.02)

    def forward(self, visual: Optional[torch.Tensor], ids: torch.Tensor) -> LmOutput:
        """``visual``: B x Nv x d (or None); ``ids``: B x T token ids."""
        x = self.tok_emb(ids)
        if visual is not None:
            x = torch.cat([visual.to(x.dtype), x], dim=1)
        T = x.shape[1]
        if T > self.context:
            raise ContextOverflow(f"sequence length {T} exceeds context {self.context}")
        x = x + self.pos_emb(torch.arange(T, device=x.device))[None]
        for blk in self.blocks:
            x = blk(x)
        h = self.ln_f(x)
        return LmOutput(h, self.head(h))


def pad_ids(seqs: Sequence[TokenSequence], pad_id: int = 0) -> torch.Tensor:
    T = max(len(s.ids) for s in seqs)
    out = torch.full((len(seqs), T), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, :len(s.ids)] = torch.tensor(s.ids, dtype=torch.long)
    return out


def lm_forward(lm: ToyLM, visual: Optional[torch.Tensor], seqs) -> LmOutput:
    """Run a batch of sequences (right-padded; causality makes padding inert)."""
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    return lm(visual, pad_ids(seqs))


def instruction_embeddings(hidden: torch.Tensor, seq: TokenSequence) -> torch.Tensor:
    """Mean hidden state over each instruction span: ``n_spans x d``.

    ``hidden`` is one sample's ``T x d`` hidden states.
    """
    if not seq.spans:
        raise ValueError("sequence has no instruction spans")
    out = []
    for s, e in seq.spans:
        if e <= s:
            raise ValueError(f"empty span ({s}, {e})")
        out.append(hidden[s:e].mean(dim=0))
    return torch.stack(out)


def summary_hidden(hidden: torch.Tensor, seq: TokenSequence) -> torch.Tensor:
    if seq.summary_pos is None:
        raise ValueError("sequence has no summary token")
    return hidden[seq.summary_pos]


def response_targets(seq: TokenSequence, length: int) -> torch.Tensor:
    """Next-token labels for one sequence; -100 everywhere outside the response."""
    labels = torch.full((length,), -100, dtype=torch.long)
    full = [-100] * seq.n_visual + list(seq.ids)
    for p in range(seq.response_start - 1, len(full) - 1):
        labels[p] = full[p + 1]
    return labels


def lm_loss(logits: torch.Tensor, seqs) -> torch.Tensor:
    """Token-mean cross-entropy over response tokens only."""
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    if logits.dim() == 2:
        logits = logits[None]
    labels = torch.stack([response_targets(s, logits.shape[1]) for s in seqs])
    if (labels != -100).sum() == 0:
        raise ValueError("no response tokens to supervise")
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100)
