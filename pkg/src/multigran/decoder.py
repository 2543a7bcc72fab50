"""Multi-granularity decoder: deformable cross-attention over the feature pyramid with
shared similarity, box and mask heads applied after every layer."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .backbones import MultiScaleFeatures
from .queries import QuerySet, inverse_sigmoid


def bilinear_sample(value: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Sample a ``C x H x W`` grid at normalized ``M x 2`` (x, y) locations; returns ``M x C``.

    Cell ``(i, j)`` has its center at ``((j + 0.5) / W, (i + 0.5) / H)``; outside the grid the
    value is zero-padded.
    """
    grid = (2.0 * loc - 1.0).view(1, 1, -1, 2).to(value.dtype)
    out = F.grid_sample(value[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return out[0, :, 0].t()


class MLP(nn.Module):
    def __init__(self, din, dhidden, dout, layers):
        super().__init__()
        dims = [din] + [dhidden] * (layers - 1) + [dout]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.relu(x)
        return x


def sine_embed(boxes: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of each of the four box coordinates, ``Q x 4 * dim``."""
    half = dim // 2
    freq = 10000 ** (2 * (torch.arange(half, dtype=boxes.dtype) // 2) / half)
    x = boxes[..., None] * (2 * math.pi) / freq
    emb = torch.stack([x[..., 0::2].sin(), x[..., 1::2].cos()], dim=-1).flatten(-2)
    return emb.flatten(-2)


class MSDeformAttn(nn.Module):
    """Each query samples ``points`` offsets per level and head around its reference box."""

    def __init__(self, dim: int, levels: int = 3, heads: int = 4, points: int = 4):
        super().__init__()
        self.dim, self.levels, self.heads, self.points = dim, levels, heads, points
        self.sampling_offsets = nn.Linear(dim, heads * levels * points * 2)
        self.attention_weights = nn.Linear(dim, heads * levels * points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset()

    def _reset(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        theta = torch.arange(self.heads, dtype=torch.float32) * (2.0 * math.pi / self.heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.heads, 1, 1, 2).repeat(1, self.levels, self.points, 1)
        for i in range(self.points):
            grid[:, :, i, :] *= i + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.view(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling_locations(self, query: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        Q = query.shape[0]
        off = self.sampling_offsets(query).view(Q, self.heads, self.levels, self.points, 2)
        ref = reference[:, None, None, None, :]
        return ref[..., :2] + off / self.points * ref[..., 2:] * 0.5

    def forward(self, query: torch.Tensor, reference: torch.Tensor, values: list[torch.Tensor]) -> torch.Tensor:
        """``query``: Q x D; ``reference``: Q x 4; ``values``: per-level D x H x W maps."""
        Q = query.shape[0]
        H, P, dh = self.heads, self.points, self.dim // self.heads
        loc = self.sampling_locations(query, reference)
        w = self.attention_weights(query).view(Q, H, self.levels * P).softmax(-1).view(Q, H, self.levels, P)
        out = query.new_zeros(H, dh, Q)
        for l, v in enumerate(values):
            h, wdt = v.shape[-2:]
            vp = self.value_proj(v.flatten(1).t()).t().reshape(H, dh, h, wdt)
            grid = (2.0 * loc[:, :, l] - 1.0).permute(1, 0, 2, 3)          # H x Q x P x 2
            s = F.grid_sample(vp, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
            out = out + (s * w[:, :, l].permute(1, 0, 2)[:, None]).sum(-1)  # H x dh x Q
        return self.output_proj(out.permute(2, 0, 1).reshape(Q, self.dim))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, qk: torch.Tensor, v: torch.Tensor, blocked: Optional[torch.Tensor] = None) -> torch.Tensor:
        N, C = v.shape
        dh = C // self.heads
        q = self.q(qk).view(N, self.heads, dh).transpose(0, 1)
        k = self.k(qk).view(N, self.heads, dh).transpose(0, 1)
        vv = self.v(v).view(N, self.heads, dh).transpose(0, 1)
        att = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if blocked is not None:
            att = att.masked_fill(blocked, float("-inf"))
        y = att.softmax(-1) @ vv
        return self.out(y.transpose(0, 1).reshape(N, C))


class DecoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int = 4, levels: int = 3, points: int = 4, ffn: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.cross = MSDeformAttn(dim, levels, heads, points)
        self.norm2 = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn * dim), nn.ReLU(), nn.Linear(ffn * dim, dim))
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, q, pos, reference, values, blocked=None):
        q = q + self.cross(self.norm1(q) + pos, reference, values)
        h = self.norm2(q)
        q = q + self.self_attn(h + pos, h, blocked)
        return q + self.ffn(self.norm3(q))


class SimilarityHead(nn.Module):
    """Cross-modal classification: scaled cosine between projected queries and aligned text."""

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(dim, dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(10.0)))
        self.no_object = nn.Parameter(torch.tensor(0.0))
        self.sentence_bias = nn.Parameter(torch.tensor(0.0))

    def forward(self, query: torch.Tensor, text: torch.Tensor, mode: str) -> torch.Tensor:
        if text.shape[0] == 0:
            raise ValueError("empty embedding list")
        sim = self.logit_scale.exp() * (F.normalize(self.proj(query), dim=-1) @ F.normalize(text, dim=-1).t())
        if mode == "word":
            return torch.cat([sim, self.no_object.to(sim.dtype).expand(sim.shape[0], 1)], dim=-1)
        if mode == "sentence":
            return sim[:, 0] + self.sentence_bias
        raise ValueError(f"unknown mode {mode!r}")


class BoxHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mlp = MLP(dim, dim, 4, 3)
        nn.init.zeros_(self.mlp.layers[-1].weight)
        nn.init.zeros_(self.mlp.layers[-1].bias)

    def forward(self, query: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        return (inverse_sigmoid(reference) + self.mlp(query)).sigmoid()


class MaskHead(nn.Module):
    def __init__(self, dim: int, mask_dim: int):
        super().__init__()
        self.mlp = MLP(dim, dim, mask_dim, 3)

    def forward(self, query: torch.Tensor, pixel_map: torch.Tensor) -> torch.Tensor:
        """``Q x D`` queries against a ``C x h x w`` pixel embedding map."""
        return torch.einsum("qc,chw->qhw", self.mlp(query), pixel_map)


class PixelDecoder(nn.Module):
    """Top-down fusion of the pyramid; emits memory levels (strides 8/16/32) and the stride-4 map."""

    def __init__(self, visual_dim: int, dim: int, mask_dim: int):
        super().__init__()
        self.lateral = nn.ModuleList([nn.Conv2d(visual_dim, dim, 1) for _ in range(4)])
        self.smooth = nn.ModuleList([
            nn.Sequential(nn.Conv2d(dim, dim, 3, 1, 1), nn.GroupNorm(8, dim), nn.ReLU()) for _ in range(4)])
        self.mask_out = nn.Conv2d(dim, mask_dim, 1)

    def forward(self, feats: MultiScaleFeatures):
        maps = [feats.stride4, *feats.levels]       # strides 4, 8, 16, 32
        x = None
        outs = [None] * 4
        for i in (3, 2, 1, 0):
            lat = self.lateral[i](maps[i])
            if x is not None:
                lat = lat + F.interpolate(x, size=lat.shape[-2:], mode="bilinear", align_corners=False)
            x = self.smooth[i](lat)
            outs[i] = x
        return outs[1:], self.mask_out(outs[0])


@dataclass
class PredictionSet:
    logits: torch.Tensor      # word: Q x (n + 1); sentence: Q
    boxes: torch.Tensor       # Q x 4
    masks: torch.Tensor       # Q x h x w
    mode: str

    def __len__(self):
        return self.boxes.shape[0]


@dataclass
class DenoisingBatch:
    reference: torch.Tensor   # M x 4, noised boxes
    labels: torch.Tensor      # M, possibly flipped labels used to build content
    gt_index: torch.Tensor    # M, source ground truth (fixed assignment)
    group: torch.Tensor       # M, group id in 1..groups

    def __len__(self):
        return self.reference.shape[0]

    def attention_mask(self, num_ordinary: int) -> torch.Tensor:
        """Boolean ``(Q + M) x (Q + M)`` matrix, True where attention is forbidden.

        Ordinary queries form group 0; every denoising group is isolated from
        the others and from group 0.
        """
        g = torch.cat([torch.zeros(num_ordinary, dtype=torch.long), self.group])
        return g[:, None] != g[None, :]


def build_denoising(gt_boxes: torch.Tensor, gt_labels: torch.Tensor, num_labels: int, groups: int = 2,
                    box_noise: float = 0.4, label_noise: float = 0.2,
                    generator: Optional[torch.Generator] = None) -> DenoisingBatch:
    """Noised copies of the ground truth, ``groups`` times over.

    Centers move by up to ``box_noise / 2`` of the box size, sizes scale by a
    factor in ``[1 - box_noise, 1 + box_noise]``, and each label is replaced
    by a uniformly drawn one with probability ``label_noise``.
    """
    G = gt_boxes.shape[0]
    dtype = gt_boxes.dtype
    if G == 0 or groups == 0:
        z = gt_boxes.new_zeros(0, 4)
        e = torch.zeros(0, dtype=torch.long)
        return DenoisingBatch(z, e, e, e)
    boxes = gt_boxes.detach().repeat(groups, 1)
    labels = gt_labels.repeat(groups)
    gt_index = torch.arange(G).repeat(groups)
    group = torch.arange(1, groups + 1).repeat_interleave(G)
    u = torch.rand(boxes.shape, generator=generator, dtype=torch.float64).to(dtype) * 2 - 1
    wh = boxes[:, 2:]
    centers = boxes[:, :2] + u[:, :2] * box_noise * 0.5 * wh
    sizes = wh * (1 + u[:, 2:] * box_noise)
    noised = torch.cat([centers.clamp(0.0, 1.0), sizes.clamp(1e-3, 1.0)], dim=-1)
    flip = torch.rand(labels.shape, generator=generator, dtype=torch.float64) < label_noise
    rand_labels = torch.randint(0, max(num_labels, 1), labels.shape, generator=generator)
    labels = torch.where(flip, rand_labels, labels)
    return DenoisingBatch(noised, labels, gt_index, group)


@dataclass
class DecoderOutput:
    layers: list                          # PredictionSet per decoder layer
    initial: Optional[PredictionSet] = None
    dn_layers: list = field(default_factory=list)
    dn: Optional[DenoisingBatch] = None

    @property
    def final(self) -> PredictionSet:
        return self.layers[-1]


class MultiGranularityDecoder(nn.Module):
    def __init__(self, visual_dim: int = 64, dim: int = 64, num_layers: int = 3, heads: int = 4,
                 points: int = 4, levels: int = 3, mask_dim: Optional[int] = None):
        super().__init__()
        mask_dim = mask_dim or dim
        self.dim = dim
        self.num_layers = num_layers
        self.pixel_decoder = PixelDecoder(visual_dim, dim, mask_dim)
        self.layers = nn.ModuleList([DecoderLayer(dim, heads, levels, points) for _ in range(num_layers)])
        self.init_norm = nn.LayerNorm(dim)
        self.ref_point_head = MLP(4 * (dim // 2), dim, dim, 2)
        self.similarity_head = SimilarityHead(dim)
        self.box_head = BoxHead(dim)
        self.mask_head = MaskHead(dim, mask_dim)
        self.label_enc = nn.Linear(dim, dim)

    def encode_memory(self, feats: MultiScaleFeatures):
        """Fused memory levels ``B x D x H_l x W_l`` and the ``B x C x H/4 x W/4`` pixel map."""
        return self.pixel_decoder(feats)

    def predict(self, q: torch.Tensor, reference: torch.Tensor, pixel_map: torch.Tensor,
                text: torch.Tensor, mode: str, norm: nn.Module, init_logits=None) -> PredictionSet:
        h = norm(q)
        logits = self.similarity_head(h, text, mode)
        if init_logits is not None:
            n = init_logits.shape[0]
            if mode == "word":
                sel = torch.cat([init_logits, logits[:n, -1:]], dim=-1)
            else:
                sel = init_logits[:, 0] + self.similarity_head.sentence_bias
            logits = torch.cat([sel, logits[n:]], dim=0)
        boxes = self.box_head(h, reference)
        masks = self.mask_head(h, pixel_map)
        return PredictionSet(logits, boxes, masks, mode)

    def _run(self, q, reference, values, pixel_map, text, mode, blocked=None, init_logits=None,
             with_initial=True):
        initial = None
        if with_initial:
            initial = self.predict(q, reference, pixel_map, text, mode, self.init_norm, init_logits)
            reference = initial.boxes
        preds = []
        for layer in self.layers:
            pos = self.ref_point_head(sine_embed(reference, self.dim))
            q = layer(q, pos, reference, values, blocked)
            p = self.predict(q, reference, pixel_map, text, mode, layer.out_norm)
            preds.append(p)
            reference = p.boxes
        return initial, preds

    def forward(self, qs: QuerySet, values: list[torch.Tensor], pixel_map: torch.Tensor,
                text: torch.Tensor, mode: str, dn: Optional[DenoisingBatch] = None,
                training: bool = True) -> DecoderOutput:
        """Decode one sample.

        ``values`` are the sample's memory levels (``D x H_l x W_l``) and
        ``pixel_map`` its ``C x h x w`` mask embedding map. Denoising queries
        run as a separate block so ordinary outputs do not depend on them.
        """
        initial, preds = self._run(qs.content, qs.reference, values, pixel_map, text, mode,
                                   init_logits=qs.init_logits)
        if not training:
            return DecoderOutput([preds[-1]])
        out = DecoderOutput(preds, initial)
        if dn is not None and len(dn) > 0:
            labels = dn.labels if mode == "word" else torch.zeros_like(dn.labels)
            content = self.label_enc(text[labels])
            blocked = dn.attention_mask(0)
            _, dn_preds = self._run(content, dn.reference.to(content.dtype), values, pixel_map, text, mode,
                                    blocked=blocked[None], with_initial=False)
            out.dn_layers = dn_preds
            out.dn = dn
        return out
