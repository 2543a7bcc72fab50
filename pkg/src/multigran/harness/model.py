"""The assembled perception model: encoder, connector, language model, query generator, decoder."""
from __future__ import annotations

from typing import Optional

import torch
from torch import nn

from ..backbones import (Connector, MultiScaleFeatures, TokenSequence, ToyLM, VisionEncoder,
                         instruction_embeddings, summary_hidden)
from ..decoder import DecoderOutput, DenoisingBatch, MultiGranularityDecoder
from ..queries import QueryGenerator
from .config import COMPONENTS, ModelConfig


class PerceptionModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.encoder = VisionEncoder(cfg.visual_dim)
        self.connector = Connector(cfg.visual_dim, cfg.lm_dim)
        self.lm = ToyLM(vocab_size, cfg.lm_dim, cfg.lm_layers, cfg.lm_heads, cfg.context)
        self.queries = QueryGenerator(cfg.lm_dim, cfg.dim, cfg.num_queries, cfg.num_stuff,
                                      query_selection=cfg.query_selection)
        self.decoder = MultiGranularityDecoder(cfg.visual_dim, cfg.dim, cfg.decoder_layers, cfg.heads,
                                               cfg.points, levels=3)

    def component(self, name: str) -> nn.Module:
        if name not in COMPONENTS:
            raise KeyError(name)
        return getattr(self, name)

    def set_trainable(self, names) -> list[nn.Parameter]:
        """Freeze everything except the named components; returns the trainable parameters."""
        for p in self.parameters():
            p.requires_grad_(False)
        params = []
        for n in names:
            for p in self.component(n).parameters():
                p.requires_grad_(True)
                params.append(p)
        return params

    def n_visual(self, image_size: int) -> int:
        side = image_size // 32
        return side * side

    def visual_tokens(self, feats: MultiScaleFeatures) -> torch.Tensor:
        return self.connector(feats.levels[-1])

    def perceive(self, hidden: torch.Tensor, seq: TokenSequence, memory: list[torch.Tensor],
                 pixel_map: torch.Tensor, mode: str, panoptic: bool,
                 dn: Optional[DenoisingBatch] = None, training: bool = True) -> DecoderOutput:
        """Queries and decoding for one sample.

        ``hidden`` is the sample's ``T x d_lm`` language-model output,
        ``memory`` its fused levels (``D x H x W`` each) and ``pixel_map`` the
        ``C x h x w`` mask embedding map.
        """
        text = self.queries.align_text(instruction_embeddings(hidden, seq))
        flat = torch.cat([m.flatten(1).t() for m in memory], dim=0)
        positions = cell_positions(memory)
        sizes = [m.shape[-2] * m.shape[-1] for m in memory]
        qs = self.queries(summary_hidden(hidden, seq), flat, positions, text, sizes, panoptic)
        return self.decoder(qs, memory, pixel_map, text, mode, dn, training)


def cell_positions(levels: list[torch.Tensor]) -> torch.Tensor:
    """Normalized (x, y) cell centers of ``C x H x W`` levels, flattened in order."""
    return MultiScaleFeatures([l[None] for l in levels]).positions()
