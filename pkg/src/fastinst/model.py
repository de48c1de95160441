"""Full model: backbone -> PPM-FPN -> IA-guided queries -> dual-path decoder."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
from torch import nn

from .decoder import DecoderOutput, DualPathDecoder
from .pixel import Backbone, PPMFPN
from .queries import ActivationMap, AuxClassHead, PositionalEmbedding, select_ia_queries

LEVELS = {"E3": 0, "E4": 1, "E5": 2}


@dataclass
class ModelConfig:
    num_classes: int = 3
    dim: int = 32
    use_ppm: bool = True
    na: int = 16
    nb: int = 8
    pos: str = "learnable"
    source_level: str = "E4"
    local_max_first: bool = True
    layers: int = 1
    heads: int = 4
    ffn_dim: Optional[int] = None
    order: str = "pixel-then-query"

    def __post_init__(self):
        if self.source_level not in LEVELS:
            raise ValueError(f"source_level must be one of {sorted(LEVELS)}")
        if self.na < 1 or self.nb < 0:
            raise ValueError("need na >= 1 and nb >= 0")


@dataclass
class ModelOutput:
    activation: ActivationMap
    query_indices: torch.Tensor  # (B, Na) flat positions on the source grid
    source_hw: tuple[int, int]
    e3_hw: tuple[int, int]
    decoder: DecoderOutput

    @property
    def predictions(self):
        return self.decoder.predictions


class FastInst(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone()
        self.pixel_decoder = PPMFPN(self.backbone.out_channels, cfg.dim, cfg.use_ppm)
        self.aux_head = AuxClassHead(cfg.dim, cfg.num_classes)
        self.aux_queries = nn.Parameter(torch.randn(cfg.nb, cfg.dim) * 0.1)
        self.pos = PositionalEmbedding(cfg.dim, cfg.na, cfg.nb, cfg.pos)
        self.decoder = DualPathDecoder(cfg.dim, cfg.num_classes, cfg.layers, cfg.heads, cfg.ffn_dim, cfg.order)

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Named parameters bucketed by component; per-layer decoder blocks and heads are separate groups."""
        groups: dict[str, list] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            if parts[0] in ("decoder",):
                key = f"decoder.{parts[1]}.{parts[2]}"
            elif parts[0] in ("aux_queries", "pos"):
                key = "positional"
            else:
                key = parts[0]
            groups.setdefault(key, []).append((name, p))
        return groups

    def forward(self, images: torch.Tensor, record_attention: bool = False) -> ModelOutput:
        cfg = self.cfg
        feats = self.pixel_decoder(self.backbone(images))
        src = feats[LEVELS[cfg.source_level]]
        e3 = feats[0]
        act = self.aux_head(src)
        sh, sw = act.hw
        if cfg.na > sh * sw:
            raise ValueError(f"na={cfg.na} exceeds the {sh}x{sw} query grid")
        indices = torch.stack([
            torch.from_numpy(select_ia_queries(act.probs[b], sh, sw, cfg.na, cfg.local_max_first))
            for b in range(images.shape[0])
        ])
        src_flat = src.flatten(2).transpose(1, 2)
        ia = torch.gather(src_flat, 1, indices[..., None].expand(-1, -1, cfg.dim))
        q0 = torch.cat([ia, self.aux_queries[None].expand(images.shape[0], -1, -1)], dim=1)
        x0 = e3.flatten(2).transpose(1, 2)
        pixel_pos, query_pos = self.pos(e3.shape[-2:], (sh, sw), indices)
        out = self.decoder(x0, q0, pixel_pos, query_pos, cfg.na, record_attention)
        return ModelOutput(act, indices, (sh, sw), tuple(e3.shape[-2:]), out)

    def config_dict(self) -> dict:
        return asdict(self.cfg)
