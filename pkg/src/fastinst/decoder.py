"""Dual-path Transformer decoder with per-layer prediction heads and GT-guided re-forward."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .matching import MatchingAssignment
from .tensor_ops import attention


@dataclass
class LayerPrediction:
    class_logits: torch.Tensor  # (B, Na, K+1)
    mask_logits: torch.Tensor  # (B, Na, L) over the flattened E3 grid
    layer_index: int


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, query, key, value, allow: Optional[torch.Tensor] = None, return_weights=False):
        q, k, v = self.split(self.q(query)), self.split(self.k(key)), self.split(self.v(value))
        mask = None if allow is None else allow[:, None]
        out, weights = attention(q, k, v, mask, return_weights=True)
        b, h, n, dh = out.shape
        out = self.out(out.transpose(1, 2).reshape(b, n, h * dh))
        return (out, weights) if return_weights else out


class FFN(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int, out: int, layers: int = 3):
        super().__init__()
        sizes = [dim] + [hidden] * (layers - 1) + [out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class DecoderLayer(nn.Module):
    """One pixel update (cross-attn + FFN) and one query update (masked attn + self-attn + FFN).

    Pre-norm residual sublayers; positional embeddings go on attention queries
    and keys only. Pixels never self-attend.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, order: str = "pixel-then-query"):
        super().__init__()
        if order not in ("pixel-then-query", "query-then-pixel"):
            raise ValueError(f"unknown update order {order!r}")
        self.order = order
        self.pixel_cross = MultiHeadAttention(dim, heads)
        self.pixel_ffn = FFN(dim, ffn_dim)
        self.query_cross = MultiHeadAttention(dim, heads)
        self.query_self = MultiHeadAttention(dim, heads)
        self.query_ffn = FFN(dim, ffn_dim)
        self.norms = nn.ModuleDict({name: nn.LayerNorm(dim, eps=1e-5) for name in (
            "pix_q", "pix_mem", "pix_ffn", "qry_q", "qry_mem", "qry_self", "qry_ffn")})
        self.last_query_weights: Optional[torch.Tensor] = None

    def update_pixels(self, x, q, pixel_pos, query_pos):
        n = self.norms
        mem = n["pix_mem"](q)
        x = x + self.pixel_cross(n["pix_q"](x) + pixel_pos, mem + query_pos, mem)
        return x + self.pixel_ffn(n["pix_ffn"](x))

    def update_queries(self, x, q, pixel_pos, query_pos, allow, record=False):
        n = self.norms
        mem = n["qry_mem"](x)
        out, weights = self.query_cross(n["qry_q"](q) + query_pos, mem + pixel_pos, mem, allow, return_weights=True)
        if record:
            self.last_query_weights = weights.detach()
        q = q + out
        h = n["qry_self"](q)
        q = q + self.query_self(h + query_pos, h + query_pos, h)
        return q + self.query_ffn(n["qry_ffn"](q))

    def forward(self, x, q, pixel_pos, query_pos, allow, record=False):
        if self.order == "pixel-then-query":
            x = self.update_pixels(x, q, pixel_pos, query_pos)
            q = self.update_queries(x, q, pixel_pos, query_pos, allow, record)
        else:
            q = self.update_queries(x, q, pixel_pos, query_pos, allow, record)
            x = self.update_pixels(x, q, pixel_pos, query_pos)
        return x, q


class PredictionHead(nn.Module):
    """Class and mask-embedding MLPs on IA-guided queries, linear projection on pixels."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.query_norm = nn.LayerNorm(dim, eps=1e-5)
        self.pixel_norm = nn.LayerNorm(dim, eps=1e-5)
        self.class_mlp = MLP(dim, dim, num_classes + 1)
        self.mask_mlp = MLP(dim, dim, dim)
        self.mask_proj = nn.Linear(dim, dim)

    def forward(self, layer: int, queries, pixel_feats, na: int) -> LayerPrediction:
        qn = self.query_norm(queries[:, :na])
        mask_embed = self.mask_mlp(qn)
        mask_feats = self.mask_proj(self.pixel_norm(pixel_feats))
        return LayerPrediction(self.class_mlp(qn), mask_embed @ mask_feats.transpose(1, 2), layer)


def build_attention_mask(prev: LayerPrediction, nb: int) -> torch.Tensor:
    """Allow-map (B, Na+Nb, L): predicted foreground for IA queries, everything for auxiliary ones."""
    fg = prev.mask_logits.detach() > 0  # sigmoid > 0.5
    fg = fg | ~fg.any(dim=-1, keepdim=True)
    b, _, l = fg.shape
    return torch.cat([fg, fg.new_ones(b, nb, l)], dim=1)


def guided_attention_mask(sigmas: Sequence[MatchingAssignment], gt_masks: Sequence[torch.Tensor],
                          na: int, nb: int, length: int) -> torch.Tensor:
    """Allow-map where matched queries see their ground-truth region and the rest see everything."""
    allow = torch.ones(len(sigmas), na + nb, length, dtype=torch.bool)
    for b, (sigma, masks) in enumerate(zip(sigmas, gt_masks)):
        for qi, tj in sigma.pairs:
            if qi >= na or qi < 0:
                raise ValueError(f"matched query index {qi} is not an IA-guided query (Na={na})")
            if tj >= len(masks):
                raise ValueError(f"matched target index {tj} out of range ({len(masks)} targets)")
            row = masks[tj].reshape(-1).bool()
            if row.any():
                allow[b, qi] = row
    return allow


@dataclass
class DecoderOutput:
    predictions: list[LayerPrediction]
    states: list[tuple[torch.Tensor, torch.Tensor]]  # (X_l, Q_l) for l = 0..D
    pixel_pos: torch.Tensor
    query_pos: torch.Tensor


class DualPathDecoder(nn.Module):
    def __init__(self, dim: int, num_classes: int, layers: int = 1, heads: int = 4,
                 ffn_dim: Optional[int] = None, order: str = "pixel-then-query"):
        super().__init__()
        if layers < 0:
            raise ValueError("decoder layer count must be >= 0")
        ffn_dim = ffn_dim or 4 * dim
        self.layers = nn.ModuleList(DecoderLayer(dim, heads, ffn_dim, order) for _ in range(layers))
        self.heads = nn.ModuleList(PredictionHead(dim, num_classes) for _ in range(layers + 1))

    def predict_heads(self, layer: int, queries, pixel_feats, na: int) -> LayerPrediction:
        return self.heads[layer](layer, queries, pixel_feats, na)

    def forward(self, x0, q0, pixel_pos, query_pos, na: int, record_attention=False) -> DecoderOutput:
        nb = q0.shape[1] - na
        pixel_pos = pixel_pos.expand(x0.shape[0], -1, -1)
        preds = [self.predict_heads(0, q0, x0, na)]
        states = [(x0, q0)]
        x, q = x0, q0
        for l, layer in enumerate(self.layers, start=1):
            allow = build_attention_mask(preds[-1], nb)
            x, q = layer(x, q, pixel_pos, query_pos, allow, record=record_attention)
            states.append((x, q))
            preds.append(self.predict_heads(l, q, x, na))
        return DecoderOutput(preds, states, pixel_pos, query_pos)

    def gt_guided_forward(self, layer: int, x, q, pixel_pos, query_pos, sigmas, gt_masks_e3, na: int):
        """Re-run decoder layer ``layer`` (1-based) on (x, q) with attention masks from matched GT."""
        if not 1 <= layer <= len(self.layers):
            raise ValueError(f"layer {layer} outside 1..{len(self.layers)}")
        nb = q.shape[1] - na
        allow = guided_attention_mask(sigmas, gt_masks_e3, na, nb, x.shape[1]).to(x.device)
        x2, q2 = self.layers[layer - 1](x, q, pixel_pos.expand(x.shape[0], -1, -1), query_pos, allow)
        return self.predict_heads(layer, q2, x2, na)
