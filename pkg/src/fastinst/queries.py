"""Auxiliary classification head, IA-guided query selection and positional embeddings."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tensor_ops import bilinear_resize, softmax_lastdim


@dataclass
class ActivationMap:
    logits: torch.Tensor  # (B, P, K+1), last column is "no object"
    probs: torch.Tensor
    hw: tuple[int, int]


class AuxClassHead(nn.Module):
    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, 3, padding=1)
        self.conv2 = nn.Conv2d(dim, num_classes + 1, 1)

    def forward(self, feat) -> ActivationMap:
        logits = self.conv2(F.gelu(self.conv1(feat)))
        b, c, h, w = logits.shape
        logits = logits.flatten(2).transpose(1, 2)
        return ActivationMap(logits, softmax_lastdim(logits), (h, w))


def foreground_scores(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per pixel: best real class (0-based) and its probability. The last column is excluded."""
    fg = probs[:, :-1]
    k = fg.argmax(axis=1)
    return k, fg[np.arange(len(k)), k]


def local_maximum_mask(probs: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixels whose best-class probability is >= that class's value at all 8 neighbours."""
    k, score = foreground_scores(probs)
    planes = torch.from_numpy(np.ascontiguousarray(probs[:, :-1].T.reshape(-1, h, w)))
    neigh = F.max_pool2d(planes[None], 3, stride=1, padding=1)[0].numpy()  # center included: harmless
    neigh_at = neigh.reshape(neigh.shape[0], -1)[k, np.arange(h * w)]
    return score >= neigh_at


def select_ia_queries(probs, h: int, w: int, na: int, local_max_first: bool = True) -> np.ndarray:
    """Flat pixel indices of the selected queries, in priority order.

    Local maxima first by descending score, then the best remaining pixels;
    ties go to the smaller flat index.
    """
    p = probs.detach().cpu().numpy() if torch.is_tensor(probs) else np.asarray(probs)
    if p.shape[0] != h * w:
        raise ValueError("probability rows do not match the grid")
    _, score = foreground_scores(p)
    order = np.argsort(-score, kind="stable")
    if local_max_first:
        cand = local_maximum_mask(p, h, w)
        order = np.concatenate([order[cand[order]], order[~cand[order]]])
    return order[:min(na, h * w)]


def sine_embedding(h: int, w: int, dim: int) -> torch.Tensor:
    """Non-parametric 2-D sinusoidal embedding on normalized cell centers, shape (h*w, dim)."""
    if dim % 4:
        raise ValueError("sine embedding needs dim divisible by 4")
    half = dim // 2
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    dim_t = 10000 ** (2 * (torch.arange(half) // 2) / half)

    def enc(v):
        t = v[:, None] / dim_t
        return torch.stack([t[:, 0::2].sin(), t[:, 1::2].cos()], dim=2).flatten(1)

    ey, ex = enc(ys), enc(xs)
    return torch.cat([ey[:, None, :].expand(h, w, half), ex[None, :, :].expand(h, w, half)], dim=2).reshape(h * w, dim)


class PositionalEmbedding(nn.Module):
    """Learnable S x S table resized to the pixel and query grids, plus auxiliary-query rows."""

    def __init__(self, dim: int, na: int, nb: int, kind: str = "learnable"):
        super().__init__()
        if kind not in ("learnable", "sine"):
            raise ValueError(f"unknown positional embedding {kind!r}")
        self.kind = kind
        self.dim = dim
        self.size = max(1, int(round(math.sqrt(na))))
        self.table = nn.Parameter(torch.randn(self.size, self.size, dim) * 0.1) if kind == "learnable" else None
        self.aux_pos = nn.Parameter(torch.randn(nb, dim) * 0.1)

    def grid(self, h: int, w: int) -> torch.Tensor:
        if self.kind == "sine":
            return sine_embedding(h, w, self.dim).to(self.aux_pos.dtype)
        return bilinear_resize(self.table.permute(2, 0, 1), h, w).flatten(1).T

    def forward(self, pixel_hw, query_hw, indices: torch.Tensor):
        """indices: (B, Na) flat positions on the query grid. Returns (L,dim), (B,N,dim)."""
        pixel_pos = self.grid(*pixel_hw)
        qgrid = self.grid(*query_hw)
        ia = qgrid[indices]
        aux = self.aux_pos[None].expand(indices.shape[0], -1, -1)
        return pixel_pos, torch.cat([ia, aux], dim=1)
