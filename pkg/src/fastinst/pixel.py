"""Toy backbone (C3/C4/C5) and the PPM-FPN pixel decoder (E3/E4/E5)."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .tensor_ops import bilinear_resize, layer_norm

BACKBONE_WIDTHS = (16, 32, 64, 128)
PPM_BINS = (1, 2, 3, 6)


class ChannelNorm(nn.Module):
    """Layer norm over the channel axis of (B,C,H,W)."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm(x.permute(0, 2, 3, 1), self.weight, self.bias).permute(0, 3, 1, 2)


def conv_block(cin, cout, stride):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1), ChannelNorm(cout), nn.GELU())


class Backbone(nn.Module):
    """Stem at stride 4, then three stride-2 stages emitting C3, C4, C5."""

    def __init__(self, widths=BACKBONE_WIDTHS):
        super().__init__()
        w0, w3, w4, w5 = widths
        self.stem = nn.Sequential(conv_block(3, w0, 2), conv_block(w0, w0, 2))
        self.stages = nn.ModuleList([
            nn.Sequential(conv_block(cin, cout, 2), conv_block(cout, cout, 1))
            for cin, cout in ((w0, w3), (w3, w4), (w4, w5))
        ])
        self.out_channels = (w3, w4, w5)

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {(h, w)} is not divisible by 32")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class PyramidPooling(nn.Module):
    def __init__(self, dim: int, bins=PPM_BINS):
        super().__init__()
        branch = max(dim // 4, 1)
        self.bins = bins
        self.branches = nn.ModuleList([nn.Conv2d(dim, branch, 1) for _ in bins])
        self.fuse = nn.Conv2d(dim + branch * len(bins), dim, 1)

    def pooled(self, x):
        return [F.adaptive_avg_pool2d(x, b) for b in self.bins]

    def forward(self, x):
        h, w = x.shape[-2:]
        outs = [x]
        for conv, p in zip(self.branches, self.pooled(x)):
            outs.append(bilinear_resize(F.gelu(conv(p)), h, w))
        return F.gelu(self.fuse(torch.cat(outs, dim=1)))


class PPMFPN(nn.Module):
    """1x1 laterals, optional pyramid pooling on the top level, top-down add, 3x3 smoothing."""

    def __init__(self, in_channels, dim: int, use_ppm: bool = True):
        super().__init__()
        self.use_ppm = use_ppm
        self.lateral = nn.ModuleList([nn.Conv2d(c, dim, 1) for c in in_channels])
        self.ppm = PyramidPooling(dim) if use_ppm else None
        self.smooth = nn.ModuleList([conv_block(dim, dim, 1) for _ in in_channels])

    def forward(self, feats):
        c3, c4, c5 = feats
        p5 = self.lateral[2](c5)
        if self.ppm is not None:
            p5 = self.ppm(p5)
        p4 = self.lateral[1](c4) + bilinear_resize(p5, *c4.shape[-2:])
        p3 = self.lateral[0](c3) + bilinear_resize(p4, *c3.shape[-2:])
        return [self.smooth[0](p3), self.smooth[1](p4), self.smooth[2](p5)]
