"""Differentiable primitives shared by every model component.

Autograd comes from torch; the functions here pin down the conventions the rest
of the package relies on (blocked-logit sentinel, resize convention, shape
validation) and provide an independent central-difference gradient checker.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F

BLOCKED = -1e9
LAYER_NORM_EPS = 1e-5


def softmax_lastdim(x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] < 1:
        raise ValueError("softmax over an empty last axis")
    if torch.isnan(x).any():
        raise ValueError("softmax input contains NaN")
    shifted = x - x.max(dim=-1, keepdim=True).values.detach()
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def conv2d(x: torch.Tensor, w: torch.Tensor, bias: Optional[torch.Tensor] = None,
           stride: int = 1, pad: Optional[int] = None) -> torch.Tensor:
    """Cross-correlation on (C,H,W) or (B,C,H,W) input with a (Cout,Cin,k,k) kernel."""
    if w.dim() != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise ValueError(f"kernel must be (Cout,Cin,k,k) with k in {{1,3}}, got {tuple(w.shape)}")
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"input {tuple(x.shape)} incompatible with kernel {tuple(w.shape)}")
    if pad is None:
        pad = w.shape[2] // 2
    out = F.conv2d(x, w, bias, stride=stride, padding=pad)
    return out.squeeze(0) if unbatched else out


def bilinear_resize(x: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resize of (C,H,W) or (B,C,H,W); half-pixel centers, align_corners=False."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    if x.dim() not in (3, 4):
        raise ValueError(f"expected (C,H,W) or (B,C,H,W), got {tuple(x.shape)}")
    if x.shape[-2:] == (out_h, out_w):
        return x
    unbatched = x.dim() == 3
    if unbatched:
        x = x.unsqueeze(0)
    out = F.interpolate(x, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return out.squeeze(0) if unbatched else out


def layer_norm(x: torch.Tensor, weight: Optional[torch.Tensor] = None,
               bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, LAYER_NORM_EPS)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              mask: Optional[torch.Tensor] = None, return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    ``mask`` is a boolean allow-map broadcastable to (..., Nq, Nk); blocked
    logits get the ``BLOCKED`` sentinel. A row with nothing allowed is a caller
    bug (the decoder applies its fallback first), so it is rejected here.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention shape mismatch q={tuple(q.shape)} k={tuple(k.shape)} v={tuple(v.shape)}")
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is not None:
        if not mask.any(dim=-1).all():
            raise ValueError("attention mask has an all-blocked row; apply the fallback first")
        logits = logits.masked_fill(~mask, BLOCKED)
    weights = softmax_lastdim(logits)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_coordinate: tuple[int, int]
    passed: bool
    checked: int = 0
    message: str = ""


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def finite_diff_gradcheck(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                          eps: float = 1e-4, tol: float = 1e-4,
                          coords: Optional[Sequence[Sequence[int]]] = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``coords[i]`` selects flat indices of ``params[i]`` to probe (all when
    omitted). Parameters are perturbed in place and restored afterwards.
    """
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("gradient checks require float64 parameters")
        p.grad = None
    out = f()
    if out.numel() != 1 or not torch.isfinite(out).all():
        return GradCheckReport(math.inf, (-1, -1), False, 0, "f is not a finite scalar")
    grads = torch.autograd.grad(out, list(params), allow_unused=True)

    worst, worst_at, checked = 0.0, (-1, -1), 0
    for pi, (p, g) in enumerate(zip(params, grads)):
        flat_grad = torch.zeros(p.numel(), dtype=p.dtype) if g is None else g.reshape(-1)
        idx = range(p.numel()) if coords is None else coords[pi]
        flat = p.data.view(-1)
        for j in idx:
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + eps
                fp = f().item()
                flat[j] = orig - eps
                fm = f().item()
                flat[j] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return GradCheckReport(math.inf, (pi, j), False, checked, "non-finite f under perturbation")
            err = relative_error(flat_grad[j].item(), (fp - fm) / (2 * eps))
            checked += 1
            if err > worst:
                worst, worst_at = err, (pi, j)
    return GradCheckReport(worst, worst_at, worst <= tol, checked)
