"""Matching costs and training objectives.

Total objective = instance-activation loss + deep-supervised prediction loss
(+ GT-mask-guided loss). Class columns are 0-based real classes followed by
the "no object" column; target class ids are 1-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import LayerPrediction
from .matching import MatchingAssignment, hungarian_match

LEVEL_STRIDES = {"E3": 8, "E4": 16, "E5": 32}


@dataclass
class LossWeights:
    cls: float = 2.0
    ce: float = 5.0
    dice: float = 5.0
    cls_q: float = 20.0
    loc: float = 1000.0
    no_object: float = 0.1
    dice_smooth: float = 1.0

    def __post_init__(self):
        for name in ("cls", "ce", "dice", "cls_q", "loc", "no_object"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass
class LossSwitches:
    use_gt_guidance: bool = True
    use_location_cost: bool = True
    use_bipartite: bool = True


# -- target preparation ----------------------------------------------------

def downsample_masks(masks: torch.Tensor, stride: int, mode: str) -> torch.Tensor:
    """(n,H,W) bool -> (n,H/s,W/s) bool. ``max``: any positive pixel; ``area``: mean > 0.5."""
    if masks.shape[0] == 0:
        h, w = masks.shape[-2:]
        return torch.zeros(0, h // stride, w // stride, dtype=torch.bool)
    m = masks.float()[:, None]
    if mode == "max":
        return F.max_pool2d(m, stride)[:, 0] > 0
    if mode == "area":
        return F.avg_pool2d(m, stride)[:, 0] > 0.5
    raise ValueError(mode)


@dataclass
class PreparedTargets:
    classes: torch.Tensor  # (n,) int64, 1-based
    masks_source: torch.Tensor  # (n, Hs*Ws) bool, max-pooled, for location cost
    masks_loss: torch.Tensor  # (n, L) float, area-pooled to E3, for mask losses
    masks_attn: torch.Tensor  # (n, L) bool, max-pooled to E3, for guided attention
    semantic_source: torch.Tensor = field(default=None)  # (Hs*Ws,) 0-based class or K for background


def prepare_targets(classes: Sequence[int], masks: np.ndarray, source_level: str, num_classes: int) -> PreparedTargets:
    m = torch.as_tensor(np.asarray(masks, dtype=bool)).reshape(-1, *np.shape(masks)[-2:])
    stride = LEVEL_STRIDES[source_level]
    src = downsample_masks(m, stride, "max")
    cov = F.avg_pool2d(m.float()[:, None], stride)[:, 0] if len(m) else None
    hs, ws = src.shape[-2:]
    semantic = torch.full((hs * ws,), num_classes, dtype=torch.long)
    if len(m):
        best, arg = cov.flatten(1).max(dim=0)
        cls = torch.as_tensor(list(classes), dtype=torch.long)
        semantic = torch.where(best >= 0.5, cls[arg] - 1, semantic)
    return PreparedTargets(
        torch.as_tensor(list(classes), dtype=torch.long),
        src.flatten(1),
        downsample_masks(m, 8, "area").flatten(1).float(),
        downsample_masks(m, 8, "max").flatten(1),
        semantic,
    )


# -- elementary terms ------------------------------------------------------

def targets_from_sample(sample, source_level: str, num_classes: int) -> PreparedTargets:
    h, w = sample.size
    masks = np.stack([t.mask for t in sample.instances]) if sample.instances else np.zeros((0, h, w), dtype=bool)
    return prepare_targets([t.class_id for t in sample.instances], masks, source_level, num_classes)


def location_cost(query_indices: torch.Tensor, masks_source: torch.Tensor) -> torch.Tensor:
    """(Nq, n) in {0,1}: 0 iff the query's grid cell lies in the (max-pooled) target region."""
    if masks_source.shape[0] == 0:
        return torch.zeros(len(query_indices), 0)
    inside = masks_source[:, query_indices].T
    return (~inside).double()


def weighted_ce(logits: torch.Tensor, target: torch.Tensor, no_object_weight: float) -> torch.Tensor:
    """Cross-entropy with the last ("no object") column down-weighted, normalized by total weight."""
    k1 = logits.shape[-1]
    weight = torch.ones(k1, dtype=logits.dtype)
    weight[-1] = no_object_weight
    return F.cross_entropy(logits, target, weight=weight)


def dice_loss(mask_logits: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Per-pair dice loss, rows matched elementwise: (n,L),(n,L) -> (n,)."""
    p = mask_logits.sigmoid()
    num = 2 * (p * targets).sum(-1) + smooth
    den = p.sum(-1) + targets.sum(-1) + smooth
    return 1 - num / den


def bce_loss(mask_logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(mask_logits, targets, reduction="none").mean(-1)


def pairwise_mask_costs(mask_logits: torch.Tensor, targets: torch.Tensor, smooth: float = 1.0):
    """All-pairs BCE and dice between (q,L) logits and (n,L) binary targets."""
    x = mask_logits.detach().double()
    t = targets.double()
    length = x.shape[-1]
    bce = (F.softplus(x).sum(-1, keepdim=True) - x @ t.T) / length
    p = x.sigmoid()
    dice = 1 - (2 * p @ t.T + smooth) / (p.sum(-1, keepdim=True) + t.sum(-1)[None] + smooth)
    return bce, dice


# -- instance activation loss ----------------------------------------------

def activation_matching_cost(probs: torch.Tensor, targets: PreparedTargets, w: LossWeights,
                             use_location_cost: bool = True) -> torch.Tensor:
    """(P, n) cost: negative class probability plus weighted location cost, over all source pixels."""
    p = probs.detach().double()
    cost = -p[:, targets.classes - 1]
    if use_location_cost:
        cost = cost + w.loc * location_cost(torch.arange(p.shape[0]), targets.masks_source)
    return cost


def instance_activation_loss(logits: torch.Tensor, probs: torch.Tensor, targets: PreparedTargets,
                             w: LossWeights, switches: LossSwitches = LossSwitches()):
    """Returns (weighted loss, assignment, matched location cost)."""
    k = logits.shape[-1] - 1
    n_pix = logits.shape[0]
    if not switches.use_bipartite:
        return w.cls_q * weighted_ce(logits, targets.semantic_source, w.no_object), MatchingAssignment(), 0.0
    target = torch.full((n_pix,), k, dtype=torch.long)
    sigma = MatchingAssignment()
    loc = 0.0
    if len(targets.classes):
        cost = activation_matching_cost(probs, targets, w, switches.use_location_cost)
        sigma = hungarian_match(cost.numpy())
        for i, j in sigma.pairs:
            target[i] = targets.classes[j] - 1
        if switches.use_location_cost:
            lc = location_cost(torch.arange(n_pix), targets.masks_source)
            loc = w.loc * float(sum(lc[i, j] for i, j in sigma.pairs))
    return w.cls_q * weighted_ce(logits, target, w.no_object), sigma, loc


# -- prediction losses -----------------------------------------------------

def prediction_matching_cost(pred_class: torch.Tensor, pred_masks: torch.Tensor, query_indices: torch.Tensor,
                             targets: PreparedTargets, w: LossWeights, use_location_cost: bool = True):
    prob = pred_class.detach().double().softmax(-1)
    cost = -w.cls * prob[:, targets.classes - 1]
    bce, dice = pairwise_mask_costs(pred_masks, targets.masks_loss, w.dice_smooth)
    cost = cost + w.ce * bce + w.dice * dice
    if use_location_cost:
        cost = cost + w.loc * location_cost(query_indices, targets.masks_source)
    return cost


def layer_loss(pred_class: torch.Tensor, pred_masks: torch.Tensor, sigma: MatchingAssignment,
               targets: PreparedTargets, w: LossWeights) -> torch.Tensor:
    """Mask terms averaged over matched pairs plus class CE over every IA query."""
    na, k1 = pred_class.shape
    if sigma.pairs and max(j for _, j in sigma.pairs) >= len(targets.classes):
        raise ValueError("assignment refers to a missing target")
    if sigma.pairs and max(i for i, _ in sigma.pairs) >= na:
        raise ValueError("assignment refers to a missing query")
    target = torch.full((na,), k1 - 1, dtype=torch.long)
    loss = pred_class.new_zeros(())
    if sigma.pairs:
        qi = torch.tensor([i for i, _ in sigma.pairs])
        tj = torch.tensor([j for _, j in sigma.pairs])
        target[qi] = targets.classes[tj] - 1
        m = pred_masks[qi]
        gt = targets.masks_loss[tj].to(m.dtype)
        loss = loss + w.ce * bce_loss(m, gt).mean() + w.dice * dice_loss(m, gt, w.dice_smooth).mean()
    return loss + w.cls * weighted_ce(pred_class, target, w.no_object)


def prediction_loss(preds: Sequence[LayerPrediction], b: int, query_indices: torch.Tensor,
                    targets: PreparedTargets, w: LossWeights, switches: LossSwitches = LossSwitches()):
    """Deep-supervised loss over all layers for batch item ``b``; returns (loss, last sigma, per-layer sigmas, loc)."""
    total = preds[0].class_logits.new_zeros(())
    sigmas = []
    for pred in preds:
        cls, masks = pred.class_logits[b], pred.mask_logits[b]
        if len(targets.classes):
            cost = prediction_matching_cost(cls, masks, query_indices, targets, w, switches.use_location_cost)
            sigma = hungarian_match(cost.numpy())
        else:
            sigma = MatchingAssignment()
        sigmas.append(sigma)
        total = total + layer_loss(cls, masks, sigma, targets, w)
    loc = 0.0
    if switches.use_location_cost and sigmas[-1].pairs:
        lc = location_cost(query_indices, targets.masks_source)
        loc = w.loc * float(sum(lc[i, j] for i, j in sigmas[-1].pairs))
    return total, sigmas[-1], sigmas, loc


def gt_guided_loss(guided: Sequence[LayerPrediction], b: int, sigma: MatchingAssignment,
                   targets: PreparedTargets, w: LossWeights) -> torch.Tensor:
    """Same per-layer terms as the prediction loss with the assignment fixed to ``sigma``."""
    if len(sigma.pairs) > len(targets.classes):
        raise ValueError("assignment larger than the target set")
    total = guided[0].class_logits.new_zeros(()) if guided else torch.zeros(())
    for pred in guided:
        total = total + layer_loss(pred.class_logits[b], pred.mask_logits[b], sigma, targets, w)
    return total


@dataclass
class LossBreakdown:
    total: torch.Tensor
    components: dict[str, float]
    sigmas: list[MatchingAssignment]


def total_loss(model, images: torch.Tensor, targets: Sequence[PreparedTargets], w: LossWeights,
               switches: LossSwitches = LossSwitches(), output=None) -> LossBreakdown:
    """Batch-mean of L_ia + L_pred (+ L_guided). Components are logged separately."""
    out = model(images) if output is None else output
    na = model.cfg.na
    preds = out.predictions
    bsz = images.shape[0]
    ia_sum = pred_sum = images.new_zeros(())
    loc_sum = 0.0
    sigmas = []
    for b, tgt in enumerate(targets):
        ia, _, loc_ia = instance_activation_loss(out.activation.logits[b], out.activation.probs[b], tgt, w, switches)
        pl, sigma, _, loc_pred = prediction_loss(preds, b, out.query_indices[b], tgt, w, switches)
        ia_sum = ia_sum + ia
        pred_sum = pred_sum + pl
        loc_sum += loc_ia + loc_pred
        sigmas.append(sigma)
    components = {"loss_ia": ia_sum / bsz, "loss_pred": pred_sum / bsz}
    n_layers = len(preds) - 1
    if switches.use_gt_guidance and n_layers > 0:
        dec = out.decoder
        gt_attn = [t.masks_attn for t in targets]
        guided_sum = images.new_zeros(())
        guided_preds = []
        for l in range(1, n_layers + 1):
            x, q = dec.states[l]
            guided_preds.append(model.decoder.gt_guided_forward(l, x, q, dec.pixel_pos, dec.query_pos, sigmas, gt_attn, na))
        for b, tgt in enumerate(targets):
            guided_sum = guided_sum + gt_guided_loss(guided_preds, b, sigmas[b], tgt, w)
        components["loss_guided"] = guided_sum / bsz
    total = sum(components.values())
    logged = {k: float(v.detach()) for k, v in components.items()}
    if switches.use_location_cost:
        logged["cost_loc"] = loc_sum / bsz
    logged["loss_total"] = float(total.detach())
    return LossBreakdown(total, logged, sigmas)
