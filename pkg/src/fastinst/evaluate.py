"""Inference post-processing and COCO-style mask AP/AR."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .tensor_ops import bilinear_resize

IOU_THRESHOLDS = np.array([0.5 + 0.05 * i for i in range(10)])
RECALL_THRESHOLDS = np.array([i / 100 for i in range(101)])
COCO_REFERENCE_SIZE = 640


@dataclass
class Detection:
    class_id: int
    score: float
    mask: np.ndarray  # bool (H, W)
    query: int = -1
    class_prob: float = 0.0
    mask_score: float = 0.0


def postprocess(class_logits: torch.Tensor, mask_logits: torch.Tensor, e3_hw: tuple[int, int],
                image_size: tuple[int, int]) -> list[Detection]:
    """Turn one image's final-layer outputs (Na,K+1), (Na,L) into scored detections.

    score = best real-class probability x mean foreground mask probability;
    queries whose overall argmax is "no object" are dropped. No NMS.
    """
    with torch.no_grad():
        prob = class_logits.double().softmax(-1)
        keep = prob.argmax(-1) != prob.shape[-1] - 1
        cls_prob, cls = prob[:, :-1].max(-1)
        masks = bilinear_resize(mask_logits.double().reshape(-1, *e3_hw), *image_size).sigmoid()
        dets = []
        for qi in torch.nonzero(keep).flatten().tolist():
            m = masks[qi]
            fg = m > 0.5
            mask_score = float(m[fg].mean()) if fg.any() else 0.0
            cp = float(cls_prob[qi])
            dets.append(Detection(int(cls[qi]) + 1, cp * mask_score, fg.numpy(), qi, cp, mask_score))
    dets.sort(key=lambda d: (-d.score, d.query))
    return dets


def predict(model, images: torch.Tensor) -> list[list[Detection]]:
    model.eval()
    with torch.no_grad():
        out = model(images)
    final = out.predictions[-1]
    size = tuple(images.shape[-2:])
    return [postprocess(final.class_logits[b], final.mask_logits[b], out.e3_hw, size)
            for b in range(images.shape[0])]


def mask_iou(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(d,HW) x (g,HW) bool -> (d,g) IoU."""
    d = dets.reshape(len(dets), -1).astype(np.float64)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def area_ranges(image_size: int) -> dict[str, tuple[float, float]]:
    """COCO's 32^2 / 96^2 size buckets rescaled to the image area."""
    s = (image_size / COCO_REFERENCE_SIZE) ** 2
    return {"all": (0, 1e10), "small": (0, 32 ** 2 * s), "medium": (32 ** 2 * s, 96 ** 2 * s),
            "large": (96 ** 2 * s, 1e10)}


def _det_order(d: Detection):
    # equal scores: ascending query index, then mask bytes, so input order never matters
    return (-d.score, d.query, np.packbits(d.mask).tobytes())


def _match_image(dets: list[Detection], gts: list[tuple[int, np.ndarray]], rng: tuple[float, float], max_dets: int):
    """Greedy per-threshold matching for one image/category/area range (COCO semantics)."""
    gt_area = np.array([m.sum() for _, m in gts], dtype=np.float64)
    gt_ignore = (gt_area < rng[0]) | (gt_area > rng[1])
    gorder = np.argsort(gt_ignore, kind="stable")
    gt_ignore = gt_ignore[gorder]
    dets = dets[:max_dets]
    t_count = len(IOU_THRESHOLDS)
    dt_matched = np.zeros((t_count, len(dets)), dtype=bool)
    dt_ignore = np.zeros((t_count, len(dets)), dtype=bool)
    if dets and gts:
        ious = mask_iou(np.stack([d.mask for d in dets]), np.stack([gts[i][1] for i in gorder]))
        gt_matched = np.zeros((t_count, len(gts)), dtype=bool)
        for ti, thr in enumerate(IOU_THRESHOLDS):
            for di in range(len(dets)):
                best = min(thr, 1 - 1e-10)
                m = -1
                for gi in range(len(gts)):
                    if gt_matched[ti, gi]:
                        continue
                    if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                        break
                    if ious[di, gi] < best:
                        continue
                    best = ious[di, gi]
                    m = gi
                if m == -1:
                    continue
                dt_ignore[ti, di] = gt_ignore[m]
                dt_matched[ti, di] = True
                gt_matched[ti, m] = True
    det_area = np.array([d.mask.sum() for d in dets], dtype=np.float64)
    outside = (det_area < rng[0]) | (det_area > rng[1])
    dt_ignore |= ~dt_matched & outside[None]
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return scores, dt_matched, dt_ignore, int((~gt_ignore).sum())


def evaluate(detections: Sequence[Sequence[Detection]], ground_truth: Sequence[Sequence[tuple[int, np.ndarray]]],
             image_size: Optional[int] = None, max_dets: int = 100, return_curves: bool = False) -> dict:
    """COCO-style mask metrics.

    ``ground_truth[i]`` is a list of (class_id, bool mask) for image i and
    ``detections[i]`` the detections for that image. Returns AP, AP50, AP75,
    APs/APm/APl and AR@max_dets (as ``AR100`` for the default), each in [0,1]
    or -1 when undefined.
    """
    if image_size is None:
        sizes = [m.shape for gts in ground_truth for _, m in gts]
        image_size = max(sizes[0]) if sizes else COCO_REFERENCE_SIZE
    classes = sorted({c for gts in ground_truth for c, _ in gts} | {d.class_id for ds in detections for d in ds})
    ranges = area_ranges(image_size)
    t_count = len(IOU_THRESHOLDS)
    precision = {name: np.full((t_count, len(RECALL_THRESHOLDS), len(classes)), -1.0) for name in ranges}
    recall = {name: np.full((t_count, len(classes)), -1.0) for name in ranges}
    curves = {}
    for ci, cls in enumerate(classes):
        for name, rng in ranges.items():
            all_scores, all_m, all_ig, npig = [], [], [], 0
            for dets, gts in zip(detections, ground_truth):
                d = sorted((x for x in dets if x.class_id == cls), key=_det_order)
                g = [x for x in gts if x[0] == cls]
                s, m, ig, n = _match_image(d, g, rng, max_dets)
                all_scores.append(s)
                all_m.append(m)
                all_ig.append(ig)
                npig += n
            if npig == 0:
                continue
            scores = np.concatenate(all_scores)
            order = np.argsort(-scores, kind="mergesort")
            matched = np.concatenate(all_m, axis=1)[:, order]
            ignored = np.concatenate(all_ig, axis=1)[:, order]
            tps = np.cumsum(matched & ~ignored, axis=1).astype(np.float64)
            fps = np.cumsum(~matched & ~ignored, axis=1).astype(np.float64)
            for ti in range(t_count):
                tp, fp = tps[ti], fps[ti]
                rc = tp / npig
                pr = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
                recall[name][ti, ci] = rc[-1] if len(rc) else 0.0
                env = pr.copy()
                for i in range(len(env) - 1, 0, -1):
                    env[i - 1] = max(env[i - 1], env[i])
                q = np.zeros(len(RECALL_THRESHOLDS))
                idx = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
                for ri, pi in enumerate(idx):
                    if pi < len(env):
                        q[ri] = env[pi]
                precision[name][ti, :, ci] = q
                if name == "all":
                    curves[(cls, float(IOU_THRESHOLDS[ti]))] = (rc, env)

    def mean_valid(a):
        v = a[a > -1]
        return float(v.mean()) if v.size else -1.0

    p = precision["all"]
    result = {
        "AP": mean_valid(p),
        "AP50": mean_valid(p[0]),
        "AP75": mean_valid(p[5]),
        "APs": mean_valid(precision["small"]),
        "APm": mean_valid(precision["medium"]),
        "APl": mean_valid(precision["large"]),
        f"AR{max_dets}": mean_valid(recall["all"]),
    }
    if return_curves:
        result["curves"] = curves
    return result
