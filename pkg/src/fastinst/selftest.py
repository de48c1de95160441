"""Runnable oracle suites and the end-to-end gradient check.

Both are used by the CLI (``selftest`` / ``gradcheck``) and by the tests.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint, oracles
from .evaluate import Detection, evaluate
from .losses import LossSwitches, LossWeights, prepare_targets, total_loss
from .matching import hungarian_match
from .model import FastInst, ModelConfig
from .queries import select_ia_queries
from .scenes import compose, rle_decode, rle_encode
from .tensor_ops import GradCheckReport, attention, bilinear_resize, conv2d, finite_diff_gradcheck


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _conv_suite(rng):
    for _ in range(10):
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        x = rng.normal(size=(3, 7, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        got = conv2d(torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b), stride=stride).numpy()
        want = oracles.naive_conv2d(x, w, b, stride, k // 2)
        err = np.abs(got - want).max()
        if err > 1e-10:
            return False, f"k={k} stride={stride} max error {err:.2e}"
    return True, "10 random convolutions"


def _bilinear_suite(rng):
    for _ in range(10):
        h, w = rng.integers(2, 9, size=2)
        oh, ow = rng.integers(2, 17, size=2)
        x = rng.normal(size=(2, h, w))
        got = bilinear_resize(torch.from_numpy(x)[None], int(oh), int(ow))[0].numpy()
        err = np.abs(got - oracles.naive_bilinear(x, int(oh), int(ow))).max()
        if err > 1e-10:
            return False, f"{h}x{w}->{oh}x{ow} max error {err:.2e}"
    return True, "10 random resizes"


def _attention_suite(rng):
    for _ in range(20):
        nq, nk, d = rng.integers(1, 7), rng.integers(1, 9), 4
        q, k, v = rng.normal(size=(nq, d)), rng.normal(size=(nk, d)), rng.normal(size=(nk, 3))
        allow = rng.random((nq, nk)) < 0.5
        allow[np.arange(nq), rng.integers(0, nk, size=nq)] = True
        out, wts = attention(*(torch.from_numpy(a) for a in (q, k, v)), torch.from_numpy(allow), return_weights=True)
        ref_out, ref_w = oracles.naive_attention(q, k, v, allow)
        if np.abs(wts.numpy() - ref_w).max() > 1e-10 or np.abs(out.numpy() - ref_out).max() > 1e-10:
            return False, "masked attention disagrees with the naive loop"
        if wts.numpy()[~allow].max(initial=0) > 1e-6:
            return False, "blocked pair received weight"
    return True, "20 random masked attentions"


def _hungarian_suite(rng, count: int = 200):
    for t in range(count):
        a, b = rng.integers(1, 7, size=2)
        cost = rng.integers(0, 6, size=(a, b)).astype(float) if t % 2 else rng.random((a, b))
        got = hungarian_match(cost)
        want_cost, want_pairs = oracles.brute_force_assignment(cost)
        if got.pairs != want_pairs or abs(got.total_cost - want_cost) > 1e-9:
            return False, f"{a}x{b} matrix: got {got.pairs}, expected {want_pairs}"
    return True, f"{count} random matrices match exhaustive search"


def _selection_suite(rng, count: int = 100):
    for _ in range(count):
        h, w = rng.integers(1, 13, size=2)
        k = int(rng.integers(1, 5))
        logits = rng.normal(size=(h * w, k + 1))
        if rng.random() < 0.5:
            logits = np.round(logits)  # provoke ties
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        na = int(rng.integers(1, h * w + 3))
        got = list(select_ia_queries(probs, int(h), int(w), na))
        want = oracles.naive_select(probs, int(h), int(w), na)
        if got != want:
            return False, f"{h}x{w} K={k} na={na}: {got} != {want}"
    return True, f"{count} random activation maps"


def _rle_suite(rng):
    for _ in range(20):
        h, w = rng.integers(1, 20, size=2)
        m = rng.random((h, w)) < rng.random()
        if not np.array_equal(rle_decode(rle_encode(m), int(h), int(w)), m):
            return False, "RLE round trip changed the mask"
    return True, "20 random masks"


def _checkpoint_suite(rng):
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": rng.normal(size=5), "s": np.array(2.0)}
    cfg = {"x": [1, 2], "y": "z"}
    got, got_cfg = checkpoint.decode(checkpoint.encode(tensors, cfg))
    ok = got_cfg == cfg and all(np.array_equal(got[k], v) and got[k].dtype == v.dtype for k, v in tensors.items())
    return ok, "encode/decode round trip" if ok else "round trip mismatch"


def hand_pr_case():
    """Two ground truths of one class, three ranked detections.

    d1 covers g1 exactly, d2 hits nothing, d3 overlaps g2 with IoU 5/8.
    """
    g1 = np.zeros((16, 16), bool)
    g1[0:4, 0:4] = True
    g2 = np.zeros((16, 16), bool)
    g2[8:12, 8:12] = True
    d3 = np.zeros((16, 16), bool)
    d3[8:12, 8:10] = True
    d3[8, 10:12] = True  # 10 px, all inside g2 -> IoU 10/16
    d2 = np.zeros((16, 16), bool)
    d2[0:4, 12:16] = True
    dets = [Detection(1, 0.9, g1.copy(), 0), Detection(1, 0.8, d2, 1), Detection(1, 0.7, d3, 2)]
    return dets, [(1, g1), (1, g2)]


def expected_hand_pr() -> dict:
    dets, gts = hand_pr_case()
    iou3 = (dets[2].mask & gts[1][1]).sum() / (dets[2].mask | gts[1][1]).sum()
    aps = []
    for thr in np.arange(10) * 0.05 + 0.5:
        aps.append(oracles.hand_pr_average_precision([True, False, iou3 >= thr - 1e-12], 2))
    return {"AP": float(np.mean(aps)), "AP50": aps[0], "AP75": aps[5], "iou3": float(iou3)}


def _evaluator_suite(rng):
    dets, gts = hand_pr_case()
    got = evaluate([dets], [gts], image_size=16)
    want = expected_hand_pr()
    for key in ("AP", "AP50", "AP75"):
        if abs(got[key] - want[key]) > 1e-12:
            return False, f"{key}: {got[key]} != {want[key]}"
    perfect = evaluate([[Detection(c, 1.0, m, i) for i, (c, m) in enumerate(gts)]], [gts], image_size=16)
    if perfect["AP"] != 1.0:
        return False, f"perfect predictions give AP {perfect['AP']}"
    return True, "hand-enumerated PR case and perfect predictions"


SUITES: dict[str, Callable] = {
    "conv2d": _conv_suite,
    "bilinear": _bilinear_suite,
    "masked-attention": _attention_suite,
    "hungarian": _hungarian_suite,
    "query-selection": _selection_suite,
    "rle": _rle_suite,
    "checkpoint": _checkpoint_suite,
    "evaluator": _evaluator_suite,
}


def run_selftest(seed: int = 0, only: Optional[list[str]] = None) -> list[SuiteResult]:
    results = []
    for name, fn in SUITES.items():
        if only and name not in only:
            continue
        t0 = time.perf_counter()
        try:
            ok, detail = fn(np.random.default_rng([seed, len(results)]))
        except Exception as exc:  # a crash is a failed suite, not a crashed runner
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(SuiteResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results


# -- end-to-end gradient check --------------------------------------------

def two_instance_scene(size: int = 64):
    shapes = [
        {"kind": "circle", "class_id": 1, "cx": 0.3 * size, "cy": 0.35 * size, "size": 0.2 * size,
         "color": (0.9, 0.2, 0.2)},
        {"kind": "square", "class_id": 2, "cx": 0.7 * size, "cy": 0.65 * size, "size": 0.2 * size,
         "angle": 0.3, "color": (0.2, 0.3, 0.9)},
    ]
    bg = np.full((3, size, size), 0.5)
    return compose(shapes, size, size, bg)


def gradcheck_setup(seed: int = 0, layers: int = 1, dim: int = 16):
    torch.manual_seed(seed)
    cfg = ModelConfig(num_classes=2, dim=dim, na=4, nb=2, layers=layers, heads=2)
    model = FastInst(cfg).double()
    sample = two_instance_scene()
    image = torch.from_numpy(sample.image).double()[None]
    tgt = prepare_targets([t.class_id for t in sample.instances], np.stack([t.mask for t in sample.instances]),
                          cfg.source_level, cfg.num_classes)
    w, sw = LossWeights(), LossSwitches()

    def f():
        return total_loss(model, image, [tgt], w, sw).total

    return model, f


def run_gradcheck(coords_per_group: int = 200, seed: int = 0, eps: float = 1e-4,
                  tol: float = 1e-4) -> dict[str, GradCheckReport]:
    """Central-difference check of the full training objective, per parameter group."""
    model, f = gradcheck_setup(seed)
    rng = np.random.default_rng(seed)
    reports = {}
    for group, named in model.parameter_groups().items():
        params = [p for _, p in named]
        sizes = [p.numel() for p in params]
        total = sum(sizes)
        flat = np.arange(total) if total <= coords_per_group else rng.choice(total, coords_per_group, replace=False)
        offsets = np.cumsum([0] + sizes)
        coords = [sorted(int(j - offsets[i]) for j in flat if offsets[i] <= j < offsets[i + 1])
                  for i in range(len(params))]
        reports[group] = finite_diff_gradcheck(f, params, eps=eps, tol=tol, coords=coords)
    return reports


def format_report(reports: dict[str, GradCheckReport]) -> list[str]:
    lines = []
    for group, r in reports.items():
        flag = "ok  " if r.passed else "FAIL"
        err = "inf" if math.isinf(r.max_relative_error) else f"{r.max_relative_error:.2e}"
        lines.append(f"{flag} {group:<22} coords={r.checked:<4d} max_rel_err={err}")
    return lines
