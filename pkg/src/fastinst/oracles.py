"""Slow reference implementations used to cross-check the fast paths.

Each oracle is written from the defining formula with explicit loops and
shares no code with the implementation it checks.
"""
from __future__ import annotations

import itertools
import math

import numpy as np


def naive_softmax(x) -> list[float]:
    m = max(x)
    e = [math.exp(v - m) for v in x]
    s = sum(e)
    return [v / s for v in e]


def naive_conv2d(x: np.ndarray, w: np.ndarray, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def naive_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resize, edge-clamped; x is (C,H,W)."""
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * x[:, y0, x0] + (1 - fy) * fx * x[:, y0, x1]
                            + fy * (1 - fx) * x[:, y1, x0] + fy * fx * x[:, y1, x1])
    return out


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, allow=None) -> tuple[np.ndarray, np.ndarray]:
    """Softmax over the allowed keys only; blocked keys get exactly zero weight."""
    nq, d = q.shape
    nk = k.shape[0]
    weights = np.zeros((nq, nk))
    for i in range(nq):
        keys = [j for j in range(nk) if allow is None or allow[i, j]]
        logits = [float(q[i] @ k[j]) / math.sqrt(d) for j in keys]
        for j, p in zip(keys, naive_softmax(logits)):
            weights[i, j] = p
    return weights @ v, weights


def brute_force_assignment(cost: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    """Exhaustive minimum over all injections of the smaller side, with lexicographic tie-break."""
    a, b = cost.shape
    best_cost, best_pairs = math.inf, None
    if a <= b:
        candidates = ([(i, perm[i]) for i in range(a)] for perm in itertools.permutations(range(b), a))
    else:
        candidates = (sorted((perm[j], j) for j in range(b)) for perm in itertools.permutations(range(a), b))
    for pairs in candidates:
        total = sum(float(cost[i, j]) for i, j in pairs)
        if total < best_cost - 1e-12 or (abs(total - best_cost) <= 1e-12 and pairs < best_pairs):
            best_cost, best_pairs = total, pairs
    return best_cost, best_pairs


def brute_force_min_cost(cost: np.ndarray) -> float:
    """Vectorized exhaustive minimum (no tie-break), fast enough for 7x7."""
    a, b = cost.shape
    if a > b:
        cost, a, b = cost.T, b, a
    perms = np.array(list(itertools.permutations(range(b), a)))
    return float(cost[np.arange(a)[None, :], perms].sum(axis=1).min())


def naive_select(probs: np.ndarray, h: int, w: int, na: int) -> list[int]:
    """Local-maximum-first selection written out pixel by pixel.

    probs is (h*w, K+1) with "no object" last. A pixel is a candidate when its
    best real-class probability is >= that same class's probability at every
    in-bounds 8-neighbour. Candidates by descending score come first, then the
    remaining pixels by descending score; ties favour the lower flat index.
    """
    k = probs.shape[1] - 1
    best_cls, score = [], []
    for i in range(h * w):
        c = max(range(k), key=lambda kk: (probs[i, kk], -kk))
        best_cls.append(c)
        score.append(float(probs[i, c]))
    cand = []
    for i in range(h * w):
        y, x = divmod(i, w)
        ok = True
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and probs[ny * w + nx, best_cls[i]] > score[i]:
                    ok = False
        cand.append(ok)
    first = sorted((i for i in range(h * w) if cand[i]), key=lambda i: (-score[i], i))
    rest = sorted((i for i in range(h * w) if not cand[i]), key=lambda i: (-score[i], i))
    return (first + rest)[:na]


def hand_pr_average_precision(tp_flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP from a ranked list of TP/FP flags."""
    tp = fp = 0
    rc, pr = [], []
    for flag in tp_flags:
        tp += flag
        fp += not flag
        rc.append(tp / num_gt)
        pr.append(tp / (tp + fp))
    total = 0.0
    for r in range(101):
        t = r / 100
        vals = [p for rr, p in zip(rc, pr) if rr >= t]
        total += max(vals) if vals else 0.0
    return total / 101
