"""Minimum-cost bipartite assignment.

Shortest-augmenting-path Hungarian algorithm with potentials, followed by a
tie-break pass that picks the lexicographically smallest optimal pair list.
The tie-break works on the graph of tight edges (zero reduced cost under the
optimal potentials): by complementary slackness an assignment is optimal iff
it is a perfect matching of that graph, so the greedy choice only needs
alternating-path feasibility checks, not re-solves.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MatchingAssignment:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    total_cost: float = 0.0

    def query_to_target(self) -> dict[int, int]:
        return dict(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def _solve_rows_le_cols(c: np.ndarray):
    """Rectangular Hungarian for n <= m. Returns (row->col, u, v)."""
    n, m = c.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j]: row (1-based) assigned to column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _augment_from(sources, target, tight, match_l, match_r, locked_l, locked_r, banned_r):
    """BFS for an alternating path from any free-able left node in ``sources`` to right node ``target``.

    Returns the list of (left, right) edges to apply, or None.
    """
    parent: dict[int, tuple[int, int] | None] = {}
    queue = deque()
    for s in sources:
        if s not in parent:
            parent[s] = None
            queue.append(s)
    while queue:
        x = queue.popleft()
        for y in np.flatnonzero(tight[x]):
            y = int(y)
            if locked_r[y] or y in banned_r or y == match_l[x]:
                continue
            if y == target:
                path = [(x, y)]
                node = x
                while parent[node] is not None:
                    prev_x, prev_y = parent[node]
                    path.append((prev_x, prev_y))
                    node = prev_x
                return path
            nxt = int(match_r[y])
            if locked_l[nxt] or nxt in parent:
                continue
            parent[nxt] = (x, y)
            queue.append(nxt)
    return None


def hungarian_match(cost) -> MatchingAssignment:
    """Minimum-cost injective assignment of min(A, B) pairs for an (A, B) cost matrix.

    Among optimal assignments the lexicographically smallest list of
    (query, target) pairs, sorted by query, is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix contains non-finite entries")
    a, b = c.shape
    if a == 0 or b == 0:
        return MatchingAssignment([], 0.0)

    transposed = a > b
    rows = c.T if transposed else c
    row_to_col, u, v = _solve_rows_le_cols(rows)
    if transposed:
        dual_q, dual_t = v, u
        q_to_t = np.full(a, -1, dtype=np.int64)
        for t, q in enumerate(row_to_col):
            q_to_t[q] = t
    else:
        dual_q, dual_t = u, v
        q_to_t = row_to_col

    # Square tight graph: left = queries (+ dummies), right = targets (+ dummies).
    n = max(a, b)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    reduced = np.zeros((n, n))
    reduced[:a, :b] = c - dual_q[:, None] - dual_t[None, :]
    if a < b:
        reduced[a:, :b] = -dual_t[None, :]
    elif a > b:
        reduced[:a, b:] = -dual_q[:, None]
    tight = reduced <= tol

    match_l = np.full(n, -1, dtype=np.int64)
    match_r = np.full(n, -1, dtype=np.int64)
    for q in range(a):
        if q_to_t[q] >= 0:
            match_l[q] = q_to_t[q]
            match_r[q_to_t[q]] = q
    free_l = [x for x in range(n) if match_l[x] < 0]
    free_r = [y for y in range(n) if match_r[y] < 0]
    for x, y in zip(free_l, free_r):
        match_l[x], match_r[y] = y, x

    locked_l = np.zeros(n, dtype=bool)
    locked_r = np.zeros(n, dtype=bool)
    dummy_r = set(range(b, n))

    def apply(path):
        for x, y in path:
            match_l[x] = y
            match_r[y] = x

    for q in range(a):
        done = False
        for t in range(b):
            if not tight[q, t]:
                continue
            if match_l[q] == t:
                done = True
            else:
                owner = int(match_r[t])
                if locked_l[owner]:
                    continue
                old = int(match_l[q])
                path = _augment_from([owner], old, tight, match_l, match_r,
                                     locked_l | _mask(n, q), locked_r, {t})
                if path is None:
                    continue
                apply(path)
                match_l[q], match_r[t] = t, q
                done = True
            if done:
                break
        if not done:
            # q stays unmatched: it must own some dummy right node
            if match_l[q] not in dummy_r:
                old = int(match_l[q])
                sources = {int(match_r[d]): d for d in dummy_r
                           if not locked_r[d] and tight[q, d] and not locked_l[match_r[d]]}
                path = _augment_from(list(sources), old, tight, match_l, match_r,
                                     locked_l | _mask(n, q), locked_r, set())
                if path is None:
                    raise RuntimeError("tie-break lost feasibility; tolerance too tight")
                src = path[-1][0]
                d = sources[src]
                apply(path)
                match_l[q], match_r[d] = d, q
        locked_l[q] = True
        locked_r[match_l[q]] = True

    pairs = [(q, int(match_l[q])) for q in range(a) if match_l[q] < b]
    total = float(sum(c[q, t] for q, t in pairs))
    return MatchingAssignment(pairs, total)


def _mask(n: int, i: int) -> np.ndarray:
    m = np.zeros(n, dtype=bool)
    m[i] = True
    return m
