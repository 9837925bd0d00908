"""Bipartite matching of two prediction sets under a JS + GIoU cost."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from sedkit.backend import kernels
from sedkit.geometry import check_boxes, giou_matrix
from sedkit.losses import js_div


def pairwise_cost(preds1: Sequence, preds2: Sequence, lambda_iou: float = 1.0) -> np.ndarray:
    """``cost[i, j] = JS(p_i, p_j) + lambda_iou * (1 - GIoU(b_i, b_j))``.

    Args:
        preds1: sequence of ``(prob vector, box)`` pairs.
        preds2: same, possibly of a different length.
        lambda_iou: weight on the box term.
    """
    if len(preds1) == 0 or len(preds2) == 0:
        raise ValueError("pairwise_cost needs two nonempty prediction sets")
    p1 = np.asarray([p for p, _ in preds1], dtype=np.float64)
    p2 = np.asarray([p for p, _ in preds2], dtype=np.float64)
    if p1.shape[1] != p2.shape[1]:
        raise ValueError("prediction sets use different class counts")
    b1 = check_boxes([b for _, b in preds1])
    b2 = check_boxes([b for _, b in preds2])
    js = js_div(p1[:, None, :], p2[None, :, :])
    cost = js + lambda_iou * (1.0 - giou_matrix(b1, b2))
    return np.maximum(cost, 0.0)


def _augment(eq, match_col, match_row, row, fixed_rows, banned_cols, target_col):
    """Re-match ``row`` along an alternating path in ``eq`` that ends at the
    free column ``target_col``; rows in ``fixed_rows`` and columns in
    ``banned_cols`` are left alone. Returns True on success."""
    n = eq.shape[0]
    prev_col = {}
    frontier = [row]
    seen_rows = {row}
    seen_cols = set()
    while frontier:
        nxt = []
        for r in frontier:
            for c in np.flatnonzero(eq[r]):
                c = int(c)
                if c in seen_cols or c in banned_cols:
                    continue
                seen_cols.add(c)
                prev_col[c] = r
                if c == target_col:
                    # flip the path
                    while True:
                        r0 = prev_col[c]
                        old = int(match_col[r0])
                        match_col[r0] = c
                        match_row[c] = r0
                        if r0 == row:
                            return True
                        c = old
                r2 = int(match_row[c])
                if r2 not in seen_rows and r2 not in fixed_rows:
                    seen_rows.add(r2)
                    nxt.append(r2)
        frontier = nxt
    del n
    return False


def _lexicographic_refine(cost, col, u, v):
    """Among optimal assignments, move to the lexicographically smallest
    column sequence using the tight-edge graph of the dual solution."""
    n = cost.shape[0]
    scale = 1.0 + float(np.abs(cost).max())
    eq = (cost - u[:, None] - v[None, :]) <= 1e-9 * scale
    eq[np.arange(n), col] = True
    match_col = col.copy()
    match_row = np.empty(n, dtype=np.int64)
    match_row[match_col] = np.arange(n)
    fixed_cols: set = set()
    for i in range(n):
        for j in np.flatnonzero(eq[i]):
            j = int(j)
            if j in fixed_cols:
                continue
            if j == match_col[i]:
                break
            trial_col, trial_row = match_col.copy(), match_row.copy()
            holder = int(trial_row[j])
            freed = int(trial_col[i])
            trial_col[i] = j
            trial_row[j] = i
            if _augment(eq, trial_col, trial_row, holder, set(range(i + 1)),
                        fixed_cols | {j}, freed):
                match_col, match_row = trial_col, trial_row
                break
        fixed_cols.add(int(match_col[i]))
    return match_col


def solve_assignment(cost) -> list[tuple[int, int]]:
    """Exact minimum-cost assignment of ``min(n, m)`` disjoint pairs.

    Rectangular inputs are padded to square with a constant, which shifts every
    complete assignment by the same amount. Among optimal assignments the one
    with the lexicographically smallest sorted pair list is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] < 1 or cost.shape[1] < 1:
        raise ValueError(f"cost must be a nonempty 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    k = max(n, m)
    sentinel = float(np.abs(cost).max()) + 1.0
    sq = np.full((k, k), sentinel)
    sq[:n, :m] = cost
    sq = np.ascontiguousarray(sq)
    col, u, v = kernels.hungarian_square(sq)
    col = np.asarray(col, dtype=np.int64)
    best = math.fsum(sq[np.arange(k), col])
    refined = _lexicographic_refine(sq, col, np.asarray(u), np.asarray(v))
    if math.fsum(sq[np.arange(k), refined]) == best:
        col = refined
    return [(i, int(col[i])) for i in range(n) if col[i] < m]


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return math.fsum(cost[i, j] for i, j in pairs)


def match_predictions(preds1, preds2, lambda_iou: float = 1.0):
    """Match two prediction sets, or two batches of them.

    A batch is a list of per-item prediction lists; each item is solved
    independently. Returns ``(pairs, total_cost)`` or a list of those.
    """
    batched = len(preds1) > 0 and isinstance(preds1[0], (list, tuple)) and len(preds1[0]) > 0 \
        and isinstance(preds1[0][0], (list, tuple)) and len(preds1[0][0]) == 2 \
        and np.ndim(preds1[0][0][1]) == 1
    if batched:
        if len(preds1) != len(preds2):
            raise ValueError("batch sizes differ")
        return [match_predictions(a, b, lambda_iou) for a, b in zip(preds1, preds2)]
    cost = pairwise_cost(preds1, preds2, lambda_iou)
    pairs = solve_assignment(cost)
    return pairs, assignment_cost(cost, pairs)
