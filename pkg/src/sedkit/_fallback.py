"""Pure numpy/Python versions of the compiled kernels in ``_kernels.pyx``.

Semantics match the compiled versions; floating-point summation order in
``col2im`` differs, so results agree to rounding rather than bitwise.
"""
import numpy as np


def im2col(x, kh, kw, stride, pad):
    B, H, W, C = x.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky, kx, :] = x[:, ky:ky + stride * (Ho - 1) + 1:stride,
                                         kx:kx + stride * (Wo - 1) + 1:stride, :]
    return cols.reshape(B * Ho * Wo, kh * kw * C)


def col2im(cols, B, H, W, C, kh, kw, stride, pad):
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    cols = cols.reshape(B, Ho, Wo, kh, kw, C)
    dx = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=cols.dtype)
    for ky in range(kh):
        for kx in range(kw):
            dx[:, ky:ky + stride * (Ho - 1) + 1:stride,
               kx:kx + stride * (Wo - 1) + 1:stride, :] += cols[:, :, :, ky, kx, :]
    if pad:
        dx = dx[:, pad:pad + H, pad:pad + W, :]
    return np.ascontiguousarray(dx)


def box_iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, inter / np.where(overlap, union, 1.0), 0.0)


def nms_sorted(boxes, labels, order, thr):
    kept = []
    for a in order:
        keep = True
        for b in kept:
            if labels[b] != labels[a]:
                continue
            iw = min(boxes[a, 2], boxes[b, 2]) - max(boxes[a, 0], boxes[b, 0])
            ih = min(boxes[a, 3], boxes[b, 3]) - max(boxes[a, 1], boxes[b, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            union = ((boxes[a, 2] - boxes[a, 0]) * (boxes[a, 3] - boxes[a, 1])
                     + (boxes[b, 2] - boxes[b, 0]) * (boxes[b, 3] - boxes[b, 1]) - inter)
            if inter / union > thr:
                keep = False
                break
        if keep:
            kept.append(int(a))
    return np.asarray(kept, dtype=np.int64)


def hungarian_square(cost):
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
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
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row, u[1:].copy(), v[1:].copy()
