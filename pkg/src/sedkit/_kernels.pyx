# cython: language_level=3
"""Compiled inner loops: patch extraction for convolutions, box overlaps,
greedy NMS and the Kuhn-Munkres assignment solver.

Every function here has a drop-in twin in ``_fallback`` with identical
semantics; ``sedkit.backend`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    """NHWC input -> (B*Ho*Wo, kh*kw*C) patch matrix, zero padding."""
    cdef Py_ssize_t B = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.empty((B * Ho * Wo, kh * kw * C), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t b, oy, ox, ky, kx, iy, ix, ix0, c
    cdef Py_ssize_t row = kw * C
    cdef real* dst = &cols[0, 0]
    cdef real* src
    cdef real* xb = &x[0, 0, 0, 0]
    with nogil:
        for b in range(B):
            for oy in range(Ho):
                for ox in range(Wo):
                    ix0 = ox * stride - pad
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= H:
                            for c in range(row):
                                dst[c] = 0
                        elif ix0 >= 0 and ix0 + kw <= W:
                            # whole kernel row in bounds: one contiguous run
                            src = xb + ((b * H + iy) * W + ix0) * C
                            for c in range(row):
                                dst[c] = src[c]
                        else:
                            for kx in range(kw):
                                ix = ix0 + kx
                                if ix < 0 or ix >= W:
                                    for c in range(C):
                                        dst[kx * C + c] = 0
                                else:
                                    src = xb + ((b * H + iy) * W + ix) * C
                                    for c in range(C):
                                        dst[kx * C + c] = src[c]
                        dst = dst + row
    return out


def col2im(real[:, ::1] cols, int B, int H, int W, int C,
           int kh, int kw, int stride, int pad):
    """Adjoint of ``im2col``: scatter-add patch gradients back to NHWC."""
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((B, H, W, C), dtype=dtype)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, oy, ox, ky, kx, iy, ix, ix0, c
    cdef Py_ssize_t row = kw * C
    cdef real* src = &cols[0, 0]
    cdef real* dst
    cdef real* db = &dx[0, 0, 0, 0]
    with nogil:
        for b in range(B):
            for oy in range(Ho):
                for ox in range(Wo):
                    ix0 = ox * stride - pad
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy >= 0 and iy < H:
                            if ix0 >= 0 and ix0 + kw <= W:
                                dst = db + ((b * H + iy) * W + ix0) * C
                                for c in range(row):
                                    dst[c] += src[c]
                            else:
                                for kx in range(kw):
                                    ix = ix0 + kx
                                    if ix >= 0 and ix < W:
                                        dst = db + ((b * H + iy) * W + ix) * C
                                        for c in range(C):
                                            dst[c] += src[kx * C + c]
                        src = src + row
    return out


def box_iou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef double iw, ih, inter, area_a, area_b
    with nogil:
        for i in range(n):
            area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
            for j in range(m):
                iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
                if iw <= 0:
                    continue
                ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
                if ih <= 0:
                    continue
                inter = iw * ih
                area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
                res[i, j] = inter / (area_a + area_b - inter)
    return out


def nms_sorted(double[:, ::1] boxes, cnp.int64_t[::1] labels, cnp.int64_t[::1] order, double thr):
    """Greedy suppression over ``order`` (already score-sorted).

    Returns the kept indices in visiting order. Only same-label pairs
    suppress each other.
    """
    cdef Py_ssize_t n = order.shape[0], i, k, a, bidx, nkept = 0
    kept_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] kept = kept_arr
    cdef double iw, ih, inter, iou
    cdef bint keep
    with nogil:
        for i in range(n):
            a = order[i]
            keep = True
            for k in range(nkept):
                bidx = kept[k]
                if labels[bidx] != labels[a]:
                    continue
                iw = min(boxes[a, 2], boxes[bidx, 2]) - max(boxes[a, 0], boxes[bidx, 0])
                ih = min(boxes[a, 3], boxes[bidx, 3]) - max(boxes[a, 1], boxes[bidx, 1])
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                iou = inter / ((boxes[a, 2] - boxes[a, 0]) * (boxes[a, 3] - boxes[a, 1])
                               + (boxes[bidx, 2] - boxes[bidx, 0]) * (boxes[bidx, 3] - boxes[bidx, 1])
                               - inter)
                if iou > thr:
                    keep = False
                    break
            if keep:
                kept[nkept] = a
                nkept = nkept + 1
    return kept_arr[:nkept].copy()


def hungarian_square(double[:, ::1] cost):
    """Min-cost perfect matching on a square matrix (shortest augmenting
    paths with row/column potentials).

    Returns ``(col_of_row, u, v)``; reduced costs ``cost - u[:, None] - v``
    are nonnegative and vanish on the returned pairs."""
    cdef Py_ssize_t n = cost.shape[0]
    cdef double INF = float("inf")
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    p_arr = np.zeros(n + 1, dtype=np.int64)
    way_arr = np.zeros(n + 1, dtype=np.int64)
    minv_arr = np.empty(n + 1)
    used_arr = np.empty(n + 1, dtype=np.uint8)
    cdef double[::1] u = u_arr, v = v_arr, minv = minv_arr
    cdef cnp.int64_t[::1] p = p_arr, way = way_arr
    cdef unsigned char[::1] used = used_arr
    cdef Py_ssize_t i, j, i0, j0, j1
    cdef double delta, cur
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INF
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INF
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
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
    for j in range(1, n + 1):
        col_of_row[p_arr[j] - 1] = j - 1
    return col_of_row, u_arr[1:].copy(), v_arr[1:].copy()
