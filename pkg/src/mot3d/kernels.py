"""Hot numeric kernels: oriented-box overlap, point-in-box statistics,
linear assignment and greedy matching.

Every kernel is written as a plain-loop function and compiled with numba's
``@njit`` when available. Setting the environment variable ``MOT3D_NUMBA=0``
(or numba being absent) selects the pure-Python/numpy fallback path: the
same source runs uncompiled, so both paths are numerically identical.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import math
import os

import numpy as np

_EPS = 1e-9  # collinearity tolerance for polygon clipping
_BIG = 1e300


def _env_enabled(name: str, default: bool = True) -> bool:
    raw = os.environ.get(name)
    if raw is None:
        return default
    return raw.strip().lower() not in ("0", "false", "no", "off")


NUMBA_ENABLED = _env_enabled("MOT3D_NUMBA")
if NUMBA_ENABLED:
    try:
        from numba import njit as _njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def _jit(fn):
        return _njit(cache=True)(fn)
else:
    def _jit(fn):
        return fn


def _box_bev_corners(box: np.ndarray) -> np.ndarray:
    """CCW BEV corners (4, 2) of a yawed box (x, y, z, l, w, h, theta).

    l extends along the heading axis, w laterally.
    """
    c = math.cos(box[6])
    s = math.sin(box[6])
    hl = 0.5 * box[3]
    hw = 0.5 * box[4]
    out = np.empty((4, 2), dtype=np.float64)
    # box-frame corners in CCW order
    out[0, 0] = hl
    out[0, 1] = hw
    out[1, 0] = -hl
    out[1, 1] = hw
    out[2, 0] = -hl
    out[2, 1] = -hw
    out[3, 0] = hl
    out[3, 1] = -hw
    for i in range(4):
        px = out[i, 0]
        py = out[i, 1]
        out[i, 0] = c * px - s * py + box[0]
        out[i, 1] = s * px + c * py + box[1]
    return out


def _shoelace_area(pts: np.ndarray, n: int) -> float:
    acc = 0.0
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        acc += pts[i, 0] * pts[j, 1] - pts[j, 0] * pts[i, 1]
    return 0.5 * abs(acc)


def _bev_intersection_area(ca: np.ndarray, cb: np.ndarray) -> float:
    """Area of the intersection of two convex CCW quads (Sutherland-Hodgman)."""
    cur = np.empty((16, 2), dtype=np.float64)
    nxt = np.empty((16, 2), dtype=np.float64)
    for i in range(4):
        cur[i, 0] = ca[i, 0]
        cur[i, 1] = ca[i, 1]
    n_cur = 4
    for e in range(4):
        ax = cb[e, 0]
        ay = cb[e, 1]
        e2 = e + 1
        if e2 == 4:
            e2 = 0
        ex = cb[e2, 0] - ax
        ey = cb[e2, 1] - ay
        n_nxt = 0
        for i in range(n_cur):
            ip = i - 1
            if ip < 0:
                ip = n_cur - 1
            px = cur[ip, 0]
            py = cur[ip, 1]
            qx = cur[i, 0]
            qy = cur[i, 1]
            side_p = ex * (py - ay) - ey * (px - ax)
            side_q = ex * (qy - ay) - ey * (qx - ax)
            p_in = side_p >= -_EPS
            q_in = side_q >= -_EPS
            if q_in:
                if not p_in:
                    t = side_p / (side_p - side_q)
                    if t < 0.0:
                        t = 0.0
                    elif t > 1.0:
                        t = 1.0
                    nxt[n_nxt, 0] = px + t * (qx - px)
                    nxt[n_nxt, 1] = py + t * (qy - py)
                    n_nxt += 1
                nxt[n_nxt, 0] = qx
                nxt[n_nxt, 1] = qy
                n_nxt += 1
            elif p_in:
                t = side_p / (side_p - side_q)
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                nxt[n_nxt, 0] = px + t * (qx - px)
                nxt[n_nxt, 1] = py + t * (qy - py)
                n_nxt += 1
        tmp = cur
        cur = nxt
        nxt = tmp
        n_cur = n_nxt
        if n_cur == 0:
            return 0.0
    area = _shoelace_area(cur, n_cur)
    if area < _EPS * _EPS:  # degenerate sliver counts as no overlap
        return 0.0
    return area


def _iou3d_pair(a: np.ndarray, b: np.ndarray) -> float:
    """3D IoU of two upright yawed boxes: BEV polygon overlap x z-extent overlap."""
    dz = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5]) - max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    if dz <= 0.0:
        return 0.0
    ca = _box_bev_corners(a)
    cb = _box_bev_corners(b)
    inter_bev = _bev_intersection_area(ca, cb)
    if inter_bev <= 0.0:
        return 0.0
    area_a = _shoelace_area(ca, 4)
    area_b = _shoelace_area(cb, 4)
    inter = inter_bev * dz
    union = area_a * a[5] + area_b * b[5] - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def _iou3d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    m = boxes_a.shape[0]
    n = boxes_b.shape[0]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            out[i, j] = _iou3d_pair(boxes_a[i], boxes_b[j])
    return out


def _shape_descriptors(boxes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """18-dim in-box point statistics per box.

    Layout: [log1p(count), centroid offset xyz (box frame), per-axis std xyz,
    mean reflectance, mean |dt|, 3x3 BEV occupancy fractions]. Boxes with no
    points yield the zero vector. Containment is half-open: [-l/2, l/2) etc.
    """
    m = boxes.shape[0]
    p = points.shape[0]
    out = np.zeros((m, 18), dtype=np.float64)
    for bi in range(m):
        bx = boxes[bi, 0]
        by = boxes[bi, 1]
        bz = boxes[bi, 2]
        bl = boxes[bi, 3]
        bw = boxes[bi, 4]
        bh = boxes[bi, 5]
        c = math.cos(boxes[bi, 6])
        s = math.sin(boxes[bi, 6])
        cnt = 0
        sx = sy = sz = 0.0
        sxx = syy = szz = 0.0
        sr = sdt = 0.0
        grid = np.zeros(9, dtype=np.float64)
        for pi in range(p):
            dx = points[pi, 0] - bx
            dy = points[pi, 1] - by
            qx = c * dx + s * dy
            qy = -s * dx + c * dy
            qz = points[pi, 2] - bz
            if qx < -0.5 * bl or qx >= 0.5 * bl:
                continue
            if qy < -0.5 * bw or qy >= 0.5 * bw:
                continue
            if qz < -0.5 * bh or qz >= 0.5 * bh:
                continue
            cnt += 1
            sx += qx
            sy += qy
            sz += qz
            sxx += qx * qx
            syy += qy * qy
            szz += qz * qz
            sr += points[pi, 3]
            sdt += abs(points[pi, 4])
            gi = int((qx + 0.5 * bl) / bl * 3.0)
            gj = int((qy + 0.5 * bw) / bw * 3.0)
            if gi > 2:
                gi = 2
            if gj > 2:
                gj = 2
            grid[gi * 3 + gj] += 1.0
        if cnt == 0:
            continue
        inv = 1.0 / cnt
        mx = sx * inv
        my = sy * inv
        mz = sz * inv
        vx = sxx * inv - mx * mx
        vy = syy * inv - my * my
        vz = szz * inv - mz * mz
        if vx < 0.0:
            vx = 0.0
        if vy < 0.0:
            vy = 0.0
        if vz < 0.0:
            vz = 0.0
        out[bi, 0] = math.log1p(float(cnt))
        out[bi, 1] = mx
        out[bi, 2] = my
        out[bi, 3] = mz
        out[bi, 4] = math.sqrt(vx)
        out[bi, 5] = math.sqrt(vy)
        out[bi, 6] = math.sqrt(vz)
        out[bi, 7] = sr * inv
        out[bi, 8] = sdt * inv
        for g in range(9):
            out[bi, 9 + g] = grid[g] * inv
    return out


def _lap_solve(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment on a square matrix (shortest augmenting path).

    Returns col_of_row, length n. Deterministic: ties resolve by fixed scan
    order. Costs must be finite; use large finite sentinels for forbidden
    cells and filter afterwards.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1, dtype=np.float64)
    v = np.zeros(n + 1, dtype=np.float64)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, _BIG, dtype=np.float64)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = _BIG
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
    out = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        out[p[j] - 1] = j - 1
    return out


def _greedy_pairs(score: np.ndarray, threshold: float, maximize: bool) -> np.ndarray:
    """Greedy matching: repeatedly take the globally best remaining cell.

    Ties break lexicographically by (row, col). Stops once the best remaining
    cell fails the threshold (>= when maximizing, <= when minimizing).
    Cells at -inf (maximize) / +inf (minimize) are never selected.
    """
    m = score.shape[0]
    n = score.shape[1]
    cap = m if m < n else n
    out = np.empty((cap, 2), dtype=np.int64)
    used_r = np.zeros(m, dtype=np.bool_)
    used_c = np.zeros(n, dtype=np.bool_)
    sign = 1.0 if maximize else -1.0
    k = 0
    while k < cap:
        best = -_BIG
        bi = -1
        bj = -1
        for i in range(m):
            if used_r[i]:
                continue
            for j in range(n):
                if used_c[j]:
                    continue
                val = sign * score[i, j]
                if val > best:
                    best = val
                    bi = i
                    bj = j
        if bi < 0:
            break
        s = score[bi, bj]
        if maximize:
            if s < threshold:
                break
        else:
            if s > threshold:
                break
        out[k, 0] = bi
        out[k, 1] = bj
        k += 1
        used_r[bi] = True
        used_c[bj] = True
    return out[:k]


# Pure-Python references, kept importable for the benchmark.
PY_FUNCS = {
    "box_bev_corners": _box_bev_corners,
    "bev_intersection_area": _bev_intersection_area,
    "iou3d_pair": _iou3d_pair,
    "iou3d_matrix": _iou3d_matrix,
    "shape_descriptors": _shape_descriptors,
    "lap_solve": _lap_solve,
    "greedy_pairs": _greedy_pairs,
}

box_bev_corners = _jit(_box_bev_corners)
_shoelace = _jit(_shoelace_area)
if NUMBA_ENABLED:
    # nested calls must resolve to the compiled dispatchers
    _box_bev_corners = box_bev_corners
    _shoelace_area = _shoelace
bev_intersection_area = _jit(PY_FUNCS["bev_intersection_area"])
if NUMBA_ENABLED:
    _bev_intersection_area = bev_intersection_area
iou3d_pair = _jit(PY_FUNCS["iou3d_pair"])
if NUMBA_ENABLED:
    _iou3d_pair = iou3d_pair
iou3d_matrix = _jit(PY_FUNCS["iou3d_matrix"])
shape_descriptors = _jit(PY_FUNCS["shape_descriptors"])
lap_solve = _jit(PY_FUNCS["lap_solve"])
greedy_pairs = _jit(PY_FUNCS["greedy_pairs"])
