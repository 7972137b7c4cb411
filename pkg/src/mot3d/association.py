"""Matching machinery: optimal and greedy assignment, the 3D/2D fusion stage
and the two association stages of the tracking pipeline."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .core import ContractError, Detection, ObjectState, Track, TrackerConfig
from .geometry import Box2D, CameraModel, iou_2d_matrix, project_box
from .interaction import heuristic_distance


@dataclass(frozen=True)
class MatchSet:
    """Assignment result: matched (row, col, score) triples plus leftovers."""

    matches: list[tuple[int, int, float]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]


def _matchset_from_pairs(pairs, scores, n_rows: int, n_cols: int) -> MatchSet:
    matched_r = set()
    matched_c = set()
    matches = []
    for i, j in pairs:
        matches.append((int(i), int(j), float(scores[i, j])))
        matched_r.add(int(i))
        matched_c.add(int(j))
    return MatchSet(
        matches=matches,
        unmatched_rows=[i for i in range(n_rows) if i not in matched_r],
        unmatched_cols=[j for j in range(n_cols) if j not in matched_c],
    )


def hungarian(cost: np.ndarray, forbidden: np.ndarray | None = None) -> np.ndarray:
    """Globally minimal assignment as an (M, N) binary matrix.

    Rectangular problems are padded to square; forbidden cells are replaced
    by a sentinel strictly dominating any feasible assignment and filtered
    from the result, so infeasible rows/columns simply come back unassigned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    out = np.zeros((m, n), dtype=np.int8)
    if m == 0 or n == 0:
        return out
    if forbidden is None:
        forbidden = np.zeros((m, n), dtype=bool)
    else:
        forbidden = np.asarray(forbidden, dtype=bool)
        if forbidden.shape != (m, n):
            raise ContractError("forbidden mask must match cost shape")
    allowed = ~forbidden
    if not np.any(allowed):
        return out
    vals = cost[allowed]
    if not np.all(np.isfinite(vals)):
        raise ContractError("allowed costs must be finite")
    lo = float(vals.min())
    hi = float(vals.max())
    side = max(m, n)
    pad_value = hi + 1.0
    forbid_value = hi + (hi - lo + 1.0) * (side + 1.0)
    square = np.full((side, side), pad_value)
    square[:m, :n] = np.where(forbidden, forbid_value, cost)
    cols = kernels.lap_solve(square)
    for i in range(m):
        j = int(cols[i])
        if j < n and allowed[i, j]:
            out[i, j] = 1
    return out


def hungarian_matchset(cost: np.ndarray, forbidden: np.ndarray | None = None) -> MatchSet:
    assign = hungarian(cost, forbidden)
    pairs = np.argwhere(assign == 1)
    return _matchset_from_pairs(pairs, cost, cost.shape[0], cost.shape[1])


def greedy(score: np.ndarray, threshold: float, maximize: bool = True,
           forbidden: np.ndarray | None = None) -> MatchSet:
    """Repeatedly take the globally best remaining cell passing the threshold.

    Deterministic tie-break by (row, col).
    """
    score = np.asarray(score, dtype=np.float64)
    m, n = score.shape
    if m == 0 or n == 0:
        return MatchSet([], list(range(m)), list(range(n)))
    work = score.copy()
    if forbidden is not None:
        work[forbidden] = -np.inf if maximize else np.inf
    pairs = kernels.greedy_pairs(work, threshold, maximize)
    return _matchset_from_pairs(pairs, score, m, n)


@dataclass(frozen=True)
class FusionResult:
    """3D detections with matched image boxes attached, plus 2D leftovers."""

    pairs: list[tuple[int, int]]
    dets3d: list[Detection]
    leftover_dets2d: list[Detection]


def fuse_detections(dets3d: list[Detection], dets2d: list[Detection],
                    cam: CameraModel, tau_fuse: float,
                    class_gate: bool = True) -> FusionResult:
    """Greedy 2D-IoU matching of projected 3D detections against 2D detections.

    Matched 3D detections carry the matched image box; unmatched 2D
    detections are returned for the second association stage.
    """
    if not dets3d or not dets2d:
        return FusionResult([], list(dets3d), list(dets2d))
    proj = [project_box(d.state, cam) for d in dets3d]
    boxes3d = np.array([p.as_row() if p is not None else (0.0, 0.0, 1e-6, 1e-6)
                        for p in proj])
    boxes2d = np.array([d.box2d.as_row() for d in dets2d])
    iou = iou_2d_matrix(boxes3d, boxes2d)
    for i, p in enumerate(proj):
        if p is None:
            iou[i, :] = 0.0
    forbidden = None
    if class_gate:
        c3 = np.array([d.state.class_id for d in dets3d])
        c2 = np.array([d.state.class_id for d in dets2d])
        forbidden = c3[:, None] != c2[None, :]
    matched = greedy(iou, tau_fuse, maximize=True, forbidden=forbidden)
    fused = list(dets3d)
    for i, j, _ in matched.matches:
        fused[i] = replace(fused[i], box2d=dets2d[j].box2d)
    leftovers = [dets2d[j] for j in matched.unmatched_cols]
    return FusionResult([(i, j) for i, j, _ in matched.matches], fused, leftovers)


def stage1(pred_states: list[ObjectState], det_states: list[ObjectState],
           cfg: TrackerConfig, affinity: np.ndarray | None = None) -> MatchSet:
    """First-stage association of tracks with 3D detections.

    With a learned/cosine/inner-product affinity matrix (scores in [0, 1],
    higher is better) the solver minimizes 1 - affinity; without one the
    scaled-Euclidean heuristic distance is the cost. Matches whose scaled
    distance exceeds tau_3d are gated away, by masking the solve when
    ``gate_before_solve`` is set and by post-filtering otherwise. Class
    mismatches are always forbidden while ``class_gate`` is on.
    """
    m, n = len(pred_states), len(det_states)
    if m == 0 or n == 0:
        return MatchSet([], list(range(m)), list(range(n)))
    t_arr = np.stack([s.as_row() for s in pred_states])
    d_arr = np.stack([s.as_row() for s in det_states])
    dist = heuristic_distance(t_arr, d_arr)
    gates = np.array([[cfg.threshold("tau_3d", det_states[j].class_id) for j in range(n)]
                      for i in range(m)])
    gate_ok = dist <= gates

    forbidden = np.zeros((m, n), dtype=bool)
    if cfg.class_gate:
        forbidden |= t_arr[:, 9:10].astype(int) != d_arr[:, 9].astype(int)[None, :]
    if cfg.gate_before_solve:
        forbidden |= ~gate_ok

    use_affinity = affinity is not None and cfg.affinity != "heuristic"
    if use_affinity:
        affinity = np.asarray(affinity, dtype=np.float64)
        if affinity.shape != (m, n):
            raise ContractError(f"affinity must be ({m}, {n}), got {affinity.shape}")
        if cfg.matcher == "hungarian":
            matched = hungarian_matchset(1.0 - affinity, forbidden)
            matched = MatchSet(
                [(i, j, float(affinity[i, j])) for i, j, _ in matched.matches],
                matched.unmatched_rows, matched.unmatched_cols)
        else:
            matched = greedy(affinity, -np.inf, maximize=True, forbidden=forbidden)
    else:
        if cfg.matcher == "hungarian":
            matched = hungarian_matchset(dist, forbidden)
        else:
            matched = greedy(dist, np.inf, maximize=False, forbidden=forbidden)

    keep = []
    dropped_rows = []
    dropped_cols = []
    for i, j, score in matched.matches:
        if gate_ok[i, j]:
            keep.append((i, j, score))
        else:
            dropped_rows.append(i)
            dropped_cols.append(j)
    return MatchSet(
        matches=keep,
        unmatched_rows=sorted(matched.unmatched_rows + dropped_rows),
        unmatched_cols=sorted(matched.unmatched_cols + dropped_cols),
    )


def stage2(tracks: list[Track], pred_states: list[ObjectState],
           leftover_dets2d: list[Detection], cam: CameraModel,
           cfg: TrackerConfig) -> MatchSet:
    """Second-stage association: projected unmatched tracks against leftover
    2D detections by greedy 2D IoU with the tau_2d threshold."""
    m, n = len(tracks), len(leftover_dets2d)
    if m == 0 or n == 0:
        return MatchSet([], list(range(m)), list(range(n)))
    proj = [project_box(s, cam) for s in pred_states]
    boxes_t = np.array([p.as_row() if p is not None else (0.0, 0.0, 1e-6, 1e-6)
                        for p in proj])
    boxes_d = np.array([d.box2d.as_row() for d in leftover_dets2d])
    iou = iou_2d_matrix(boxes_t, boxes_d)
    for i, p in enumerate(proj):
        if p is None:
            iou[i, :] = 0.0  # tracks behind the camera never match
    forbidden = None
    if cfg.class_gate:
        ct = np.array([t.state.class_id for t in tracks])
        cd = np.array([d.state.class_id for d in leftover_dets2d])
        forbidden = ct[:, None] != cd[None, :]
    tau = cfg.tau_2d
    return greedy(iou, tau, maximize=True, forbidden=forbidden)
