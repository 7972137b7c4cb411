"""Tracking evaluation: CLEAR-MOT, recall-swept AMOTA/AMOTP, HOTA with its
detection/association decomposition, and feature-discrimination analysis.

Ground truth and predictions are frame lists of (id, ObjectState) tuples;
multiple sequences are evaluated jointly by accumulating counts over all of
them at each operating point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ObjectState, states_to_array
from .geometry import iou_3d_matrix
from .association import hungarian_matchset
from .interaction import cosine_affinity
from .training import _match_to_gt

logger = logging.getLogger(__name__)

FramePairs = list[tuple[list, list]]  # list of (gt_frames, pred_frames) per sequence

DIST_THRESHOLD = 2.0  # meters, BEV center distance for CLEAR/AMOTA matching
HOTA_ALPHAS = tuple(np.round(np.arange(0.05, 0.96, 0.05), 2))
N_RECALL_POINTS = 40
MIN_RECALL = 0.1
MAX_SWEEP_CANDIDATES = 128


def _looks_single(seq_like) -> bool | None:
    """True when the argument is one sequence (frames of (id, state) tuples),
    False when it is a list of sequences, None when fully empty."""
    for frame in seq_like:
        if frame:
            return isinstance(frame[0], tuple)
    return None


def _as_pairs(gt, preds) -> FramePairs:
    """Accept a single sequence or a list of sequences."""
    single = _looks_single(gt)
    if single is None:
        single = _looks_single(preds)
    if single is None or single:
        return [(gt, preds)]
    return list(zip(gt, preds))


def _frame_arrays(frame):
    ids = np.array([i for i, _ in frame], dtype=np.int64)
    states = states_to_array([s for _, s in frame])
    return ids, states


def _match_frame_dist(gt_frame, pred_frame, threshold: float):
    """Class-gated Hungarian matching on BEV center distance.

    Maximizes the match count first (forbidden cells dominate), then
    minimizes total distance. Returns (gt_idx, pred_idx, distance) triples.
    """
    if not gt_frame or not pred_frame:
        return []
    g_ids, g_states = _frame_arrays(gt_frame)
    p_ids, p_states = _frame_arrays(pred_frame)
    delta = g_states[:, None, :2] - p_states[None, :, :2]
    dist = np.sqrt(np.sum(delta * delta, axis=-1))
    forbidden = dist > threshold
    forbidden |= g_states[:, 9].astype(int)[:, None] != p_states[:, 9].astype(int)[None, :]
    ms = hungarian_matchset(dist, forbidden)
    return [(i, j, s) for i, j, s in ms.matches]


def _match_frame_iou(gt_frame, pred_frame, alpha: float):
    """Class-gated Hungarian matching maximizing count, then total 3D IoU."""
    if not gt_frame or not pred_frame:
        return []
    _, g_states = _frame_arrays(gt_frame)
    _, p_states = _frame_arrays(pred_frame)
    sim = iou_3d_matrix(g_states[:, :7], p_states[:, :7])
    forbidden = sim < alpha
    forbidden |= g_states[:, 9].astype(int)[:, None] != p_states[:, 9].astype(int)[None, :]
    ms = hungarian_matchset(-sim, forbidden)
    return [(i, j, -s) for i, j, s in ms.matches]


@dataclass
class ClearCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    ids: int = 0
    gt_total: int = 0
    dist_sum: float = 0.0

    @property
    def mota(self) -> float:
        if self.gt_total == 0:
            return 0.0
        return 1.0 - (self.fp + self.fn + self.ids) / self.gt_total

    @property
    def recall(self) -> float:
        return self.tp / self.gt_total if self.gt_total else 0.0


def clear_mot(gt, preds, threshold: float = DIST_THRESHOLD) -> ClearCounts:
    """CLEAR counts with per-frame Hungarian matching on center distance.

    An identity switch is counted whenever a ground-truth object's matched
    prediction id differs from the one at its previous matched frame.
    """
    counts = ClearCounts()
    for gt_frames, pred_frames in _as_pairs(gt, preds):
        last_match: dict[int, int] = {}
        n_frames = max(len(gt_frames), len(pred_frames))
        for f in range(n_frames):
            gt_frame = gt_frames[f] if f < len(gt_frames) else []
            pred_frame = pred_frames[f] if f < len(pred_frames) else []
            matches = _match_frame_dist(gt_frame, pred_frame, threshold)
            counts.tp += len(matches)
            counts.fp += len(pred_frame) - len(matches)
            counts.fn += len(gt_frame) - len(matches)
            counts.gt_total += len(gt_frame)
            for gi, pi, dist in matches:
                counts.dist_sum += dist
                gid = gt_frame[gi][0]
                pid = pred_frame[pi][0]
                if gid in last_match and last_match[gid] != pid:
                    counts.ids += 1
                last_match[gid] = pid
    return counts


def _filter_preds(pairs: FramePairs, score_min: float) -> FramePairs:
    out = []
    for gt_frames, pred_frames in pairs:
        filtered = [[(pid, s) for pid, s in frame if s.score >= score_min]
                    for frame in pred_frames]
        out.append((gt_frames, filtered))
    return out


def _sweep_candidates(pairs: FramePairs) -> list[float]:
    scores = sorted({s.score for _, pred_frames in pairs
                     for frame in pred_frames for _, s in frame})
    if len(scores) > MAX_SWEEP_CANDIDATES:
        idx = np.linspace(0, len(scores) - 1, MAX_SWEEP_CANDIDATES).astype(int)
        scores = [scores[i] for i in idx]
    return scores  # ascending; lower threshold admits more predictions


@dataclass
class SweepPoint:
    score_min: float
    counts: ClearCounts


def _sweep(pairs: FramePairs, threshold: float) -> list[SweepPoint]:
    points = []
    for score_min in _sweep_candidates(pairs):
        filtered = _filter_preds(pairs, score_min)
        agg = ClearCounts()
        for gt_frames, pred_frames in filtered:
            c = clear_mot(gt_frames, pred_frames, threshold)
            agg.tp += c.tp
            agg.fp += c.fp
            agg.fn += c.fn
            agg.ids += c.ids
            agg.gt_total += c.gt_total
            agg.dist_sum += c.dist_sum
        points.append(SweepPoint(score_min=score_min, counts=agg))
    return points


def _operating_points(points: list[SweepPoint]):
    """For each of the 40 recall targets, the sweep point whose achieved
    recall first reaches it (None when unachievable)."""
    targets = np.linspace(MIN_RECALL, 1.0, N_RECALL_POINTS)
    chosen: list[SweepPoint | None] = []
    for target in targets:
        best = None
        for pt in points:  # ascending score threshold = descending recall
            r = pt.counts.recall
            if r >= target and (best is None or r < best.counts.recall or
                                (r == best.counts.recall and pt.score_min > best.score_min)):
                best = pt
        chosen.append(best)
    return targets, chosen


def amota_amotp(gt, preds, threshold: float = DIST_THRESHOLD) -> tuple[float, float]:
    """Recall-swept average MOTA and average TP match distance.

    MOTAR at an operating point with achieved recall r and total GT count P:
    max(0, 1 - (IDS + FP + FN - (1 - r) P) / (r P)). Unachieved recall
    targets contribute 0 to AMOTA and are skipped for AMOTP.
    """
    pairs = _as_pairs(gt, preds)
    points = _sweep(pairs, threshold)
    if not points:
        logger.warning("no scored predictions: AMOTA is 0 by convention")
        return 0.0, float("nan")
    _, chosen = _operating_points(points)
    motars = []
    amotps = []
    for pt in chosen:
        if pt is None:
            motars.append(0.0)
            continue
        c = pt.counts
        r = c.recall
        motar = max(0.0, 1.0 - (c.ids + c.fp + c.fn - (1.0 - r) * c.gt_total) / (r * c.gt_total))
        motars.append(motar)
        if c.tp:
            amotps.append(c.dist_sum / c.tp)
    amota = float(np.mean(motars))
    amotp = float(np.mean(amotps)) if amotps else float("nan")
    return amota, amotp


def mota_best(gt, preds, threshold: float = DIST_THRESHOLD) -> tuple[float, int, float]:
    """The best MOTA over the confidence sweep plus the IDS count and the
    score threshold at that operating point."""
    pairs = _as_pairs(gt, preds)
    points = _sweep(pairs, threshold)
    if not points:
        return 0.0, 0, 0.0
    best = max(points, key=lambda p: (p.counts.mota, p.score_min))
    return best.counts.mota, best.counts.ids, best.score_min


def ids_at_threshold(gt, preds, score_min: float,
                     threshold: float = DIST_THRESHOLD) -> int:
    pairs = _filter_preds(_as_pairs(gt, preds), score_min)
    agg = 0
    for gt_frames, pred_frames in pairs:
        agg += clear_mot(gt_frames, pred_frames, threshold).ids
    return agg


# ---------------------------------------------------------------------------
# HOTA


def hota_single_alpha(gt, preds, alpha: float) -> tuple[float, float, float]:
    """(HOTA, DetA, AssA) at one localization threshold over all predictions."""
    tp = fn = fp = 0
    pair_counts: dict[tuple, int] = {}
    gt_counts: dict[tuple, int] = {}
    pr_counts: dict[tuple, int] = {}
    match_list = []
    for seq_idx, (gt_frames, pred_frames) in enumerate(_as_pairs(gt, preds)):
        n_frames = max(len(gt_frames), len(pred_frames))
        for f in range(n_frames):
            gt_frame = gt_frames[f] if f < len(gt_frames) else []
            pred_frame = pred_frames[f] if f < len(pred_frames) else []
            for gid, _ in gt_frame:
                gt_counts[(seq_idx, gid)] = gt_counts.get((seq_idx, gid), 0) + 1
            for pid, _ in pred_frame:
                pr_counts[(seq_idx, pid)] = pr_counts.get((seq_idx, pid), 0) + 1
            matches = _match_frame_iou(gt_frame, pred_frame, alpha)
            tp += len(matches)
            fn += len(gt_frame) - len(matches)
            fp += len(pred_frame) - len(matches)
            for gi, pi, _ in matches:
                key = (seq_idx, gt_frame[gi][0], pred_frame[pi][0])
                pair_counts[key] = pair_counts.get(key, 0) + 1
                match_list.append(key)
    if tp + fn + fp == 0:
        return 1.0, 1.0, 1.0
    deta = tp / (tp + fn + fp)
    if tp == 0:
        return 0.0, deta, 0.0
    ass_sum = 0.0
    for seq_idx, gid, pid in match_list:
        tpa = pair_counts[(seq_idx, gid, pid)]
        union = gt_counts[(seq_idx, gid)] + pr_counts[(seq_idx, pid)] - tpa
        ass_sum += tpa / union
    assa = ass_sum / tp
    return float(np.sqrt(deta * assa)), float(deta), float(assa)


def hota(gt, preds, alphas=HOTA_ALPHAS,
         threshold: float = DIST_THRESHOLD) -> tuple[float, float, float]:
    """HOTA/DetA/AssA averaged over localization thresholds and over the
    40-point recall sweep (unachieved recall targets contribute 0, matching
    the AMOTA convention)."""
    pairs = _as_pairs(gt, preds)
    points = _sweep(pairs, threshold)
    if not points:
        return 0.0, 0.0, 0.0
    _, chosen = _operating_points(points)
    cache: dict[float, tuple[float, float, float]] = {}
    h_vals, d_vals, a_vals = [], [], []
    for pt in chosen:
        if pt is None:
            h_vals.append(0.0)
            d_vals.append(0.0)
            a_vals.append(0.0)
            continue
        if pt.score_min not in cache:
            filtered_gt = [g for g, _ in _filter_preds(pairs, pt.score_min)]
            filtered_pr = [p for _, p in _filter_preds(pairs, pt.score_min)]
            per_alpha = [hota_single_alpha(filtered_gt, filtered_pr, a) for a in alphas]
            cache[pt.score_min] = tuple(float(np.mean([v[i] for v in per_alpha]))
                                        for i in range(3))
        h, d, a = cache[pt.score_min]
        h_vals.append(h)
        d_vals.append(d)
        a_vals.append(a)
    return float(np.mean(h_vals)), float(np.mean(d_vals)), float(np.mean(a_vals))


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricReport:
    amota: float
    amotp: float
    mota_best: float
    ids_at_best: int
    hota: float
    deta: float
    assa: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            f"AMOTA      {self.amota:.4f}",
            f"AMOTP      {self.amotp:.4f}",
            f"MOTA(best) {self.mota_best:.4f}",
            f"IDS(best)  {self.ids_at_best}",
            f"HOTA       {self.hota:.4f}",
            f"DetA       {self.deta:.4f}",
            f"AssA       {self.assa:.4f}",
        ]
        for cid in sorted(self.per_class):
            row = self.per_class[cid]
            out.append(f"class {cid}: amota {row['amota']:.4f} amotp {row['amotp']:.4f} "
                       f"hota {row['hota']:.4f}")
        return out

    def csv_rows(self) -> list[list[str]]:
        rows = [["metric", "class", "value"]]
        for name in ("amota", "amotp", "mota_best", "ids_at_best", "hota", "deta", "assa"):
            rows.append([name, "all", repr(float(getattr(self, name)))])
        for cid in sorted(self.per_class):
            for name, value in self.per_class[cid].items():
                rows.append([name, str(cid), repr(float(value))])
        return rows


def _filter_class(frames, class_id: int):
    return [[(oid, s) for oid, s in frame if s.class_id == class_id] for frame in frames]


def evaluate(gt, preds, threshold: float = DIST_THRESHOLD,
             per_class: bool = True) -> MetricReport:
    """Full report over one or more sequences."""
    pairs = _as_pairs(gt, preds)
    gts = [g for g, _ in pairs]
    prs = [p for _, p in pairs]
    amota, amotp = amota_amotp(gts, prs, threshold)
    best_mota, best_ids, _ = mota_best(gts, prs, threshold)
    h, d, a = hota(gts, prs, threshold=threshold)
    report = MetricReport(amota=amota, amotp=amotp, mota_best=best_mota,
                          ids_at_best=best_ids, hota=h, deta=d, assa=a)
    if per_class:
        class_ids = sorted({s.class_id for g in gts for frame in g for _, s in frame})
        for cid in class_ids:
            cg = [_filter_class(g, cid) for g in gts]
            cp = [_filter_class(p, cid) for p in prs]
            c_amota, c_amotp = amota_amotp(cg, cp, threshold)
            c_h, _, _ = hota(cg, cp, threshold=threshold)
            report.per_class[cid] = {"amota": c_amota, "amotp": c_amotp, "hota": c_h}
    return report


# ---------------------------------------------------------------------------
# Discrimination analysis


def jsd(p_counts: np.ndarray, q_counts: np.ndarray, eps: float = 1e-12) -> float:
    """Jensen-Shannon divergence (base-2 logs) between two histograms.

    Bounded in [0, 1]; 0 for identical distributions, 1 for disjoint support.
    Zero-count bins are smoothed with ``eps`` before the logs.
    """
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("histograms must have positive mass")
    p = p / p.sum() + eps
    q = q / q.sum() + eps
    m = 0.5 * (p + q)
    kl_pm = float(np.sum(p * np.log2(p / m)))
    kl_qm = float(np.sum(q * np.log2(q / m)))
    return 0.5 * kl_pm + 0.5 * kl_qm


@dataclass
class Population:
    values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if self.values.size else float("nan")


@dataclass
class DiscriminationReport:
    """Same- vs different-object separation of cosine similarities and affinities."""

    cos_same: Population
    cos_diff: Population
    aff_same: Population
    aff_diff: Population
    jsd_cosine: float
    jsd_affinity: float
    bins: int
    complete: bool
    cos_hist: tuple = ()  # (same_counts, diff_counts, bin_edges)
    aff_hist: tuple = ()

    def lines(self) -> list[str]:
        out = []
        if not self.complete:
            out.append("report incomplete: a population is empty")
        out.append(f"cosine   same mean {self.cos_same.mean:.4f}  diff mean {self.cos_diff.mean:.4f}  "
                   f"JSD {self.jsd_cosine:.4f}")
        out.append(f"affinity same mean {self.aff_same.mean:.4f}  diff mean {self.aff_diff.mean:.4f}  "
                   f"JSD {self.jsd_affinity:.4f}")
        return out


def _histogram_pair(same: np.ndarray, diff: np.ndarray, bins: int):
    lo = float(min(same.min(), diff.min()))
    hi = float(max(same.max(), diff.max()))
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    return np.histogram(same, bins=edges)[0], np.histogram(diff, bins=edges)[0], edges


def discrimination_report(model, sequences, tau_gt: float,
                          bins: int = 64) -> DiscriminationReport:
    """Split pairwise cosine similarities and affinities into same-object and
    different-object (intra-class) populations over consecutive frame pairs."""
    from .features import shape_descriptors

    cos_same, cos_diff, aff_same, aff_diff = [], [], [], []
    for seq in sequences:
        for t in range(1, len(seq.frames)):
            prev, curr = seq.frames[t - 1], seq.frames[t]
            if not prev.dets3d or not curr.dets3d:
                continue
            prev_states = [d.state for d in prev.dets3d]
            curr_states = [d.state for d in curr.dets3d]
            prev_ids = _match_to_gt(prev_states, prev.gt, tau_gt)
            curr_ids = _match_to_gt(curr_states, curr.gt, tau_gt)
            t_arr = states_to_array(prev_states)
            d_arr = states_to_array(curr_states)
            affinity, t_feat, d_feat = model.infer_with_features(
                t_arr, d_arr,
                shape_descriptors(t_arr, prev.cloud),
                shape_descriptors(d_arr, curr.cloud))
            cos = cosine_affinity(t_feat, d_feat)
            for m in range(len(prev_states)):
                if prev_ids[m] < 0:
                    continue
                for n in range(len(curr_states)):
                    if curr_ids[n] < 0:
                        continue
                    if prev_ids[m] == curr_ids[n]:
                        cos_same.append(cos[m, n])
                        aff_same.append(affinity[m, n])
                    elif prev_states[m].class_id == curr_states[n].class_id:
                        cos_diff.append(cos[m, n])
                        aff_diff.append(affinity[m, n])
    pops = [np.asarray(v, dtype=np.float64) for v in (cos_same, cos_diff, aff_same, aff_diff)]
    complete = all(p.size for p in pops)
    cos_hist = aff_hist = ()
    if complete:
        cs, cd, c_edges = _histogram_pair(pops[0], pops[1], bins)
        as_, ad, a_edges = _histogram_pair(pops[2], pops[3], bins)
        jsd_cos = jsd(cs, cd)
        jsd_aff = jsd(as_, ad)
        cos_hist = (cs, cd, c_edges)
        aff_hist = (as_, ad, a_edges)
    else:
        jsd_cos = jsd_aff = float("nan")
    return DiscriminationReport(
        cos_same=Population(pops[0]), cos_diff=Population(pops[1]),
        aff_same=Population(pops[2]), aff_diff=Population(pops[3]),
        jsd_cosine=jsd_cos, jsd_affinity=jsd_aff, bins=bins, complete=complete,
        cos_hist=cos_hist, aff_hist=aff_hist)
