"""Per-frame tracking pipeline: predict, fuse, associate in two stages,
update, manage lifecycles, reject overlapping duplicates, emit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .association import MatchSet, fuse_detections, stage1, stage2
from .core import (Detection, DomainError, ObjectState, Track, TrackStatus,
                   TrackerConfig, states_to_array)
from .features import shape_descriptors
from .geometry import CameraModel, iou_3d_matrix
from .interaction import (AffinityModel, cosine_affinity, heuristic_distance,
                          inner_product_affinity)
from .io import SequenceData
from .motion import (KalmanState, kalman_init, kalman_predict,
                     kalman_state_to_object, kalman_update, predict_velocity,
                     update_assign)


@dataclass
class _LiveTrack:
    """Mutable tracker-internal record; immutable Track snapshots are emitted."""

    track_id: int
    state: ObjectState
    age: int = 1
    hits: int = 1
    misses: int = 0
    status: str = TrackStatus.TENTATIVE
    kalman: KalmanState | None = None

    def snapshot(self) -> Track:
        return Track(state=self.state, track_id=self.track_id, age=self.age,
                     hits=self.hits, misses=self.misses, status=self.status)


@dataclass
class StepTrace:
    """Optional per-frame debug record of the association decisions."""

    frame: int
    fusion_pairs: list[tuple[int, int]] = field(default_factory=list)
    stage1: list[tuple[int, int, float]] = field(default_factory=list)
    stage2: list[tuple[int, int, float]] = field(default_factory=list)
    affinity: np.ndarray | None = None


class Tracker:
    """Stateful per-sequence tracker; one instance per sequence, single thread."""

    def __init__(self, cfg: TrackerConfig, model: AffinityModel | None = None):
        if cfg.affinity == "learned" and model is None:
            raise DomainError("learned affinity requires a model checkpoint")
        if cfg.affinity in ("cosine", "inner_product") and model is None:
            raise DomainError(f"{cfg.affinity} affinity requires a model checkpoint")
        self.cfg = cfg
        self.model = model
        self.frame_idx = 0
        self.next_id = 1
        self.tracks: list[_LiveTrack] = []
        self.prev_cloud = None
        self.last_trace: StepTrace | None = None

    # -- affinity providers --------------------------------------------------

    def _affinity_matrix(self, prev_states, det_states, cloud) -> np.ndarray | None:
        cfg = self.cfg
        if cfg.affinity == "heuristic":
            return None
        t_arr = states_to_array(prev_states)
        d_arr = states_to_array(det_states)
        t_desc = shape_descriptors(t_arr, self.prev_cloud) if len(prev_states) else np.zeros((0, 18))
        d_desc = shape_descriptors(d_arr, cloud)
        if cfg.affinity == "learned":
            return self.model.infer(t_arr, d_arr, t_desc, d_desc)
        t_feat, d_feat = self.model.infer_features(t_arr, d_arr, t_desc, d_desc)
        if cfg.affinity == "cosine":
            return 0.5 * (cosine_affinity(t_feat, d_feat) + 1.0)
        # inner product: squash the unbounded scores into (0, 1)
        ip = inner_product_affinity(t_feat, d_feat)
        return 1.0 / (1.0 + np.exp(-np.clip(ip, -30.0, 30.0)))

    # -- lifecycle -----------------------------------------------------------

    def _birth(self, det: Detection) -> None:
        lt = _LiveTrack(track_id=self.next_id, state=det.state)
        if self.cfg.motion == "kalman":
            lt.kalman = kalman_init(det.state, self.cfg)
        if lt.hits >= self.cfg.min_hits:
            lt.status = TrackStatus.CONFIRMED
        self.next_id += 1
        self.tracks.append(lt)

    def _update_matched(self, lt: _LiveTrack, det: Detection) -> None:
        if self.cfg.motion == "kalman":
            lt.kalman = kalman_update(lt.kalman, det, self.cfg)
            lt.state = kalman_state_to_object(lt.kalman, det.state)
            lt.hits += 1
            lt.misses = 0
        else:
            updated = update_assign(lt.snapshot(), det)
            lt.state = updated.state
            lt.hits = updated.hits
            lt.misses = updated.misses
        if lt.status == TrackStatus.TENTATIVE and lt.hits >= self.cfg.min_hits:
            lt.status = TrackStatus.CONFIRMED

    def reject_overlaps(self) -> None:
        """Kill the lower-age member of any same-class pair overlapping more
        than tau_rej in 3D IoU; equal ages keep the lower track id. Pairs are
        processed in descending-IoU order and dead tracks drop out of later
        pairs."""
        if not self.cfg.rejection:
            return
        live = [lt for lt in self.tracks if lt.status != TrackStatus.DEAD]
        if len(live) < 2:
            return
        boxes = np.stack([lt.state.box7() for lt in live])
        iou = iou_3d_matrix(boxes, boxes)
        pairs = []
        for i in range(len(live)):
            for j in range(i + 1, len(live)):
                if live[i].state.class_id != live[j].state.class_id:
                    continue
                tau = self.cfg.threshold("tau_rej", live[i].state.class_id)
                if iou[i, j] > tau:
                    pairs.append((-iou[i, j], live[i].track_id, live[j].track_id, i, j))
        pairs.sort()
        for _, _, _, i, j in pairs:
            a, b = live[i], live[j]
            if a.status == TrackStatus.DEAD or b.status == TrackStatus.DEAD:
                continue
            if a.age < b.age:
                loser = a
            elif b.age < a.age:
                loser = b
            else:
                loser = a if a.track_id > b.track_id else b
            loser.status = TrackStatus.DEAD

    # -- main step -----------------------------------------------------------

    def step(self, dets3d: list[Detection], dets2d: list[Detection],
             cloud, dt: float, cam: CameraModel,
             trace: bool = False) -> list[Track]:
        """Advance one frame and return the confirmed tracks to emit."""
        if dt <= 0.0:
            raise DomainError(f"dt must be > 0, got {dt}")
        cfg = self.cfg
        step_trace = StepTrace(frame=self.frame_idx) if trace else None

        for lt in self.tracks:
            lt.age += 1

        # motion prediction
        prev_states = [lt.state for lt in self.tracks]
        if cfg.motion == "kalman":
            for lt in self.tracks:
                lt.kalman = kalman_predict(lt.kalman, dt, cfg)
            pred_states = [kalman_state_to_object(lt.kalman, lt.state) for lt in self.tracks]
        else:
            pred_states = [predict_velocity(lt.snapshot(), dt) for lt in self.tracks]

        # fusion of 3D and 2D detections
        fusion = fuse_detections(dets3d, dets2d, cam, cfg.tau_fuse, cfg.class_gate)
        dets3d = fusion.dets3d
        if step_trace is not None:
            step_trace.fusion_pairs = fusion.pairs

        # first stage: tracks vs 3D detections
        det_states = [d.state for d in dets3d]
        affinity = self._affinity_matrix(prev_states, det_states, cloud)
        if step_trace is not None and affinity is not None:
            step_trace.affinity = affinity.copy()
        s1 = stage1(pred_states, det_states, cfg, affinity)
        if step_trace is not None:
            step_trace.stage1 = list(s1.matches)

        for ti, di, _ in s1.matches:
            self._update_matched(self.tracks[ti], dets3d[di])

        # second stage: unmatched tracks vs leftover 2D detections
        um_tracks = [self.tracks[i] for i in s1.unmatched_rows]
        um_pred = [pred_states[i] for i in s1.unmatched_rows]
        s2 = stage2([lt.snapshot() for lt in um_tracks], um_pred,
                    fusion.leftover_dets2d, cam, cfg)
        if step_trace is not None:
            step_trace.stage2 = [(um_tracks[i].track_id, j, s) for i, j, s in s2.matches]
        matched2 = set()
        for local_i, _, _ in s2.matches:
            lt = um_tracks[local_i]
            # image-only evidence: coast on the predicted state, stay alive
            lt.state = um_pred[local_i]
            lt.misses = 0
            matched2.add(lt.track_id)

        # unmatched tracks coast and may die
        for local_i, lt in enumerate(um_tracks):
            if lt.track_id in matched2:
                continue
            lt.state = um_pred[local_i]
            lt.misses += 1
            if lt.misses >= cfg.max_misses:
                lt.status = TrackStatus.DEAD

        # births from unmatched 3D detections
        for di in s1.unmatched_cols:
            self._birth(dets3d[di])

        self.reject_overlaps()
        self.tracks = [lt for lt in self.tracks if lt.status != TrackStatus.DEAD]

        self.prev_cloud = cloud
        self.frame_idx += 1
        self.last_trace = step_trace
        return [lt.snapshot() for lt in self.tracks
                if lt.status == TrackStatus.CONFIRMED]


def run_sequence(seq: SequenceData, cfg: TrackerConfig,
                 model: AffinityModel | None = None,
                 trace: bool = False) -> list[list[Track]]:
    """Track a whole sequence, returning the emitted tracks per frame."""
    tracker = Tracker(cfg, model)
    out = []
    traces = []
    for frame in seq.frames:
        out.append(tracker.step(frame.dets3d, frame.dets2d, frame.cloud,
                                seq.dt, seq.camera, trace=trace))
        if trace:
            traces.append(tracker.last_trace)
    if trace:
        return out, traces
    return out
