"""File formats: detections, tracks, point clouds, configs and sequence manifests.

Detection records are one per line:

    frame class x y z l w h theta vx vy score [u1 v1 u2 v2]

Track records prepend a ``track_id`` column. Floats are written with
``repr`` so load(save(x)) round-trips bit-exactly. Config files are flat
``key = value`` text; sequence manifests are JSON documents referencing
per-frame files.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .core import (Detection, ObjectState, ParseError, PointCloud, Track,
                   TrackStatus, TrackerConfig, TrainConfig, ValidationError)
from .geometry import Box2D, CameraModel


def _fmt(value: float) -> str:
    return repr(float(value))


def _state_fields(state: ObjectState) -> list[str]:
    return [
        str(state.class_id), _fmt(state.x), _fmt(state.y), _fmt(state.z),
        _fmt(state.l), _fmt(state.w), _fmt(state.h), _fmt(state.theta),
        _fmt(state.vx), _fmt(state.vy), _fmt(state.score),
    ]


def _parse_state(tokens: list[str], lineno: int) -> tuple[ObjectState, Box2D | None]:
    # tokens: class x y z l w h theta vx vy score [u1 v1 u2 v2]
    if len(tokens) not in (11, 15):
        raise ParseError(f"line {lineno}: expected 11 or 15 state fields, got {len(tokens)}")
    try:
        class_id = int(tokens[0])
        vals = [float(t) for t in tokens[1:]]
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    try:
        state = ObjectState(
            x=vals[0], y=vals[1], z=vals[2], l=vals[3], w=vals[4], h=vals[5],
            theta=vals[6], vx=vals[7], vy=vals[8], class_id=class_id, score=vals[9],
        )
        box = Box2D(*vals[10:14]) if len(vals) == 14 else None
    except ValidationError as exc:
        raise ValidationError(f"line {lineno}: {exc}") from None
    return state, box


def save_detections(path: str, frames: list[list[Detection]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame_dets in frames:
            for det in frame_dets:
                parts = [str(det.frame)] + _state_fields(det.state)
                if det.box2d is not None:
                    b = det.box2d
                    parts += [_fmt(b.u1), _fmt(b.v1), _fmt(b.u2), _fmt(b.v2)]
                fh.write(" ".join(parts) + "\n")


def load_detections(path: str) -> list[list[Detection]]:
    """Detections grouped by frame, ascending from 0 to the max frame seen.

    Intermediate frames with no records come back as empty lists. Frames
    must be non-decreasing within the file.
    """
    groups: dict[int, list[Detection]] = {}
    last_frame = -1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                frame = int(tokens[0])
            except ValueError:
                raise ParseError(f"line {lineno}: bad frame index {tokens[0]!r}") from None
            if frame < 0:
                raise ValidationError(f"line {lineno}: field frame must be >= 0, got {frame}")
            if frame < last_frame:
                raise ValidationError(f"line {lineno}: field frame must be non-decreasing")
            last_frame = frame
            state, box = _parse_state(tokens[1:], lineno)
            dets = groups.setdefault(frame, [])
            dets.append(Detection(state=state, frame=frame, box2d=box, source_id=len(dets)))
    if not groups:
        return []
    n_frames = max(groups) + 1
    return [groups.get(f, []) for f in range(n_frames)]


def save_tracks(path: str, frames: list[list[Track]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for frame_idx, tracks in enumerate(frames):
            for trk in tracks:
                parts = [str(trk.track_id), str(frame_idx)] + _state_fields(trk.state)
                fh.write(" ".join(parts) + "\n")


def load_tracks(path: str) -> list[list[tuple[int, ObjectState]]]:
    """Track records grouped by frame as (track_id, state) tuples."""
    groups: dict[int, list[tuple[int, ObjectState]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            try:
                track_id = int(tokens[0])
                frame = int(tokens[1])
            except (ValueError, IndexError):
                raise ParseError(f"line {lineno}: bad track/frame columns") from None
            state, _ = _parse_state(tokens[2:], lineno)
            groups.setdefault(frame, []).append((track_id, state))
    if not groups:
        return []
    return [groups.get(f, []) for f in range(max(groups) + 1)]


def save_point_cloud(path: str, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in cloud.points:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")


def load_point_cloud(path: str) -> PointCloud:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens = line.split()
            if len(tokens) != 5:
                raise ParseError(f"line {lineno}: expected 5 point fields, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
    if not rows:
        return PointCloud.empty()
    return PointCloud(points=np.array(rows, dtype=np.float64))


# ---------------------------------------------------------------------------
# Flat key=value config files


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if field.type in ("int", int):
        return int(raw)
    if field.type in ("float", float):
        return float(raw)
    return raw


def _config_from_items(cfg_cls, items: dict[str, str], base=None):
    field_map = {f.name: f for f in dataclasses.fields(cfg_cls)}
    kwargs = dataclasses.asdict(base) if base is not None else {}
    overrides: dict[int, dict[str, float]] = dict(kwargs.pop("class_overrides", {}) or {})
    for key, raw in items.items():
        if "." in key and "class_overrides" in field_map:
            # e.g. "tau_3d.class2 = 4.0"
            base_key, _, suffix = key.partition(".")
            if base_key not in field_map or not suffix.startswith("class"):
                raise ParseError(f"unknown config key {key!r}")
            cid = int(suffix[len("class"):])
            overrides.setdefault(cid, {})[base_key] = float(raw)
            continue
        if key not in field_map:
            raise ParseError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(field_map[key], raw)
    if "class_overrides" in field_map:
        kwargs["class_overrides"] = overrides
    return cfg_cls(**kwargs)


def load_tracker_config(path: str | None, base: TrackerConfig | None = None) -> TrackerConfig:
    base = base or TrackerConfig()
    if path is None:
        return base
    with open(path, "r", encoding="utf-8") as fh:
        return _config_from_items(TrackerConfig, parse_config_text(fh.read()), base)


def load_train_config(path: str | None, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    if path is None:
        return base
    with open(path, "r", encoding="utf-8") as fh:
        return _config_from_items(TrainConfig, parse_config_text(fh.read()), base)


def save_config(path: str, cfg) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(cfg):
            value = getattr(cfg, f.name)
            if f.name == "class_overrides":
                for cid, table in value.items():
                    for key, v in table.items():
                        fh.write(f"{key}.class{cid} = {v!r}\n")
                continue
            fh.write(f"{f.name} = {value}\n")


# ---------------------------------------------------------------------------
# Sequences and manifests


@dataclass(frozen=True)
class SequenceFrame:
    """One frame of a sequence: ground truth, detections and the point cloud."""

    gt: list[tuple[int, ObjectState]]
    dets3d: list[Detection]
    dets2d: list[Detection]
    cloud: PointCloud


@dataclass(frozen=True)
class SequenceData:
    """A full sequence with its camera model and frame period."""

    dt: float
    camera: CameraModel
    frames: list[SequenceFrame]

    def __len__(self) -> int:
        return len(self.frames)


def _camera_to_json(cam: CameraModel) -> dict:
    return {
        "projection": [list(map(float, row)) for row in cam.projection],
        "width": cam.width,
        "height": cam.height,
    }


def _camera_from_json(blob: dict) -> CameraModel:
    return CameraModel(
        projection=np.array(blob["projection"], dtype=np.float64),
        width=int(blob["width"]),
        height=int(blob["height"]),
    )


def save_sequence(seq: SequenceData, out_dir: str, name: str = "scenario") -> str:
    """Write a sequence to disk and return the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for idx, frame in enumerate(seq.frames):
        gt_path = f"{name}_gt_{idx:04d}.txt"
        d3_path = f"{name}_dets3d_{idx:04d}.txt"
        d2_path = f"{name}_dets2d_{idx:04d}.txt"
        pc_path = f"{name}_cloud_{idx:04d}.txt"
        gt_tracks = [Track(state=s, track_id=tid, status=TrackStatus.CONFIRMED)
                     for tid, s in frame.gt]
        save_tracks(os.path.join(out_dir, gt_path), [[]] * idx + [gt_tracks])
        save_detections(os.path.join(out_dir, d3_path), [[]] * idx + [frame.dets3d])
        save_detections(os.path.join(out_dir, d2_path), [[]] * idx + [frame.dets2d])
        save_point_cloud(os.path.join(out_dir, pc_path), frame.cloud)
        entries.append({"gt": gt_path, "dets3d": d3_path, "dets2d": d2_path, "cloud": pc_path})
    manifest = {
        "version": 1,
        "dt": seq.dt,
        "camera": _camera_to_json(seq.camera),
        "frames": entries,
    }
    manifest_path = os.path.join(out_dir, f"{name}_manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_sequence(manifest_path: str) -> SequenceData:
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(manifest_path)
    frames = []
    for idx, entry in enumerate(manifest["frames"]):
        gt_frames = load_tracks(os.path.join(base, entry["gt"]))
        d3_frames = load_detections(os.path.join(base, entry["dets3d"]))
        d2_frames = load_detections(os.path.join(base, entry["dets2d"]))
        frames.append(SequenceFrame(
            gt=gt_frames[idx] if idx < len(gt_frames) else [],
            dets3d=d3_frames[idx] if idx < len(d3_frames) else [],
            dets2d=d2_frames[idx] if idx < len(d2_frames) else [],
            cloud=load_point_cloud(os.path.join(base, entry["cloud"])),
        ))
    return SequenceData(
        dt=float(manifest["dt"]),
        camera=_camera_from_json(manifest["camera"]),
        frames=frames,
    )
