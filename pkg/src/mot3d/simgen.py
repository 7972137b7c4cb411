"""Synthetic scenario generation: ground-truth trajectories, surface-sampled
point clouds, noisy/duplicated detections and projected image detections.

Scenarios stress the hard cases for data association: tightly clustered
objects, crossing trajectories and duplicate-heavy detection streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import Detection, ObjectState, SpecError
from .geometry import Box2D, CameraModel, iou_3d, project_box
from .io import SequenceData, SequenceFrame
from .core import PointCloud

# class id -> (l, w, h); 0 large vehicle-like, 1 compact, 2 mid-size
CLASS_DIMS = {
    0: (4.6, 1.9, 1.7),
    1: (1.0, 1.0, 1.8),
    2: (2.0, 0.8, 1.6),
}

WORLD_X = (10.0, 42.0)
WORLD_Y = (-12.0, 12.0)


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything that defines a synthetic scene (deterministic given a seed)."""

    n_frames: int = 40
    dt: float = 0.5  # 2 Hz
    n_objects: int = 6
    classes: tuple[int, ...] = (0, 1, 2)
    layout: str = "spread"  # spread | cluster | crossing
    cluster_spacing: float = 1.5
    allow_overlap: bool = False
    spread_min_sep: float = 12.0
    crossing_min_sep: float = 0.8
    speed_min: float = 0.3
    speed_max: float = 1.2
    accel_jitter: float = 0.05
    noise_pos: float = 0.0
    noise_size: float = 0.0
    noise_theta: float = 0.0
    noise_vel: float = 0.0
    score_mean: float = 1.0
    score_std: float = 0.0
    duplicate_rate: float = 0.0
    duplicate_iou_min: float = 0.65
    duplicate_score_mean: float = 0.35
    miss_rate: float = 0.0
    cloud_density: float = 12.0  # points per square meter of box surface
    clutter_points: int = 250
    pixel_noise: float = 1.0

    def __post_init__(self) -> None:
        if self.n_frames < 1 or self.n_objects < 1 or self.dt <= 0:
            raise SpecError("n_frames, n_objects and dt must be positive")
        if self.layout not in ("spread", "cluster", "crossing"):
            raise SpecError(f"unknown layout {self.layout!r}")
        if not all(c in CLASS_DIMS for c in self.classes):
            raise SpecError(f"unknown class in {self.classes}")
        if self.layout == "cluster" and not self.allow_overlap:
            biggest = max(max(CLASS_DIMS[c][0], CLASS_DIMS[c][1]) for c in self.classes)
            if self.cluster_spacing < biggest:
                raise SpecError(
                    f"cluster_spacing {self.cluster_spacing} is below the largest box "
                    f"dimension {biggest}; set allow_overlap to permit this")
        if self.layout == "crossing" and self.n_objects % 2 != 0:
            raise SpecError("crossing layout needs an even object count")


def default_camera() -> CameraModel:
    fx = fy = 500.0
    cx, cy = 320.0, 240.0
    cam_h = 2.5
    projection = np.array([
        [cx, -fx, 0.0, 0.0],
        [cy, 0.0, -fy, fy * cam_h],
        [1.0, 0.0, 0.0, 0.0],
    ])
    return CameraModel(projection=projection, width=640, height=480)


@dataclass
class _Body:
    oid: int
    class_id: int
    pos: np.ndarray  # (x, y)
    vel: np.ndarray  # (vx, vy)
    dims: tuple[float, float, float]


def _init_bodies(spec: ScenarioSpec, rng: np.random.Generator) -> list[_Body]:
    bodies = []
    classes = [spec.classes[rng.integers(len(spec.classes))] for _ in range(spec.n_objects)]
    if spec.layout == "cluster":
        center = np.array([rng.uniform(16.0, 28.0), rng.uniform(-5.0, 5.0)])
        side = math.ceil(math.sqrt(spec.n_objects))
        heading = rng.uniform(-math.pi, math.pi)
        base_speed = rng.uniform(spec.speed_min, spec.speed_max)
        for i in range(spec.n_objects):
            gx, gy = divmod(i, side)
            offset = (np.array([gx, gy]) - (side - 1) / 2.0) * spec.cluster_spacing
            offset += rng.normal(0.0, 0.12 * spec.cluster_spacing, size=2)
            speed = base_speed * rng.uniform(0.8, 1.2)
            ang = heading + rng.normal(0.0, 0.25)
            vel = speed * np.array([math.cos(ang), math.sin(ang)])
            bodies.append(_Body(i + 1, classes[i], center + offset, vel, CLASS_DIMS[classes[i]]))
    elif spec.layout == "crossing":
        for pair in range(spec.n_objects // 2):
            cls = classes[2 * pair]
            x0 = rng.uniform(14.0, 30.0)
            vx = rng.uniform(0.2, 0.6)
            vy = rng.uniform(0.5, 1.0)
            half_span = vy * spec.n_frames * spec.dt * 0.4
            a = _Body(2 * pair + 1, cls, np.array([x0, half_span]),
                      np.array([vx, -vy]), CLASS_DIMS[cls])
            b = _Body(2 * pair + 2, cls, np.array([x0 + spec.crossing_min_sep, -half_span]),
                      np.array([vx, vy]), CLASS_DIMS[cls])
            bodies.extend([a, b])
    else:  # spread
        placed = []
        for i in range(spec.n_objects):
            for _ in range(200):
                cand = np.array([rng.uniform(*WORLD_X), rng.uniform(*WORLD_Y)])
                if all(np.linalg.norm(cand - p) >= spec.spread_min_sep for p in placed):
                    placed.append(cand)
                    break
            else:
                raise SpecError(
                    f"cannot place {spec.n_objects} objects {spec.spread_min_sep} m apart")
            speed = rng.uniform(spec.speed_min, spec.speed_max)
            ang = rng.uniform(-math.pi, math.pi)
            vel = speed * np.array([math.cos(ang), math.sin(ang)])
            bodies.append(_Body(i + 1, classes[i], placed[-1], vel, CLASS_DIMS[classes[i]]))
    return bodies


def _advance(body: _Body, dt: float, jitter: float, rng: np.random.Generator,
             bounce: bool) -> None:
    if jitter > 0:
        body.vel = body.vel + rng.normal(0.0, jitter, size=2) * dt
    nxt = body.pos + body.vel * dt
    if bounce:
        if not WORLD_X[0] <= nxt[0] <= WORLD_X[1]:
            body.vel[0] = -body.vel[0]
        if not WORLD_Y[0] <= nxt[1] <= WORLD_Y[1]:
            body.vel[1] = -body.vel[1]
        nxt = body.pos + body.vel * dt
    body.pos = nxt


def _body_state(body: _Body) -> ObjectState:
    l, w, h = body.dims
    theta = math.atan2(body.vel[1], body.vel[0])
    return ObjectState(x=float(body.pos[0]), y=float(body.pos[1]), z=h / 2.0,
                       l=l, w=w, h=h, theta=theta,
                       vx=float(body.vel[0]), vy=float(body.vel[1]),
                       class_id=body.class_id, score=1.0)


def _surface_points(state: ObjectState, density: float, rng: np.random.Generator,
                    sweep_dt: float) -> np.ndarray:
    """Sample points on the four side faces and the top of the box."""
    faces = [
        (state.l, state.h, "side_y", +1), (state.l, state.h, "side_y", -1),
        (state.w, state.h, "side_x", +1), (state.w, state.h, "side_x", -1),
        (state.l, state.w, "top", +1),
    ]
    c, s = math.cos(state.theta), math.sin(state.theta)
    rows = []
    for da, db, kind, sign in faces:
        n = max(1, int(round(da * db * density)))
        a = rng.uniform(-0.5, 0.5, size=n) * da
        b = rng.uniform(-0.5, 0.5, size=n) * db
        if kind == "side_y":
            local = np.stack([a, np.full(n, sign * state.w / 2.0), b], axis=1)
        elif kind == "side_x":
            local = np.stack([np.full(n, sign * state.l / 2.0), a, b], axis=1)
        else:
            local = np.stack([a, b, np.full(n, state.h / 2.0 - 1e-3)], axis=1)
        world = np.empty_like(local)
        world[:, 0] = c * local[:, 0] - s * local[:, 1] + state.x + state.vx * sweep_dt
        world[:, 1] = s * local[:, 0] + c * local[:, 1] + state.y + state.vy * sweep_dt
        world[:, 2] = local[:, 2] + state.z
        rows.append(world)
    pts = np.vstack(rows)
    refl = np.clip(0.25 + 0.2 * state.class_id + rng.normal(0.0, 0.05, len(pts)), 0.0, 1.0)
    dts = np.full(len(pts), sweep_dt)
    return np.column_stack([pts, refl, dts])


def _frame_cloud(gt: list[tuple[int, ObjectState]], spec: ScenarioSpec,
                 rng: np.random.Generator) -> PointCloud:
    chunks = []
    for _, state in gt:
        chunks.append(_surface_points(state, spec.cloud_density * 0.7, rng, 0.0))
        chunks.append(_surface_points(state, spec.cloud_density * 0.3, rng, -0.05))
    if spec.clutter_points:
        n = spec.clutter_points
        ground = np.column_stack([
            rng.uniform(*WORLD_X, size=n),
            rng.uniform(*WORLD_Y, size=n),
            np.abs(rng.normal(0.0, 0.03, size=n)),
            rng.uniform(0.02, 0.1, size=n),
            np.zeros(n),
        ])
        chunks.append(ground)
    if not chunks:
        return PointCloud.empty()
    return PointCloud(points=np.vstack(chunks))


def _noisy_detection(state: ObjectState, spec: ScenarioSpec,
                     rng: np.random.Generator, frame: int, source_id: int) -> Detection:
    score = 1.0 if spec.score_std == 0.0 and spec.score_mean >= 1.0 else float(
        np.clip(rng.normal(spec.score_mean, spec.score_std), 0.05, 1.0))
    new = replace(
        state,
        x=state.x + (rng.normal(0.0, spec.noise_pos) if spec.noise_pos else 0.0),
        y=state.y + (rng.normal(0.0, spec.noise_pos) if spec.noise_pos else 0.0),
        z=state.z + (rng.normal(0.0, 0.3 * spec.noise_pos) if spec.noise_pos else 0.0),
        l=max(state.l * (1.0 + (rng.normal(0.0, spec.noise_size) if spec.noise_size else 0.0)), 0.1),
        w=max(state.w * (1.0 + (rng.normal(0.0, spec.noise_size) if spec.noise_size else 0.0)), 0.1),
        h=max(state.h * (1.0 + (rng.normal(0.0, spec.noise_size) if spec.noise_size else 0.0)), 0.1),
        theta=state.theta + (rng.normal(0.0, spec.noise_theta) if spec.noise_theta else 0.0),
        vx=state.vx + (rng.normal(0.0, spec.noise_vel) if spec.noise_vel else 0.0),
        vy=state.vy + (rng.normal(0.0, spec.noise_vel) if spec.noise_vel else 0.0),
        score=score,
    )
    return Detection(state=new, frame=frame, source_id=source_id)


def _inject_duplicate(state: ObjectState, spec: ScenarioSpec,
                      rng: np.random.Generator, frame: int, source_id: int) -> Detection | None:
    sigma = 0.2
    for _ in range(20):
        cand = replace(
            state,
            x=state.x + rng.normal(0.0, sigma),
            y=state.y + rng.normal(0.0, sigma),
            theta=state.theta + rng.normal(0.0, 0.05),
            score=float(np.clip(rng.normal(spec.duplicate_score_mean, 0.08), 0.05, 0.6)),
        )
        if iou_3d(cand, state) > spec.duplicate_iou_min:
            return Detection(state=cand, frame=frame, source_id=source_id)
        sigma *= 0.7
    return None


_DET2D_PLACEHOLDER = dict(x=0.0, y=0.0, z=0.0, l=1.0, w=1.0, h=1.0,
                          theta=0.0, vx=0.0, vy=0.0)


def _image_detections(gt, cam: CameraModel, spec: ScenarioSpec,
                      rng: np.random.Generator, frame: int) -> list[Detection]:
    """2D detections: projected truth boxes with pixel noise. The 3D state
    columns are unit placeholders; consumers read class, score and the box."""
    out = []
    for _, state in gt:
        if spec.miss_rate and rng.uniform() < 0.5 * spec.miss_rate:
            continue
        box = project_box(state, cam)
        if box is None:
            continue
        if spec.pixel_noise > 0:
            jit = rng.normal(0.0, spec.pixel_noise, size=4)
            u1, v1 = box.u1 + jit[0], box.v1 + jit[1]
            u2, v2 = box.u2 + jit[2], box.v2 + jit[3]
            u1, u2 = min(u1, u2), max(u1, u2)
            v1, v2 = min(v1, v2), max(v1, v2)
            if u2 - u1 < 1.0:
                u2 = u1 + 1.0
            if v2 - v1 < 1.0:
                v2 = v1 + 1.0
            box = Box2D(u1, v1, u2, v2)
        score = float(np.clip(rng.normal(0.9, 0.05), 0.05, 1.0))
        holder = ObjectState(class_id=state.class_id, score=score, **_DET2D_PLACEHOLDER)
        out.append(Detection(state=holder, frame=frame, box2d=box, source_id=len(out)))
    return out


def generate(spec: ScenarioSpec, seed: int) -> SequenceData:
    """Deterministic scenario synthesis: (spec, seed) -> identical output."""
    rng = np.random.default_rng(seed)
    cam = default_camera()
    bodies = _init_bodies(spec, rng)
    bounce = spec.layout != "crossing"
    frames = []
    for f in range(spec.n_frames):
        if f > 0:
            for body in bodies:
                _advance(body, spec.dt, spec.accel_jitter, rng, bounce)
        gt = [(body.oid, _body_state(body)) for body in bodies]
        cloud = _frame_cloud(gt, spec, rng)
        dets3d = []
        for _, state in gt:
            if spec.miss_rate and rng.uniform() < spec.miss_rate:
                continue
            dets3d.append(_noisy_detection(state, spec, rng, f, len(dets3d)))
        if spec.duplicate_rate:
            for _, state in gt:
                if rng.uniform() < spec.duplicate_rate:
                    dup = _inject_duplicate(state, spec, rng, f, len(dets3d))
                    if dup is not None:
                        dets3d.append(dup)
        dets2d = _image_detections(gt, cam, spec, rng, f)
        frames.append(SequenceFrame(gt=gt, dets3d=dets3d, dets2d=dets2d, cloud=cloud))
    return SequenceData(dt=spec.dt, camera=cam, frames=frames)


# ---------------------------------------------------------------------------
# Presets


def _mixed_spec(idx: int) -> ScenarioSpec:
    layouts = ("cluster", "crossing", "cluster", "spread")
    layout = layouts[idx % 4]
    return ScenarioSpec(
        n_frames=28,
        n_objects={"cluster": 8, "crossing": 4, "spread": 5}[layout],
        layout=layout,
        classes=(1,) if layout == "cluster" else (0, 1, 2),
        cluster_spacing=1.05 + 0.15 * (idx % 4),
        spread_min_sep=10.0,
        crossing_min_sep=0.8 + 0.1 * (idx % 3),
        accel_jitter=0.04,
        noise_pos=0.08 + 0.02 * (idx % 5),
        noise_size=0.02,
        noise_theta=0.05,
        noise_vel={"cluster": 0.5, "crossing": 0.4, "spread": 0.15}[layout],
        score_mean=0.85,
        score_std=0.08,
        duplicate_rate=0.1 * (idx % 3),
        miss_rate=0.08,
    )


def preset_specs() -> dict[str, tuple[ScenarioSpec, int]]:
    """Named scenario presets with pinned seeds."""
    presets: dict[str, tuple[ScenarioSpec, int]] = {
        "cluster_dense": (ScenarioSpec(
            n_frames=40, n_objects=8, layout="cluster", classes=(1,),
            cluster_spacing=1.05, accel_jitter=0.04, noise_pos=0.1,
            noise_size=0.02, noise_theta=0.08, noise_vel=0.5,
            score_mean=0.85, score_std=0.08,
            duplicate_rate=0.15, miss_rate=0.08), 101),
        "crossing_pair": (ScenarioSpec(
            n_frames=30, n_objects=2, layout="crossing", classes=(1,),
            crossing_min_sep=0.8, accel_jitter=0.04, noise_pos=0.1,
            noise_size=0.02, noise_theta=0.05, noise_vel=0.4,
            score_mean=0.85, score_std=0.08, miss_rate=0.05), 202),
        "duplicates_heavy": (ScenarioSpec(
            n_frames=40, n_objects=6, layout="spread", classes=(0, 1, 2),
            spread_min_sep=8.0, noise_pos=0.12, noise_size=0.02, noise_theta=0.05,
            noise_vel=0.1, score_mean=0.85, score_std=0.08,
            duplicate_rate=0.6, duplicate_iou_min=0.7, miss_rate=0.04), 303),
        "sparse_easy": (ScenarioSpec(
            n_frames=30, n_objects=5, layout="spread", classes=(0, 1, 2),
            spread_min_sep=14.0, speed_max=0.6, noise_pos=0.08, noise_size=0.01,
            noise_theta=0.03, noise_vel=0.05, score_mean=0.9, score_std=0.05,
            miss_rate=0.02), 404),
        "zero_noise": (ScenarioSpec(
            n_frames=25, n_objects=4, layout="spread", classes=(0, 1, 2),
            spread_min_sep=12.0, speed_max=0.8, accel_jitter=0.0,
            noise_pos=0.0, noise_size=0.0, noise_theta=0.0, noise_vel=0.0,
            score_mean=1.0, score_std=0.0, pixel_noise=0.0), 505),
    }
    for idx in range(20):
        presets[f"mixed_train_{idx:02d}"] = (_mixed_spec(idx), 1000 + idx)
    for idx in range(4):
        presets[f"mixed_eval_{idx:02d}"] = (_mixed_spec(idx + 7), 9000 + idx)
    return presets


def preset_suite() -> list[str]:
    return list(preset_specs().keys())


def generate_preset(name: str, seed: int | None = None) -> SequenceData:
    presets = preset_specs()
    if name not in presets:
        raise SpecError(f"unknown preset {name!r}; available: {', '.join(sorted(presets))}")
    spec, default_seed = presets[name]
    return generate(spec, default_seed if seed is None else seed)
