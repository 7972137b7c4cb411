"""Shared domain types, configuration and validation for the tracking pipeline.

All objects live in a global, pre-transformed metric frame: x/y span the
ground plane, z points up, headings are yaw angles about z. Every type here
is immutable value data and safe to share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

TWO_PI = 2.0 * math.pi

# Column layout of the 11-dim object state used throughout the package.
STATE_DIM = 11
IX, IY, IZ, IL, IW, IH, ITHETA, IVX, IVY, ICLASS, ISCORE = range(STATE_DIM)


class ParseError(ValueError):
    """A file record could not be parsed (message carries the line number)."""


class ValidationError(ValueError):
    """A domain invariant was violated (message names the offending field)."""


class DomainError(ValueError):
    """An argument is outside a function's domain (e.g. non-positive dt)."""


class ContractError(ValueError):
    """Caller broke an interface contract, typically a shape mismatch."""


class SpecError(ValueError):
    """A scenario specification is infeasible or inconsistent."""


class NumericError(ArithmeticError):
    """A numerical operation failed (singular system, NaN gradients, ...)."""


def normalize_angle(theta: float) -> float:
    """Wrap an angle in radians to the half-open interval (-pi, pi].

    Idempotent: values already in range are returned bit-identically.
    """
    if not math.isfinite(theta):
        raise DomainError(f"angle must be finite, got {theta}")
    if -math.pi < theta <= math.pi:
        return theta
    return math.pi - (math.pi - theta) % TWO_PI


def _require_finite(name: str, value: float) -> None:
    if not math.isfinite(value):
        raise ValidationError(f"field {name} must be finite, got {value}")


@dataclass(frozen=True)
class ObjectState:
    """11-dim object state: pose, box size, heading, planar velocity, class, score.

    Units are meters, radians and m/s. The heading is normalized to
    (-pi, pi] at construction; sizes must be strictly positive and the
    confidence score must lie in [0, 1].
    """

    x: float
    y: float
    z: float
    l: float
    w: float
    h: float
    theta: float
    vx: float = 0.0
    vy: float = 0.0
    class_id: int = 0
    score: float = 1.0

    def __post_init__(self) -> None:
        for name in ("x", "y", "z", "vx", "vy"):
            _require_finite(name, getattr(self, name))
        for name in ("l", "w", "h"):
            value = getattr(self, name)
            _require_finite(name, value)
            if value <= 0.0:
                raise ValidationError(f"field {name} must be > 0, got {value}")
        _require_finite("score", self.score)
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"field score must be in [0, 1], got {self.score}")
        if self.class_id < 0 or int(self.class_id) != self.class_id:
            raise ValidationError(f"field class_id must be a non-negative integer, got {self.class_id}")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.l, self.w, self.h, self.theta,
             self.vx, self.vy, float(self.class_id), self.score],
            dtype=np.float64,
        )

    @classmethod
    def from_row(cls, row: np.ndarray) -> "ObjectState":
        if len(row) != STATE_DIM:
            raise ContractError(f"state row must have {STATE_DIM} entries, got {len(row)}")
        return cls(
            x=float(row[IX]), y=float(row[IY]), z=float(row[IZ]),
            l=float(row[IL]), w=float(row[IW]), h=float(row[IH]),
            theta=float(row[ITHETA]), vx=float(row[IVX]), vy=float(row[IVY]),
            class_id=int(row[ICLASS]), score=float(row[ISCORE]),
        )

    def box7(self) -> np.ndarray:
        """The geometric part (x, y, z, l, w, h, theta) as a 7-vector."""
        return np.array([self.x, self.y, self.z, self.l, self.w, self.h, self.theta], dtype=np.float64)


def states_to_array(states) -> np.ndarray:
    """Stack ObjectStates into an (N, 11) float64 matrix (empty-safe)."""
    if len(states) == 0:
        return np.zeros((0, STATE_DIM), dtype=np.float64)
    return np.stack([s.as_row() for s in states])


@dataclass(frozen=True)
class Detection:
    """A per-frame detection: an object state plus optional image-plane box."""

    state: ObjectState
    frame: int
    box2d: "object | None" = None  # geometry.Box2D when present
    source_id: int = 0

    def __post_init__(self) -> None:
        if self.frame < 0:
            raise ValidationError(f"field frame must be >= 0, got {self.frame}")


class TrackStatus:
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DEAD = "dead"


@dataclass(frozen=True)
class Track:
    """A tracked object with identity and lifecycle bookkeeping."""

    state: ObjectState
    track_id: int
    age: int = 1
    hits: int = 1
    misses: int = 0
    status: str = TrackStatus.TENTATIVE

    def __post_init__(self) -> None:
        if self.track_id <= 0:
            raise ValidationError(f"field track_id must be positive, got {self.track_id}")
        if self.age < 1:
            raise ValidationError(f"field age must be >= 1, got {self.age}")
        if self.age < self.hits:
            raise ValidationError(f"field age ({self.age}) must be >= hits ({self.hits})")
        if self.misses < 0:
            raise ValidationError(f"field misses must be >= 0, got {self.misses}")
        if self.status not in (TrackStatus.TENTATIVE, TrackStatus.CONFIRMED, TrackStatus.DEAD):
            raise ValidationError(f"field status invalid: {self.status}")


@dataclass(frozen=True)
class PointCloud:
    """A merged point sweep: rows of (x, y, z, reflectance, dt) with dt <= 0."""

    points: np.ndarray  # (P, 5) float64, read-only

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 5:
            raise ValidationError(f"field points must be (P, 5), got {pts.shape}")
        if pts.size:
            if not np.all(np.isfinite(pts)):
                raise ValidationError("field points must be finite")
            if np.any(pts[:, 4] > 0.0):
                raise ValidationError("field dt must be <= 0 (past sweeps)")
            if np.any((pts[:, 3] < 0.0) | (pts[:, 3] > 1.0)):
                raise ValidationError("field r must be in [0, 1]")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(points=np.zeros((0, 5), dtype=np.float64))


MATCHERS = ("hungarian", "greedy")
MOTION_MODELS = ("velocity", "kalman")
AFFINITY_MODES = ("learned", "heuristic", "cosine", "inner_product")


@dataclass(frozen=True)
class TrackerConfig:
    """All tracking thresholds and mode switches.

    Thresholds are class-agnostic; `class_overrides` maps a class id to a
    {field: value} dict consulted for tau_fuse/tau_2d/tau_3d/tau_rej.
    """

    tau_fuse: float = 0.1
    tau_2d: float = 0.3
    tau_3d: float = 3.0
    tau_rej: float = 0.6
    tau_gt: float = 0.55
    rejection: bool = True
    max_misses: int = 2
    min_hits: int = 1
    matcher: str = "hungarian"
    motion: str = "velocity"
    affinity: str = "learned"
    class_gate: bool = True
    gate_before_solve: bool = False
    # Kalman noise scales (diagonal Q and R); see motion module.
    kf_q_pos: float = 0.05
    kf_q_size: float = 0.01
    kf_q_theta: float = 0.01
    kf_q_vel: float = 0.5
    kf_r_pos: float = 0.1
    kf_r_size: float = 0.05
    kf_r_theta: float = 0.05
    class_overrides: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("tau_fuse", "tau_2d", "tau_rej", "tau_gt"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"field {name} must be in [0, 1], got {value}")
        if self.tau_3d <= 0.0:
            raise ValidationError(f"field tau_3d must be > 0, got {self.tau_3d}")
        if self.max_misses < 1:
            raise ValidationError(f"field max_misses must be >= 1, got {self.max_misses}")
        if self.min_hits < 1:
            raise ValidationError(f"field min_hits must be >= 1, got {self.min_hits}")
        if self.matcher not in MATCHERS:
            raise ValidationError(f"field matcher must be one of {MATCHERS}, got {self.matcher}")
        if self.motion not in MOTION_MODELS:
            raise ValidationError(f"field motion must be one of {MOTION_MODELS}, got {self.motion}")
        if self.affinity not in AFFINITY_MODES:
            raise ValidationError(f"field affinity must be one of {AFFINITY_MODES}, got {self.affinity}")

    def threshold(self, name: str, class_id: int) -> float:
        """Per-class override when configured, the global value otherwise."""
        override = self.class_overrides.get(class_id)
        if override and name in override:
            return override[name]
        return getattr(self, name)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters for the affinity network."""

    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    sigma_x: float = 0.01
    sigma_y: float = 0.01
    drop_min: float = 0.0
    drop_max: float = 0.2
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 0.03
    rng_seed: int = 0
    # Network architecture.
    feat_dim: int = 16
    heads: int = 4
    passes: int = 4
    interaction: bool = True
    affinity_head: str = "ffn"

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_min <= self.drop_max <= 1.0:
            raise ValidationError(
                f"fields drop_min/drop_max must satisfy 0 <= min <= max <= 1, got {self.drop_min}/{self.drop_max}")
        if self.sigma_x < 0.0 or self.sigma_y < 0.0:
            raise ValidationError("fields sigma_x/sigma_y must be >= 0")
        if self.epochs < 0:
            raise ValidationError(f"field epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"field batch_size must be >= 1, got {self.batch_size}")
        if self.feat_dim % 2 != 0:
            raise ValidationError(f"field feat_dim must be even, got {self.feat_dim}")
        if self.feat_dim % self.heads != 0:
            raise ValidationError(f"field heads ({self.heads}) must divide feat_dim ({self.feat_dim})")
        if self.passes < 1:
            raise ValidationError(f"field passes must be >= 1, got {self.passes}")
        if self.affinity_head not in ("ffn", "cosine", "inner_product"):
            raise ValidationError(f"field affinity_head invalid: {self.affinity_head}")


def config_replace(cfg, **kwargs):
    """Return a copy of a frozen config with fields replaced (validated)."""
    return replace(cfg, **kwargs)


def config_field_names(cfg_cls) -> tuple[str, ...]:
    return tuple(f.name for f in fields(cfg_cls))
