"""Oriented-box overlap in BEV/3D, image projection and 2D IoU."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import ContractError, ObjectState, ValidationError


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image box with pixel corners (u1, v1) top-left exclusive-free."""

    u1: float
    v1: float
    u2: float
    v2: float

    def __post_init__(self) -> None:
        for name in ("u1", "v1", "u2", "v2"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"field {name} must be finite")
        if not (self.u1 < self.u2 and self.v1 < self.v2):
            raise ValidationError(
                f"box must have positive area, got ({self.u1}, {self.v1}, {self.u2}, {self.v2})")

    @property
    def area(self) -> float:
        return (self.u2 - self.u1) * (self.v2 - self.v1)

    def as_row(self) -> np.ndarray:
        return np.array([self.u1, self.v1, self.u2, self.v2], dtype=np.float64)


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: 3x4 projection matrix plus image size in pixels."""

    projection: np.ndarray
    width: int
    height: int

    def __post_init__(self) -> None:
        mat = np.asarray(self.projection, dtype=np.float64)
        if mat.shape != (3, 4):
            raise ValidationError(f"field projection must be 3x4, got {mat.shape}")
        if not np.all(np.isfinite(mat)):
            raise ValidationError("field projection must be finite")
        if np.allclose(mat[2, :3], 0.0):
            raise ValidationError("field projection third row must be nonzero")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("fields width/height must be positive")
        mat = mat.copy()
        mat.flags.writeable = False
        object.__setattr__(self, "projection", mat)


def iou_2d(a: Box2D, b: Box2D) -> float:
    """Intersection-over-union of two image boxes; symmetric, in [0, 1]."""
    iu = min(a.u2, b.u2) - max(a.u1, b.u1)
    iv = min(a.v2, b.v2) - max(a.v1, b.v1)
    if iu <= 0.0 or iv <= 0.0:
        return 0.0
    inter = iu * iv
    return inter / (a.area + b.area - inter)


def iou_2d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise 2D IoU for (M, 4) and (N, 4) corner arrays."""
    if boxes_a.size == 0 or boxes_b.size == 0:
        return np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    a = boxes_a[:, None, :]
    b = boxes_b[None, :, :]
    iu = np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    iv = np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    inter = np.clip(iu, 0.0, None) * np.clip(iv, 0.0, None)
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def iou_3d(a: ObjectState, b: ObjectState) -> float:
    """3D IoU of two upright boxes (BEV polygon clip x vertical overlap).

    Equals 1.0 only for identical boxes, up to the theta +/- pi symmetry of
    boxes with l == w.
    """
    return float(kernels.iou3d_pair(a.box7(), b.box7()))


def iou_3d_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise 3D IoU for (M, 7) and (N, 7) box arrays."""
    boxes_a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    boxes_b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    if boxes_a.ndim != 2 or boxes_a.shape[1] != 7 or boxes_b.ndim != 2 or boxes_b.shape[1] != 7:
        raise ContractError("box arrays must be (N, 7)")
    if boxes_a.shape[0] == 0 or boxes_b.shape[0] == 0:
        return np.zeros((boxes_a.shape[0], boxes_b.shape[0]), dtype=np.float64)
    return kernels.iou3d_matrix(boxes_a, boxes_b)


def box_corners_3d(state: ObjectState) -> np.ndarray:
    """The 8 world-frame corners of an upright box, shape (8, 3)."""
    c = math.cos(state.theta)
    s = math.sin(state.theta)
    hl, hw, hh = 0.5 * state.l, 0.5 * state.w, 0.5 * state.h
    corners = np.empty((8, 3), dtype=np.float64)
    i = 0
    for sx in (hl, -hl):
        for sy in (hw, -hw):
            for sz in (hh, -hh):
                corners[i, 0] = c * sx - s * sy + state.x
                corners[i, 1] = s * sx + c * sy + state.y
                corners[i, 2] = sz + state.z
                i += 1
    return corners


NEAR_PLANE = 0.1  # meters; corners closer than this are dropped before projection


def project_box(state: ObjectState, cam: CameraModel, near: float = NEAR_PLANE) -> Box2D | None:
    """Project a 3D box into the image: axis-aligned hull of visible corners,
    clipped to image bounds. None when no corner is in front of the camera or
    the clipped hull is empty."""
    corners = box_corners_3d(state)
    homo = np.hstack([corners, np.ones((8, 1))])
    proj = homo @ cam.projection.T  # (8, 3)
    depth = proj[:, 2]
    visible = depth >= near
    if not np.any(visible):
        return None
    u = proj[visible, 0] / depth[visible]
    v = proj[visible, 1] / depth[visible]
    u1 = max(float(np.min(u)), 0.0)
    v1 = max(float(np.min(v)), 0.0)
    u2 = min(float(np.max(u)), float(cam.width))
    v2 = min(float(np.max(v)), float(cam.height))
    if u1 >= u2 or v1 >= v2:
        return None
    return Box2D(u1, v1, u2, v2)
