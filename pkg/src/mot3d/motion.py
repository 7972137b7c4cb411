"""Track state prediction and update.

Two interchangeable models: the default velocity model propagates the
ground-plane position with the detection's own velocity estimate and adopts
each matched detection state wholesale; the constant-velocity Kalman filter
is kept as the classical baseline.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .core import (Detection, DomainError, NumericError, ObjectState, Track,
                   TrackerConfig, normalize_angle)

logger = logging.getLogger(__name__)

KF_DIM = 9  # x, y, z, l, w, h, theta, vx, vy
KF_OBS = 7  # x, y, z, l, w, h, theta


def predict_velocity(track: Track, dt: float) -> ObjectState:
    """Advance the ground-plane position by dt * (vx, vy); all else unchanged."""
    if dt <= 0.0:
        raise DomainError(f"dt must be > 0, got {dt}")
    s = track.state
    return replace(s, x=s.x + dt * s.vx, y=s.y + dt * s.vy)


def update_assign(track: Track, det: Detection) -> Track:
    """Adopt the detection state as the new track state (velocity included)."""
    return replace(track, state=det.state, hits=track.hits + 1, misses=0)


@dataclass(frozen=True)
class KalmanState:
    """Gaussian belief over the 9-dim state (pose 7 + planar velocity 2)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64).reshape(KF_DIM)
        cov = np.asarray(self.cov, dtype=np.float64).reshape(KF_DIM, KF_DIM)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def is_psd(self) -> bool:
        try:
            np.linalg.cholesky(self.cov + 1e-12 * np.eye(KF_DIM))
            return True
        except np.linalg.LinAlgError:
            return False


def _q_diag(cfg: TrackerConfig) -> np.ndarray:
    return np.array([
        cfg.kf_q_pos, cfg.kf_q_pos, cfg.kf_q_pos,
        cfg.kf_q_size, cfg.kf_q_size, cfg.kf_q_size,
        cfg.kf_q_theta, cfg.kf_q_vel, cfg.kf_q_vel,
    ], dtype=np.float64)


def _r_diag(cfg: TrackerConfig) -> np.ndarray:
    return np.array([
        cfg.kf_r_pos, cfg.kf_r_pos, cfg.kf_r_pos,
        cfg.kf_r_size, cfg.kf_r_size, cfg.kf_r_size,
        cfg.kf_r_theta,
    ], dtype=np.float64)


def kalman_init(state: ObjectState, cfg: TrackerConfig) -> KalmanState:
    mean = np.array([state.x, state.y, state.z, state.l, state.w, state.h,
                     state.theta, state.vx, state.vy], dtype=np.float64)
    cov = np.diag([0.5, 0.5, 0.5, 0.1, 0.1, 0.1, 0.1, 1.0, 1.0]).astype(np.float64)
    return KalmanState(mean=mean, cov=cov)


def _transition(dt: float) -> np.ndarray:
    f = np.eye(KF_DIM)
    f[0, 7] = dt
    f[1, 8] = dt
    return f


def _ensure_psd(cov: np.ndarray) -> np.ndarray:
    """Symmetrize and clamp negative eigenvalues; logs when repair was needed."""
    sym = 0.5 * (cov + cov.T)
    try:
        np.linalg.cholesky(sym + 1e-12 * np.eye(KF_DIM))
        return sym
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(sym)
        clipped = np.clip(vals, 0.0, None)
        logger.warning("covariance lost PSD (min eig %.3e); clamped", vals.min())
        return (vecs * clipped) @ vecs.T


def kalman_predict(ks: KalmanState, dt: float, cfg: TrackerConfig | None = None) -> KalmanState:
    """Constant-velocity propagation: mean F x, covariance F P F^T + dt Q."""
    if dt <= 0.0:
        raise DomainError(f"dt must be > 0, got {dt}")
    cfg = cfg or TrackerConfig()
    f = _transition(dt)
    mean = f @ ks.mean
    mean[6] = normalize_angle(float(mean[6]))
    cov = f @ ks.cov @ f.T + dt * np.diag(_q_diag(cfg))
    return KalmanState(mean=mean, cov=_ensure_psd(cov))


def kalman_update(ks: KalmanState, det: Detection, cfg: TrackerConfig | None = None) -> KalmanState:
    """Linear update on the 7 observed dims with angle-wrapped innovation."""
    cfg = cfg or TrackerConfig()
    s = det.state
    z = np.array([s.x, s.y, s.z, s.l, s.w, s.h, s.theta], dtype=np.float64)
    h = np.zeros((KF_OBS, KF_DIM))
    h[np.arange(KF_OBS), np.arange(KF_OBS)] = 1.0
    r = np.diag(_r_diag(cfg))
    innovation = z - h @ ks.mean
    innovation[6] = normalize_angle(float(innovation[6]))
    s_mat = h @ ks.cov @ h.T + r
    try:
        gain = np.linalg.solve(s_mat, h @ ks.cov).T  # (9, 7)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"singular innovation covariance: {exc}") from None
    mean = ks.mean + gain @ innovation
    mean[6] = normalize_angle(float(mean[6]))
    ikh = np.eye(KF_DIM) - gain @ h
    cov = ikh @ ks.cov @ ikh.T + gain @ r @ gain.T  # Joseph form
    return KalmanState(mean=mean, cov=_ensure_psd(cov))


def kalman_state_to_object(ks: KalmanState, template: ObjectState) -> ObjectState:
    """Materialize the filter mean as an ObjectState, keeping class/score."""
    m = ks.mean
    return replace(
        template,
        x=float(m[0]), y=float(m[1]), z=float(m[2]),
        l=max(float(m[3]), 1e-6), w=max(float(m[4]), 1e-6), h=max(float(m[5]), 1e-6),
        theta=normalize_angle(float(m[6])), vx=float(m[7]), vy=float(m[8]),
    )
