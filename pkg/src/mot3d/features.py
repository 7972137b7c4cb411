"""Per-object features: raw state through the state FFN, in-box point-cloud
statistics through the shape FFN, concatenated to the object feature matrix."""

from __future__ import annotations

import numpy as np

from . import kernels, nn
from .core import ContractError, PointCloud

SHAPE_DIM = 18


def shape_descriptors(states: np.ndarray, cloud: PointCloud) -> np.ndarray:
    """18-dim point statistics per object row; zero rows for empty boxes.

    ``states`` is (M, 11) or (M, 7); only the box columns are used. Points
    are gathered with half-open containment in the box frame.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] < 7:
        raise ContractError(f"states must be (M, >=7), got {states.shape}")
    boxes = np.ascontiguousarray(states[:, :7])
    if boxes.shape[0] == 0:
        return np.zeros((0, SHAPE_DIM))
    pts = cloud.points if len(cloud) else np.zeros((0, 5))
    return kernels.shape_descriptors(boxes, np.ascontiguousarray(pts))


def extract_state_features(states: np.ndarray, g_st: nn.FFN, train: bool = False) -> np.ndarray:
    """Apply the state FFN row-wise to (M, 11) states."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != 11:
        raise ContractError(f"states must be (M, 11), got {states.shape}")
    return g_st.forward(states, train)


def extract_shape_features(states: np.ndarray, cloud: PointCloud, g_sh: nn.FFN,
                           train: bool = False) -> np.ndarray:
    """Gather in-box points, build descriptors, apply the shape FFN."""
    return g_sh.forward(shape_descriptors(states, cloud), train)


def object_features(states: np.ndarray, cloud: PointCloud, g_st: nn.FFN, g_sh: nn.FFN,
                    train: bool = False) -> np.ndarray:
    """Column-wise concatenation [state features | shape features], (M, C)."""
    return np.hstack([
        extract_state_features(states, g_st, train),
        extract_shape_features(states, cloud, g_sh, train),
    ])
