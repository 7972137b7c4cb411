"""Supervision of the affinity network: identity labels from ground truth,
binary focal loss, detection augmentations and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .core import (Detection, NumericError, ObjectState, TrainConfig,
                   TrackerConfig, states_to_array)
from .geometry import iou_3d_matrix
from .interaction import AffinityModel
from .io import SequenceData
from .features import shape_descriptors

logger = logging.getLogger(__name__)

P_CLAMP = 1e-7


@dataclass(frozen=True)
class AffinityLabel:
    """Binary match labels plus the per-object identity assignments.

    ``prev_ids`` / ``curr_ids`` hold the ground-truth identity of each object
    (-1 when it failed to match any ground-truth box above tau_gt).
    """

    matrix: np.ndarray
    prev_ids: np.ndarray
    curr_ids: np.ndarray


def _match_to_gt(states: list[ObjectState], gt: list[tuple[int, ObjectState]],
                 tau_gt: float) -> np.ndarray:
    """Greedy identity assignment by descending 3D IoU (same class only).

    Each ground-truth box is consumed at most once, so of two duplicates on
    one box only the higher-IoU one receives its identity.
    """
    ids = np.full(len(states), -1, dtype=np.int64)
    if not states or not gt:
        return ids
    boxes = states_to_array(states)[:, :7]
    gt_boxes = np.stack([s.box7() for _, s in gt])
    iou = iou_3d_matrix(boxes, gt_boxes)
    for i, state in enumerate(states):
        for j, (_, gt_state) in enumerate(gt):
            if state.class_id != gt_state.class_id:
                iou[i, j] = 0.0
    order = np.argsort(-iou, axis=None, kind="stable")
    used_obj = np.zeros(len(states), dtype=bool)
    used_gt = np.zeros(len(gt), dtype=bool)
    n_gt = len(gt)
    for flat in order:
        i, j = divmod(int(flat), n_gt)
        if iou[i, j] <= tau_gt:
            break
        if used_obj[i] or used_gt[j]:
            continue
        used_obj[i] = True
        used_gt[j] = True
        ids[i] = gt[j][0]
    return ids


def make_labels(objs_prev: list[ObjectState], objs_curr: list[ObjectState],
                gt_prev: list[tuple[int, ObjectState]],
                gt_curr: list[tuple[int, ObjectState]],
                tau_gt: float) -> AffinityLabel:
    """Affinity label matrix: 1 where both objects carry the same identity."""
    prev_ids = _match_to_gt(objs_prev, gt_prev, tau_gt)
    curr_ids = _match_to_gt(objs_curr, gt_curr, tau_gt)
    matrix = np.zeros((len(objs_prev), len(objs_curr)), dtype=np.float64)
    if matrix.size:
        same = (prev_ids[:, None] == curr_ids[None, :]) & (prev_ids[:, None] >= 0)
        matrix[same] = 1.0
    return AffinityLabel(matrix=matrix, prev_ids=prev_ids, curr_ids=curr_ids)


def focal_loss(affinity: np.ndarray, label: np.ndarray,
               alpha: float = 0.25, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    """Mean binary focal loss over all cells plus the exact gradient dL/dA.

    FL(p, 1) = -alpha (1-p)^gamma log p;  FL(p, 0) = -(1-alpha) p^gamma log(1-p).
    """
    if affinity.shape != label.shape:
        raise NumericError(f"affinity {affinity.shape} vs label {label.shape}")
    if affinity.size == 0:
        return 0.0, np.zeros_like(affinity)
    p = affinity
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        logger.debug("affinity values clamped into [%g, %g]", P_CLAMP, 1 - P_CLAMP)
    p = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    pos = label > 0.5
    q = 1.0 - p
    loss = np.where(pos,
                    -alpha * q ** gamma * np.log(p),
                    -(1.0 - alpha) * p ** gamma * np.log(q))
    grad = np.where(pos,
                    alpha * (gamma * q ** (gamma - 1.0) * np.log(p) - q ** gamma / p),
                    (1.0 - alpha) * (p ** gamma / q - gamma * p ** (gamma - 1.0) * np.log(q)))
    cells = affinity.size
    return float(loss.sum() / cells), grad / cells


def perturb_positions(dets: list[Detection], sigma_x: float, sigma_y: float,
                      rng: np.random.Generator) -> list[Detection]:
    """Add independent N(0, sigma^2) noise to each detection's ground-plane
    position; all other fields untouched."""
    out = []
    for det in dets:
        dx = rng.normal(0.0, sigma_x) if sigma_x > 0 else 0.0
        dy = rng.normal(0.0, sigma_y) if sigma_y > 0 else 0.0
        out.append(replace(det, state=replace(det.state, x=det.state.x + dx,
                                              y=det.state.y + dy)))
    return out


def dropout_detections(dets: list[Detection], d_min: float, d_max: float,
                       rng: np.random.Generator) -> list[Detection]:
    """Remove round(d * N) detections with d ~ U(d_min, d_max)."""
    n = len(dets)
    if n == 0:
        return []
    frac = rng.uniform(d_min, d_max)
    k = int(round(frac * n))
    if k <= 0:
        return list(dets)
    drop = set(rng.choice(n, size=k, replace=False).tolist())
    return [d for i, d in enumerate(dets) if i not in drop]


@dataclass(frozen=True)
class TrainingSample:
    """A consecutive frame pair: previous detections stand in for tracks."""

    dets_prev: list[Detection]
    dets_curr: list[Detection]
    cloud_prev: object
    cloud_curr: object
    gt_prev: list[tuple[int, ObjectState]]
    gt_curr: list[tuple[int, ObjectState]]


def collect_samples(sequences: list[SequenceData]) -> list[TrainingSample]:
    samples = []
    for seq in sequences:
        for t in range(1, len(seq.frames)):
            prev, curr = seq.frames[t - 1], seq.frames[t]
            samples.append(TrainingSample(
                dets_prev=prev.dets3d, dets_curr=curr.dets3d,
                cloud_prev=prev.cloud, cloud_curr=curr.cloud,
                gt_prev=prev.gt, gt_curr=curr.gt))
    return samples


def _forward_pair(model: AffinityModel, dets_prev, dets_curr, cloud_prev,
                  cloud_curr, train: bool):
    t_states = states_to_array([d.state for d in dets_prev])
    d_states = states_to_array([d.state for d in dets_curr])
    t_desc = shape_descriptors(t_states, cloud_prev)
    d_desc = shape_descriptors(d_states, cloud_curr)
    return model.forward(t_states, d_states, t_desc, d_desc, train)


@dataclass
class TrainResult:
    model: AffinityModel
    epoch_losses: list[float]
    optimizer: nn.Adam
    total_steps: int
    epochs_done: int


def train(sequences: list[SequenceData], train_cfg: TrainConfig,
          tracker_cfg: TrackerConfig | None = None,
          model: AffinityModel | None = None,
          optimizer: nn.Adam | None = None,
          start_epoch: int = 0,
          total_steps: int | None = None) -> TrainResult:
    """Train the affinity model on consecutive-frame pairs.

    Deterministic: every epoch re-seeds from (rng_seed, epoch), so a run
    interrupted at an epoch boundary and resumed reproduces the uninterrupted
    trajectory bit for bit.
    """
    tracker_cfg = tracker_cfg or TrackerConfig()
    samples = collect_samples(sequences)
    if not samples:
        raise NumericError("no training samples: scenarios are empty")
    if model is None:
        rng = np.random.default_rng(train_cfg.rng_seed)
        model = AffinityModel(rng, channels=train_cfg.feat_dim, heads=train_cfg.heads,
                              passes=train_cfg.passes, interaction=train_cfg.interaction,
                              head_mode=train_cfg.affinity_head)
    if optimizer is None:
        optimizer = nn.Adam(model.params())
    steps_per_epoch = math.ceil(len(samples) / train_cfg.batch_size)
    if total_steps is None:
        total_steps = max(train_cfg.epochs * steps_per_epoch, 1)

    epoch_losses: list[float] = []
    for epoch in range(start_epoch, train_cfg.epochs):
        rng = np.random.default_rng([train_cfg.rng_seed, epoch])
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        n_pairs = 0
        for batch_start in range(0, len(order), train_cfg.batch_size):
            batch = order[batch_start:batch_start + train_cfg.batch_size]
            model.zero_grad()
            contributed = 0
            for idx in batch:
                sample = samples[idx]
                dets_prev = perturb_positions(sample.dets_prev, train_cfg.sigma_x,
                                              train_cfg.sigma_y, rng)
                dets_curr = perturb_positions(sample.dets_curr, train_cfg.sigma_x,
                                              train_cfg.sigma_y, rng)
                dets_prev = dropout_detections(dets_prev, train_cfg.drop_min,
                                               train_cfg.drop_max, rng)
                dets_curr = dropout_detections(dets_curr, train_cfg.drop_min,
                                               train_cfg.drop_max, rng)
                if not dets_prev or not dets_curr:
                    continue
                label = make_labels([d.state for d in dets_prev],
                                    [d.state for d in dets_curr],
                                    sample.gt_prev, sample.gt_curr,
                                    tracker_cfg.tau_gt)
                affinity = _forward_pair(model, dets_prev, dets_curr,
                                         sample.cloud_prev, sample.cloud_curr, True)
                loss, grad = focal_loss(affinity, label.matrix,
                                        train_cfg.focal_alpha, train_cfg.focal_gamma)
                if not math.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, sample {idx}: {loss}")
                model.backward(grad)
                epoch_loss += loss
                n_pairs += 1
                contributed += 1
            if contributed == 0:
                continue
            grads = model.grads()
            for g in grads.values():
                g /= contributed
            lr = nn.one_cycle_lr(optimizer.t, total_steps, train_cfg.learning_rate)
            optimizer.step(grads, lr)
        epoch_losses.append(epoch_loss / max(n_pairs, 1))
    return TrainResult(model=model, epoch_losses=epoch_losses, optimizer=optimizer,
                       total_steps=total_steps, epochs_done=train_cfg.epochs)


def save_training_checkpoint(path: str, result: TrainResult,
                             train_cfg: TrainConfig,
                             losses_so_far: list[float]) -> None:
    """Model checkpoint plus optimizer/schedule state for exact resumption."""
    extra = dict(result.optimizer.state_arrays())
    extra["loss_curve"] = np.asarray(losses_so_far, dtype=np.float64)
    meta = {
        "adam_t": result.optimizer.t,
        "total_steps": result.total_steps,
        "epochs_done": result.epochs_done,
        "rng_seed": train_cfg.rng_seed,
    }
    result.model.save(path, extra_arrays=extra, extra_meta=meta)


def load_training_checkpoint(path: str):
    """Returns (model, optimizer, meta, loss_curve); optimizer state restored."""
    model, extra, meta = AffinityModel.load(path)
    optimizer = nn.Adam(model.params())
    if "adam_t" in meta and f"m.{next(iter(model.params()))}" in extra:
        optimizer.load_state(extra, meta["adam_t"])
    curve = extra.get("loss_curve", np.zeros(0)).tolist()
    return model, optimizer, meta, curve
