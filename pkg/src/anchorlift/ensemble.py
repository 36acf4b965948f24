"""Anchor-to-joint ensemble prediction and the training loss.

Two small MLP heads read each decoded anchor query: one emits offsets from
the anchor to every joint, the other per-joint weight logits. Joint j is the
softmax-over-anchors weighted sum of (anchor position + offset), then the
predicted root is subtracted so poses are root-relative.

The loss is lambda_pose * differentiable-MPJPE + lambda_depth * depth loss;
the per-joint norm uses a zero subgradient at exactly-zero error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear
from .nn import ParameterStore
from .skeleton import Pose3D


@dataclass
class LossConfig:
    lambda_pose: float = 2.0
    lambda_depth: float = 0.1

    def __post_init__(self):
        if self.lambda_pose < 0 or self.lambda_depth < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class PosePrediction:
    """Assembled pose plus the ensemble internals used to produce it."""

    pose: Pose3D
    anchor_weights: np.ndarray  # (A, N_J), columns sum to 1
    anchor_offsets: np.ndarray  # (A, N_J, 3)


class EnsembleHeads:
    """Per-anchor two-layer perceptrons for offsets O and weight logits W."""

    def __init__(self, store: ParameterStore, n_joints: int, model_dim: int,
                 hidden: int | None = None):
        hidden = model_dim if hidden is None else hidden
        self.n_joints = n_joints
        self.offset_fc1 = Linear(store, "ensemble.offset.fc1", model_dim, hidden)
        self.offset_fc2 = Linear(store, "ensemble.offset.fc2", hidden, n_joints * 3)
        self.weight_fc1 = Linear(store, "ensemble.weight.fc1", model_dim, hidden)
        self.weight_fc2 = Linear(store, "ensemble.weight.fc2", hidden, n_joints)

    def __call__(self, queries: Tensor) -> tuple[Tensor, Tensor]:
        """(offsets (..., A, N_J, 3), weight logits (..., A, N_J))."""
        lead = queries.data.shape[:-1]
        offsets = self.offset_fc2(ad.relu(self.offset_fc1(queries)))
        offsets = ad.reshape(offsets, lead + (self.n_joints, 3))
        logits = self.weight_fc2(ad.relu(self.weight_fc1(queries)))
        return offsets, logits


def predict_offsets_weights(queries: Tensor, heads: EnsembleHeads) -> tuple[Tensor, Tensor]:
    return heads(queries)


def anchor_to_joint_batch(positions: Tensor, offsets: Tensor, weight_logits: Tensor):
    """Batched ensemble assembly.

    positions (B, A, 3); offsets (B, A, N_J, 3); logits (B, A, N_J).
    Returns (pose (B, N_J, 3) root-relative, weights (B, A, N_J)).
    """
    weights = ad.softmax(weight_logits, axis=1)  # over the anchor axis
    b, a, nj = weight_logits.data.shape
    proposals = ad.add(ad.reshape(positions, (b, a, 1, 3)), offsets)
    weighted = ad.mul(proposals, ad.reshape(weights, (b, a, nj, 1)))
    pose = ad.sum_(weighted, axis=1)  # (B, N_J, 3)
    root = pose[:, 0:1, :]
    return ad.add(pose, ad.mul(root, -1.0)), weights


def anchor_to_joint(anchor_set, offsets: Tensor, weight_logits: Tensor) -> PosePrediction:
    """Single-sample ensemble assembly from an AnchorSet."""
    positions = anchor_set.tensor if anchor_set.tensor is not None else Tensor(anchor_set.positions)
    pos_b = ad.reshape(positions, (1,) + positions.data.shape)
    off_b = ad.reshape(offsets, (1,) + offsets.data.shape)
    log_b = ad.reshape(weight_logits, (1,) + weight_logits.data.shape)
    pose, weights = anchor_to_joint_batch(pos_b, off_b, log_b)
    return PosePrediction(
        pose=Pose3D(pose.data[0]),
        anchor_weights=weights.data[0],
        anchor_offsets=offsets.data,
    )


def pose_loss_batch(pred_pose: Tensor, gt_pose: np.ndarray) -> Tensor:
    """Differentiable MPJPE: mean joint-wise L2 error, root-relative inputs."""
    diff = ad.add(pred_pose, Tensor(-np.asarray(gt_pose, dtype=np.float64)))
    return ad.mean(ad.l2norm(diff, axis=-1))


def total_loss(pose_term: Tensor | float, depth_term: Tensor | float,
               cfg: LossConfig) -> Tensor:
    """lambda_pose * L_pose + lambda_depth * L_depth."""
    pose_term = pose_term if isinstance(pose_term, Tensor) else Tensor(pose_term)
    depth_term = depth_term if isinstance(depth_term, Tensor) else Tensor(depth_term)
    return ad.add(ad.mul(pose_term, cfg.lambda_pose), ad.mul(depth_term, cfg.lambda_depth))


class PooledRegressionHead:
    """Direct-regression baseline: pool the decoded queries and emit all
    joint coordinates from a two-layer head (no anchor ensemble)."""

    def __init__(self, store: ParameterStore, n_joints: int, model_dim: int):
        self.n_joints = n_joints
        self.fc1 = Linear(store, "ensemble.pool.fc1", model_dim, model_dim)
        self.fc2 = Linear(store, "ensemble.pool.fc2", model_dim, n_joints * 3)

    def __call__(self, queries: Tensor) -> Tensor:
        pooled = ad.mean(queries, axis=1)  # (B, C)
        out = self.fc2(ad.relu(self.fc1(pooled)))
        pose = ad.reshape(out, (queries.data.shape[0], self.n_joints, 3))
        root = pose[:, 0:1, :]
        return ad.add(pose, ad.mul(root, -1.0))


def dump_prediction(path, prediction: PosePrediction, top_k: int = 50) -> None:
    """Per-sample JSON: predicted pose + top-k anchor indices/weights per joint."""
    weights = prediction.anchor_weights
    k = min(top_k, weights.shape[0])
    top = {}
    for j in range(weights.shape[1]):
        order = np.argsort(-weights[:, j])[:k]
        top[str(j)] = {
            "indices": [int(i) for i in order],
            "weights": [float(weights[i, j]) for i in order],
        }
    payload = {"pose3d": prediction.pose.coords.tolist(), "top_anchors": top}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
