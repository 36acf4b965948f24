"""Pose data types, kinematic topology, and evaluation metrics.

Implements the standard 3D pose evaluation protocol:

1. Root-center both skeletons (root joint = index 0, typically pelvis)
2. MPJPE: mean per-joint Euclidean error
3. PA-MPJPE: MPJPE after optimal similarity (Procrustes) alignment of the
   prediction - centering, SVD rotation with reflection correction,
   isotropic scale
4. PCK / AUC: percentage of joints under a distance threshold, and the mean
   PCK over 31 thresholds uniformly spanning [0, threshold]

All functions are pure and operate on float64 arrays; batch aggregation is
a fixed-order sequential reduction so repeated runs are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

AUC_STEPS = 31


@dataclass(frozen=True)
class SkeletonTopology:
    """Kinematic tree: parent indices and bone lengths per joint.

    The parent graph must be a tree rooted at joint 0 (parent -1), with
    parent_index[j] < j so a single forward pass walks parents first.
    bone_length[j] is the distance from joint j to its parent (root entry 0).
    """

    parent_index: np.ndarray
    bone_length: np.ndarray

    def __post_init__(self):
        parents = np.asarray(self.parent_index, dtype=np.int64)
        lengths = np.asarray(self.bone_length, dtype=np.float64)
        object.__setattr__(self, "parent_index", parents)
        object.__setattr__(self, "bone_length", lengths)
        n = parents.shape[0]
        if lengths.shape != (n,):
            raise ValueError("parent_index and bone_length must have equal length")
        if n < 1 or parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        if np.sum(parents == -1) != 1:
            raise ValueError("exactly one root joint is required")
        for j in range(1, n):
            if not 0 <= parents[j] < j:
                raise ValueError(f"parent_index[{j}] must be in [0, {j})")
        if np.any(lengths < 0):
            raise ValueError("bone lengths must be non-negative")

    @property
    def joint_count(self) -> int:
        return int(self.parent_index.shape[0])


def default_topology() -> SkeletonTopology:
    """17-joint human tree (pelvis root, legs / spine-head / arms).

    Bone lengths are in normalized scene units and keep the maximum radial
    reach from the root around 0.62, so any reachable pose fits the depth
    range [-1, 1] and projects inside the synthetic camera's image.
    """
    parents = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]
    lengths = [
        0.0,  # pelvis
        0.11, 0.22, 0.21,  # right leg
        0.11, 0.22, 0.21,  # left leg
        0.12, 0.12, 0.06, 0.06,  # spine, thorax, neck, head
        0.09, 0.15, 0.14,  # left arm
        0.09, 0.15, 0.14,  # right arm
    ]
    return SkeletonTopology(np.array(parents), np.array(lengths))


# rest-pose bone directions for the default tree (unit vectors; y points
# down to match image coordinates, z toward the camera at zero)
REST_DIRECTIONS = np.array(
    [
        [0.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 0.0], [0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [-1.0, 0.0, 0.0],
    ]
)


@dataclass
class Pose2D:
    """2D joint coordinates; pixel units before normalization, [-1,1] after."""

    coords: np.ndarray
    normalized: bool = False
    clamp_count: int = 0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"Pose2D expects (N, 2) coords, got {self.coords.shape}")

    @property
    def joint_count(self) -> int:
        return int(self.coords.shape[0])


@dataclass
class Pose3D:
    """Root-relative 3D joint coordinates in scene units."""

    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"Pose3D expects (N, 3) coords, got {self.coords.shape}")

    @property
    def joint_count(self) -> int:
        return int(self.coords.shape[0])


@dataclass
class MetricReport:
    """Aggregated pose metrics over one evaluation split."""

    mpjpe: float
    pa_mpjpe: float
    pck: float
    auc: float
    per_joint_error: np.ndarray
    sample_count: int
    alignment_fallbacks: int = 0

    def to_json(self) -> str:
        payload = {
            "mpjpe": self.mpjpe,
            "pa_mpjpe": self.pa_mpjpe,
            "pck": self.pck,
            "auc": self.auc,
            "per_joint_error": [float(v) for v in self.per_joint_error],
            "sample_count": self.sample_count,
            "alignment_fallbacks": self.alignment_fallbacks,
        }
        return json.dumps(payload, sort_keys=True)

    def to_csv_row(self) -> str:
        cells = [f"{v:.17g}" for v in (self.mpjpe, self.pa_mpjpe, self.pck, self.auc)]
        return ",".join(cells + [str(self.sample_count)])

    CSV_HEADER = "mpjpe,pa_mpjpe,pck,auc,n"


def normalize_pose_2d(pose: Pose2D, width: int, height: int) -> Pose2D:
    """Map pixel coordinates [0,W]x[0,H] affinely onto [-1,1]^2.

    x' = 2x/W - 1 and y' = 2y/H - 1. Off-image coordinates (they happen with
    noisy 2D estimators) are clamped to [-1,1] and counted on the returned
    pose's clamp_count.
    """
    if pose.normalized:
        raise ValueError("pose is already normalized")
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    out = np.empty_like(pose.coords)
    out[:, 0] = 2.0 * pose.coords[:, 0] / width - 1.0
    out[:, 1] = 2.0 * pose.coords[:, 1] / height - 1.0
    clamp_count = int(np.sum((out < -1.0) | (out > 1.0)))
    np.clip(out, -1.0, 1.0, out=out)
    return Pose2D(out, normalized=True, clamp_count=clamp_count)


def root_center(coords: np.ndarray) -> np.ndarray:
    """Subtract the root joint (index 0) from every joint."""
    return coords - coords[0:1]


def _as_coords3(pose) -> np.ndarray:
    return pose.coords if isinstance(pose, Pose3D) else np.asarray(pose, dtype=np.float64)


def per_joint_errors(pred, gt) -> np.ndarray:
    """Root-relative Euclidean error per joint."""
    p = _as_coords3(pred)
    g = _as_coords3(gt)
    if p.shape != g.shape:
        raise ValueError(f"joint count mismatch: {p.shape} vs {g.shape}")
    return np.linalg.norm(root_center(p) - root_center(g), axis=-1)


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error (root-relative)."""
    return float(per_joint_errors(pred, gt).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray):
    """Optimal similarity transform of `pred` onto `gt` (least squares).

    Returns (aligned, degenerate). Centers both clouds, solves the rotation
    by SVD of the cross-covariance with reflection correction, then the
    isotropic scale. An all-collinear gt cannot pin a rotation, so that case
    falls back to translation-only alignment and is flagged.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    pc = pred - pred.mean(axis=0, keepdims=True)
    gc = gt - gt.mean(axis=0, keepdims=True)
    gt_spread = np.linalg.svd(gc, compute_uv=False)
    if gt_spread[0] < 1e-12 or gt_spread[1] < 1e-9 * gt_spread[0]:
        return pc + gt.mean(axis=0, keepdims=True), True
    cov = pc.T @ gc
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    corr = np.array([1.0, 1.0, d])
    rot = vt.T @ np.diag(corr) @ u.T
    denom = float((pc * pc).sum())
    scale = float((s * corr).sum()) / denom if denom > 0 else 1.0
    aligned = scale * (rot @ pc.T).T + gt.mean(axis=0, keepdims=True)
    return aligned, False


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after Procrustes alignment of the prediction."""
    value, _ = pa_mpjpe_with_flag(pred, gt)
    return value


def pa_mpjpe_with_flag(pred, gt) -> tuple[float, bool]:
    p = _as_coords3(pred)
    g = _as_coords3(gt)
    if p.shape != g.shape:
        raise ValueError(f"joint count mismatch: {p.shape} vs {g.shape}")
    if p.shape[0] < 3:
        raise ValueError("Procrustes alignment needs at least 3 joints")
    aligned, degenerate = procrustes_align(root_center(p), root_center(g))
    err = float(np.linalg.norm(aligned - root_center(g), axis=-1).mean())
    return err, degenerate


def pck_auc(pred, gt, pck_threshold: float = 150.0) -> tuple[float, float]:
    """PCK at `pck_threshold` plus AUC over 31 uniform thresholds from 0.

    PCK counts joints with error strictly below the threshold, as a
    percentage. AUC is the mean PCK across np.linspace(0, threshold, 31).
    """
    if pck_threshold <= 0:
        raise ValueError("pck_threshold must be > 0")
    errors = per_joint_errors(pred, gt)
    pck = float((errors < pck_threshold).mean() * 100.0)
    grid = np.linspace(0.0, pck_threshold, AUC_STEPS)
    auc = float((errors[None, :] < grid[:, None]).mean() * 100.0)
    return pck, auc


def select_challenging(pred2d: Pose2D, gt2d: Pose2D, threshold: float = 5.0, mode: str = "mean") -> bool:
    """True when the 2D input deviates from ground truth by more than
    `threshold` pixels, per-joint error reduced by `mode` (mean or max)."""
    errors = np.linalg.norm(pred2d.coords - gt2d.coords, axis=-1)
    if mode == "mean":
        value = errors.mean()
    elif mode == "max":
        value = errors.max()
    else:
        raise ValueError(f"unknown challenging-subset mode: {mode}")
    return bool(value > threshold)


def centroid_distance(a, b) -> float:
    """Euclidean distance between the mean positions of two point sets.

    Accepts raw (N, D) arrays or any object exposing `.positions`.
    """
    pa = np.asarray(getattr(a, "positions", a), dtype=np.float64)
    pb = np.asarray(getattr(b, "positions", b), dtype=np.float64)
    if pa.size == 0 or pb.size == 0:
        raise ValueError("centroid_distance requires non-empty sets")
    return float(np.linalg.norm(pa.mean(axis=0) - pb.mean(axis=0)))


def aggregate_metrics(preds, gts, pck_threshold: float = 150.0) -> MetricReport:
    """Evaluate a list of (pred, gt) poses into one MetricReport.

    The reduction order is the input order, so reports are reproducible
    bit-for-bit. pa_mpjpe <= mpjpe is part of the metric contract and is
    exercised by the invariant tests rather than enforced here.
    """
    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal, non-zero numbers of predictions and ground truths")
    n_j = _as_coords3(preds[0]).shape[0]
    err_sum = np.zeros(n_j, dtype=np.float64)
    mpjpe_sum = 0.0
    pa_sum = 0.0
    pck_sum = 0.0
    auc_sum = 0.0
    fallbacks = 0
    for p, g in zip(preds, gts):
        errs = per_joint_errors(p, g)
        err_sum += errs
        mpjpe_sum += errs.mean()
        pa_val, degenerate = pa_mpjpe_with_flag(p, g)
        pa_sum += pa_val
        fallbacks += int(degenerate)
        pck, auc = pck_auc(p, g, pck_threshold)
        pck_sum += pck
        auc_sum += auc
    count = len(preds)
    return MetricReport(
        mpjpe=mpjpe_sum / count,
        pa_mpjpe=pa_sum / count,
        pck=pck_sum / count,
        auc=auc_sum / count,
        per_joint_error=err_sum / count,
        sample_count=count,
        alignment_fallbacks=fallbacks,
    )


# -- pose file format --------------------------------------------------------


def save_pose_samples(path, samples) -> None:
    """Write samples as a JSON array of {gt3d, gt2d, pred2d} coordinate lists."""
    payload = []
    for s in samples:
        payload.append(
            {
                "gt3d": np.asarray(s["gt3d"], dtype=np.float64).tolist(),
                "gt2d": np.asarray(s["gt2d"], dtype=np.float64).tolist(),
                "pred2d": np.asarray(s["pred2d"], dtype=np.float64).tolist(),
            }
        )
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_pose_samples(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    samples = []
    for entry in payload:
        samples.append(
            {
                "gt3d": np.asarray(entry["gt3d"], dtype=np.float64),
                "gt2d": np.asarray(entry["gt2d"], dtype=np.float64),
                "pred2d": np.asarray(entry["pred2d"], dtype=np.float64),
            }
        )
    return samples
