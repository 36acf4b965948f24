"""2D-pose-prior token sampling and outer-product lifting into 3D volumes.

Fine pyramid levels contribute only pixels inside per-joint square windows
around the (noisy) input 2D pose; the coarsest level contributes every pixel
so global context survives. Tokens are pixel-aligned: each carries its level,
its center coordinates, a projected C_I feature vector, and a depth
distribution row matched to the joints whose windows contain it (the mean
over owners; pixels owned by nobody use the marginal over all joints).

Lifting scatters owner_count * dist (x) feature into a dense zero-padded
(H, W, K, C_I) grid per level, which is exactly the per-owning-joint
accumulation and keeps trilinear sampling defined everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear
from .nn import ParameterStore
from .skeleton import Pose2D

STRATEGY_POSE_PRIOR = "pose_prior"
STRATEGY_FULL = "full"
STRATEGY_RANDOM = "random"


@dataclass
class FeaturePyramid:
    """Image feature grids ordered high-to-low resolution, each (H, W, C)."""

    levels: list

    def __post_init__(self):
        self.levels = [np.asarray(l, dtype=np.float64) for l in self.levels]
        if len(self.levels) < 1:
            raise ValueError("pyramid needs at least one level")
        for i, lvl in enumerate(self.levels):
            if lvl.ndim != 3:
                raise ValueError(f"level {i} must be (H, W, C)")
            if not np.all(np.isfinite(lvl)):
                raise ValueError(f"level {i} contains non-finite values")
            if i > 0:
                prev = self.levels[i - 1]
                if prev.shape[0] != 2 * lvl.shape[0] or prev.shape[1] != 2 * lvl.shape[1]:
                    raise ValueError("each level must halve the previous resolution")

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [lvl.shape for lvl in self.levels]


@dataclass
class SamplerConfig:
    c_i: int = 64
    strategy: str = STRATEGY_POSE_PRIOR

    def radius(self, level_h: int) -> int:
        return max(1, level_h // 16)


@dataclass
class TokenPlan:
    """Pure-index description of one sample's tokens (valid until the input
    2D pose changes; everything downstream reuses it every epoch).

    Per level: flat pixel ids, center coordinates, owner pairs flattened as
    (token slot, joint-or-marginal id) with 1/owner_count pair weights, and
    the per-token owner multiplicity used by the lifting scatter.
    """

    level_pixels: list  # list of (P_l,) flat pixel indices
    level_coords: list  # list of (P_l, 2) normalized (x, y) centers
    owner_pairs_token: list  # (pairs,) token slot within level
    owner_pairs_joint: list  # (pairs,) joint id, n_joints == marginal row
    owner_pair_weight: list  # (pairs,) 1/owner_count of the token
    owner_count: list  # (P_l,) accumulation multiplicity (>= 1)

    @property
    def token_count(self) -> int:
        return int(sum(len(p) for p in self.level_pixels))

    def count_for_level(self, level: int) -> int:
        return int(len(self.level_pixels[level]))


@dataclass
class TokenSet:
    """Pixel-aligned tokens F_I with matched depth distribution rows."""

    features: Tensor  # (N_F, C_I)
    pixel_coord: np.ndarray  # (N_F, 2) normalized
    level_id: np.ndarray  # (N_F,)
    depth_dist: Tensor | None  # (N_F, K_bin), rows sum to 1
    owner_count: np.ndarray  # (N_F,)
    plan: TokenPlan | None = None


@dataclass
class LiftedVolume:
    """Dense per-level feature volumes (H, W, K, C_I); z axis = bin centers.

    Entries outside sampled windows are exactly zero. x, y are normalized
    image axes; the k axis maps to [-1, 1] through the depth binning.
    """

    levels: list  # list of Tensors
    k_bins: int

    def occupancy(self, level: int) -> np.ndarray:
        values = self.levels[level].data
        return (np.abs(values).sum(axis=(2, 3)) > 0).astype(np.uint8)


def pixel_centers(h: int, w: int, flat_idx: np.ndarray) -> np.ndarray:
    """Normalized (x, y) centers of flat pixel ids in an (h, w) grid."""
    rows = flat_idx // w
    cols = flat_idx % w
    x = -1.0 + (cols + 0.5) * 2.0 / w
    y = -1.0 + (rows + 0.5) * 2.0 / h
    return np.stack([x, y], axis=1)


def joint_pixel(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    """(row, col) of normalized joint coordinates on an (h, w) grid."""
    col = np.clip(((coords[:, 0] + 1.0) * 0.5 * w).astype(np.int64), 0, w - 1)
    row = np.clip(((coords[:, 1] + 1.0) * 0.5 * h).astype(np.int64), 0, h - 1)
    return np.stack([row, col], axis=1)


def _window_union(pose_coords: np.ndarray, h: int, w: int, r: int):
    """Union of per-joint (2r+1)^2 windows: flat pixel ids plus owner pairs."""
    centers = joint_pixel(pose_coords, h, w)
    per_joint = []
    for j in range(pose_coords.shape[0]):
        r0, c0 = centers[j]
        rows = np.arange(max(r0 - r, 0), min(r0 + r, h - 1) + 1)
        cols = np.arange(max(c0 - r, 0), min(c0 + r, w - 1) + 1)
        per_joint.append((rows[:, None] * w + cols[None, :]).ravel())
    union = np.unique(np.concatenate(per_joint)) if per_joint else np.empty(0, np.int64)
    return union, per_joint


def _owner_structure(union: np.ndarray, per_joint: list, n_joints: int):
    """Owner pairs for tokens at `union` pixels; unowned pixels use the
    marginal distribution row (joint id == n_joints) with multiplicity 1."""
    slot_of = {int(p): i for i, p in enumerate(union)}
    counts = np.zeros(len(union), dtype=np.int64)
    pair_token, pair_joint = [], []
    for j, pixels in enumerate(per_joint):
        for p in pixels:
            slot = slot_of.get(int(p))
            if slot is not None:
                pair_token.append(slot)
                pair_joint.append(j)
                counts[slot] += 1
    for slot in np.flatnonzero(counts == 0):
        pair_token.append(int(slot))
        pair_joint.append(n_joints)
    owner_count = np.maximum(counts, 1)
    pair_token = np.asarray(pair_token, dtype=np.int64)
    pair_joint = np.asarray(pair_joint, dtype=np.int64)
    order = np.lexsort((pair_joint, pair_token))  # deterministic pair order
    pair_token, pair_joint = pair_token[order], pair_joint[order]
    weight = 1.0 / owner_count[pair_token]
    return pair_token, pair_joint, weight, owner_count


def build_token_plan(shapes, pose2d: Pose2D, cfg: SamplerConfig, n_joints: int,
                     rng: np.random.Generator | None = None) -> TokenPlan:
    """Token selection for one sample across pyramid levels.

    Strategies: pose_prior (windows on fine levels), full (all pixels on
    fine levels), random (uniform pixels, same per-level budget as
    pose_prior; requires `rng`). The coarsest level always contributes all
    pixels. Owners always come from the pose windows so that depth rows
    stay joint-matched wherever a window covers the pixel.
    """
    if not pose2d.normalized:
        raise ValueError("token sampling requires a normalized 2D pose")
    if len(shapes) < 3:
        raise ValueError("pyramid must have at least 3 levels")
    level_pixels, level_coords = [], []
    pt_all, pj_all, wgt_all, cnt_all = [], [], [], []
    last = len(shapes) - 1
    for lvl, (h, w, _) in enumerate(shapes):
        r = cfg.radius(h)
        union, per_joint = _window_union(pose2d.coords, h, w, r)
        if lvl == last or cfg.strategy == STRATEGY_FULL:
            pixels = np.arange(h * w, dtype=np.int64)
        elif cfg.strategy == STRATEGY_POSE_PRIOR:
            pixels = union
        elif cfg.strategy == STRATEGY_RANDOM:
            if rng is None:
                raise ValueError("random sampling strategy needs an rng")
            budget = min(len(union), h * w)
            pixels = np.sort(rng.choice(h * w, size=budget, replace=False)).astype(np.int64)
        else:
            raise ValueError(f"unknown sampling strategy: {cfg.strategy}")
        pt, pj, wgt, cnt = _owner_structure(pixels, per_joint, n_joints)
        level_pixels.append(pixels)
        level_coords.append(pixel_centers(h, w, pixels))
        pt_all.append(pt)
        pj_all.append(pj)
        wgt_all.append(wgt)
        cnt_all.append(cnt)
    return TokenPlan(level_pixels, level_coords, pt_all, pj_all, wgt_all, cnt_all)


class TokenSampler:
    """Learnable per-level projections onto the shared token width C_I."""

    def __init__(self, store: ParameterStore, level_channels, cfg: SamplerConfig):
        self.cfg = cfg
        self.projections = [
            Linear(store, f"sampler.proj{l}", c, cfg.c_i) for l, c in enumerate(level_channels)
        ]

    def project_level(self, level_pixels_feats: Tensor, level: int) -> Tensor:
        return self.projections[level](level_pixels_feats)


def token_dist_rows(dist: Tensor, plan: TokenPlan, level: int) -> Tensor:
    """Depth distribution rows for one level's tokens.

    dist: (NH, H_d, W_d, K) softmax map for one sample. The marginal row
    (mean over heads) is appended as grid NH; owner pairs bilinearly sample
    their joint's map at the token center and average into the token slot.
    Rows are renormalized to sum exactly to 1.
    """
    nh = dist.data.shape[0]
    marginal = ad.mean(dist, axis=0, keepdims=True)
    grids = ad.concat([dist, marginal], axis=0)  # (NH+1, Hd, Wd, K)
    pj = plan.owner_pairs_joint[level]
    # joint j reads map j; the marginal id (== n_joints) reads the appended
    # row; single-map variants route every owner to the one shared map
    head_rows = pj if nh > 1 else np.zeros_like(pj)
    coords = plan.level_coords[level][plan.owner_pairs_token[level]]
    pts = np.stack([coords[:, 1], coords[:, 0]], axis=1)  # (row-axis=y, col-axis=x)
    gathered = ad.bilinear_gather_rows(grids, Tensor(pts), head_rows)
    weighted = ad.mul(gathered, Tensor(plan.owner_pair_weight[level][:, None]))
    rows = ad.scatter_add(weighted, plan.owner_pairs_token[level], plan.count_for_level(level))
    total = ad.sum_(rows, axis=-1, keepdims=True)
    return ad.div(rows, total)


def sample_tokens(pyramid: FeaturePyramid, pose2d: Pose2D, sampler: TokenSampler,
                  dist: Tensor | None = None, rng: np.random.Generator | None = None) -> TokenSet:
    """Single-sample token extraction (the batched path lives in pipeline).

    `dist` is the (NH, H_d, W_d, K) softmax distribution map; without it the
    TokenSet carries no depth rows (geometry-only uses, e.g. token counts).
    """
    plan = build_token_plan(pyramid.shapes, pose2d, sampler.cfg, _n_joints(pose2d), rng)
    feats, dists = [], []
    for lvl, level in enumerate(pyramid.levels):
        h, w, c = level.shape
        pix = plan.level_pixels[lvl]
        raw = Tensor(level.reshape(h * w, c)[pix])
        feats.append(sampler.project_level(raw, lvl))
        if dist is not None:
            dists.append(token_dist_rows(dist, plan, lvl))
    features = ad.concat(feats, axis=0)
    level_id = np.concatenate(
        [np.full(plan.count_for_level(l), l, dtype=np.int64) for l in range(len(pyramid.levels))]
    )
    coords = np.concatenate(plan.level_coords, axis=0)
    counts = np.concatenate(plan.owner_count)
    depth_rows = ad.concat(dists, axis=0) if dists else None
    return TokenSet(features, coords, level_id, depth_rows, counts, plan)


def _n_joints(pose2d: Pose2D) -> int:
    return pose2d.joint_count


def lift_level(features: Tensor, dist_rows: Tensor, owner_count: np.ndarray,
               pixel_idx: np.ndarray, hw: tuple[int, int], k_bins: int,
               plan: ad.ScatterPlan | None = None) -> Tensor:
    """Outer-product lifting of one level's tokens into a dense (H, W, K, C).

    volume[pixel, k, :] += owner_count * dist_k * feature; accumulation over
    owners is folded into owner_count because the token's dist row is the
    owner mean.
    """
    h, w = hw
    n, c = features.data.shape
    outer = ad.matmul(
        ad.reshape(dist_rows, (n, k_bins, 1)), ad.reshape(features, (n, 1, c))
    )
    outer = ad.mul(outer, Tensor(owner_count[:, None, None].astype(np.float64)))
    flat = ad.reshape(outer, (n, k_bins * c))
    if plan is not None:
        vol = ad.scatter_add(flat, plan=plan)
    else:
        vol = ad.scatter_add(flat, pixel_idx, h * w)
    return ad.reshape(vol, (h, w, k_bins, c))


def lift_features(tokens: TokenSet, shapes, k_bins: int) -> LiftedVolume:
    """Lift a single sample's TokenSet into per-level volumes."""
    if tokens.depth_dist is None:
        raise ValueError("lifting requires depth distribution rows on the tokens")
    plan = tokens.plan
    levels = []
    offset = 0
    for lvl, (h, w, _) in enumerate(shapes):
        n = plan.count_for_level(lvl)
        feats = tokens.features[offset : offset + n]
        dists = tokens.depth_dist[offset : offset + n]
        levels.append(
            lift_level(feats, dists, plan.owner_count[lvl], plan.level_pixels[lvl], (h, w), k_bins)
        )
        offset += n
    return LiftedVolume(levels, k_bins)


def write_occupancy_pgm(volume: LiftedVolume, level: int, path) -> None:
    """Plain-text PGM mask of pixels holding any lifted feature."""
    mask = volume.occupancy(level)
    h, w = mask.shape
    lines = ["P2", f"{w} {h}", "1"]
    for row in mask:
        lines.append(" ".join(str(int(v)) for v in row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
