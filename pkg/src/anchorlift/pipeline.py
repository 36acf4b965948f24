"""End-to-end lifting model: wiring of anchors, depth, sampling, decoder and
ensemble, with the ablation variants used by the experiment harness.

A sample is converted once into a `PreparedSample` holding every fixed index
structure (token plans, supervision windows, gathered raw features); the
training loop then only assembles batches and runs the differentiable
forward. All variant differences are resolved at preparation/construction
time so the forward path stays branch-light.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .anchors import (
    AnchorConfig,
    anchor_positions_batch,
    anchor_provenance,
    global_positions,
    local_positions_batch,
    make_offset_params,
)
from .autodiff import ScatterPlan, Tensor
from .decoder import Decoder, DecoderConfig
from .depthfield import (
    MODE_JOINT,
    MODE_REGRESSION,
    MODE_SINGLE,
    DepthBinning,
    DepthNet,
    DepthNetConfig,
    depth_to_bin,
    joint_window,
    ordinal_targets,
    pixel_of_normalized,
)
from .ensemble import (
    EnsembleHeads,
    LossConfig,
    PooledRegressionHead,
    anchor_to_joint_batch,
    pose_loss_batch,
    total_loss,
)
from .nn import ParameterStore
from .sampler import SamplerConfig, TokenSampler, build_token_plan
from .skeleton import Pose2D, root_center

VARIANTS = (
    "full",
    "no_anchor",
    "global_only",
    "local_only",
    "single_depth",
    "joint_depth",
    "no_depth",
    "depth_regression",
    "random_sampling",
    "pose_prior_sampling",
    "full_sampling",
)

ANCHORS_BOTH, ANCHORS_GLOBAL, ANCHORS_LOCAL, ANCHORS_NONE = "both", "global", "local", "none"
DEPTH_NONE = "none"


@dataclass(frozen=True)
class VariantFlags:
    anchors: str
    depth: str
    strategy: str
    head: str  # ensemble | pooled


def variant_flags(variant: str) -> VariantFlags:
    table = {
        "full": (ANCHORS_BOTH, MODE_JOINT, "pose_prior", "ensemble"),
        "joint_depth": (ANCHORS_BOTH, MODE_JOINT, "pose_prior", "ensemble"),
        "pose_prior_sampling": (ANCHORS_BOTH, MODE_JOINT, "pose_prior", "ensemble"),
        "global_only": (ANCHORS_GLOBAL, MODE_JOINT, "pose_prior", "ensemble"),
        "local_only": (ANCHORS_LOCAL, MODE_JOINT, "pose_prior", "ensemble"),
        "no_anchor": (ANCHORS_NONE, MODE_JOINT, "pose_prior", "pooled"),
        "single_depth": (ANCHORS_BOTH, MODE_SINGLE, "pose_prior", "ensemble"),
        "no_depth": (ANCHORS_BOTH, DEPTH_NONE, "pose_prior", "ensemble"),
        "depth_regression": (ANCHORS_BOTH, MODE_REGRESSION, "pose_prior", "ensemble"),
        "random_sampling": (ANCHORS_BOTH, MODE_JOINT, "random", "ensemble"),
        "full_sampling": (ANCHORS_BOTH, MODE_JOINT, "full", "ensemble"),
    }
    if variant not in table:
        raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(table)}")
    return VariantFlags(*table[variant])


@dataclass
class ModelConfig:
    n_joints: int = 17
    image_hw: tuple[int, int] = (64, 64)
    feature_channels: int = 8
    pyramid_levels: int = 3
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    binning: DepthBinning = field(default_factory=DepthBinning)
    depth_trunk: int = 32
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    variant: str = "full"

    @property
    def level_shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.image_hw
        return [
            (h >> (l + 1), w >> (l + 1), self.feature_channels)
            for l in range(self.pyramid_levels)
        ]

    @property
    def depth_hw(self) -> tuple[int, int]:
        h, w, _ = self.level_shapes[-1]
        return (h, w)

    @property
    def supervision_r(self) -> int:
        # r x r supervision window at the depth-map resolution
        return max(1, self.depth_hw[0] // 8)


@dataclass
class PreparedSample:
    """All fixed index structures for one sample under one variant."""

    pose_flat: np.ndarray  # (2 N_J,) normalized input pose
    joint_xyz0: np.ndarray  # (N_J, 3) input joints lifted to depth 0
    gt3d: np.ndarray  # (N_J, 3) root-relative
    raw_level_feats: list  # per level (P_l, C_l) gathered pyramid features
    level_pixels: list  # per level (P_l,) flat pixel ids
    pair_token: list  # per level (pairs,) token slots
    pair_points: list  # per level (pairs, 2) (row, col)-axis sample coords
    pair_head: list  # per level (pairs,) local dist-grid row (NH+1 rows)
    pair_weight: list  # per level (pairs,)
    owner_count: list  # per level (P_l,)
    sup_pixels: np.ndarray  # (R,) depth supervision pixels (flat)
    sup_head: np.ndarray  # (R,) local head row
    sup_targets: np.ndarray  # (R, K) ordinal targets, or (R,) gt depth
    token_count: int = 0
    challenging: bool = False
    pyramid: list | None = None  # referenced, not copied


class LiftingModel:
    """Variant-parameterized lifting pipeline over a ParameterStore."""

    def __init__(self, store: ParameterStore, config: ModelConfig):
        self.store = store
        self.config = config
        self.flags = variant_flags(config.variant)
        nj = config.n_joints
        self.n_joints = nj
        cfgA = config.anchor

        self.offset_params = None
        if self.flags.anchors in (ANCHORS_BOTH, ANCHORS_LOCAL):
            self.offset_params = make_offset_params(store, nj, cfgA)

        if self.flags.anchors == ANCHORS_BOTH:
            pj, ps = anchor_provenance(nj, cfgA)
        elif self.flags.anchors == ANCHORS_GLOBAL:
            pj = np.full(cfgA.global_count, -1, dtype=np.int64)
            ps = pj.copy()
        elif self.flags.anchors == ANCHORS_LOCAL:
            pj = np.repeat(np.arange(nj), cfgA.local_per_joint)
            ps = np.tile(np.arange(cfgA.local_per_joint), nj)
        else:  # one query per joint at its 2D position
            pj = np.arange(nj, dtype=np.int64)
            ps = np.zeros(nj, dtype=np.int64)
        self.prov_joint = pj
        self.prov_slot = ps
        self.anchor_count = len(pj)

        self.with_depth = self.flags.depth != DEPTH_NONE
        self.depth_net = None
        if self.with_depth:
            dcfg = DepthNetConfig(
                trunk_channels=config.depth_trunk,
                k_bins=config.binning.k_bins,
                mode=self.flags.depth,
            )
            self.depth_net = DepthNet(store, nj, config.feature_channels, config.binning, dcfg)

        sampler_cfg = SamplerConfig(c_i=config.sampler.c_i, strategy=self.flags.strategy)
        self.sampler_cfg = sampler_cfg
        self.sampler = TokenSampler(
            store, [config.feature_channels] * config.pyramid_levels, sampler_cfg
        )

        self.volume_k = config.binning.k_bins if self.with_depth else 1
        self.decoder = Decoder(
            store,
            nj,
            config.decoder,
            config.sampler.c_i,
            config.depth_trunk if self.with_depth else None,
        )

        if self.flags.head == "ensemble":
            self.heads = EnsembleHeads(store, nj, config.decoder.model_dim)
            self.pooled = None
        else:
            self.heads = None
            self.pooled = PooledRegressionHead(store, nj, config.decoder.model_dim)

    # -- sample preparation --------------------------------------------------

    def prepare_sample(self, sample, sample_index: int = 0) -> PreparedSample:
        """Build every fixed index structure for `sample`.

        `sample` must expose: input2d (Pose2D, pixel units), gt2d (Pose2D,
        pixel units), gt3d (Pose3D), pyramid (FeaturePyramid), challenging.
        """
        from .skeleton import normalize_pose_2d

        cfg = self.config
        h_img, w_img = cfg.image_hw
        input_norm = (
            sample.input2d
            if sample.input2d.normalized
            else normalize_pose_2d(sample.input2d, w_img, h_img)
        )
        gt_norm = (
            sample.gt2d if sample.gt2d.normalized else normalize_pose_2d(sample.gt2d, w_img, h_img)
        )
        rng = None
        if self.flags.strategy == "random":
            rng = np.random.default_rng(np.random.SeedSequence(0xFEED, spawn_key=(sample_index,)))
        plan = build_token_plan(cfg.level_shapes, input_norm, self.sampler_cfg, self.n_joints, rng)

        raw_feats = []
        pair_points = []
        for lvl, level in enumerate(sample.pyramid.levels):
            h, w, c = level.shape
            raw_feats.append(level.reshape(h * w, c)[plan.level_pixels[lvl]])
            coords = plan.level_coords[lvl][plan.owner_pairs_token[lvl]]
            pair_points.append(np.stack([coords[:, 1], coords[:, 0]], axis=1))

        nh = 1 if self.flags.depth == MODE_SINGLE else self.n_joints
        pair_head = []
        for lvl in range(len(plan.level_pixels)):
            pj = plan.owner_pairs_joint[lvl]
            pair_head.append(pj if nh > 1 else np.zeros_like(pj))

        sup_pixels = np.empty(0, dtype=np.int64)
        sup_head = np.empty(0, dtype=np.int64)
        sup_targets: np.ndarray = np.empty((0,))
        if self.with_depth:
            hd, wd = cfg.depth_hw
            r = cfg.supervision_r
            centers = pixel_of_normalized(gt_norm.coords, hd, wd)
            labels = depth_to_bin(sample.gt3d.coords[:, 2], cfg.binning)
            pix_list, head_list, joint_list = [], [], []
            for j in range(self.n_joints):
                pix = joint_window((centers[j, 0], centers[j, 1]), r, hd, wd)
                pix_list.append(pix)
                head_list.append(np.full(len(pix), 0 if nh == 1 else j))
                joint_list.append(np.full(len(pix), j))
            sup_pixels = np.concatenate(pix_list)
            sup_head = np.concatenate(head_list)
            joints = np.concatenate(joint_list)
            if self.flags.depth == MODE_REGRESSION:
                sup_targets = sample.gt3d.coords[joints, 2]
            else:
                sup_targets = ordinal_targets(labels[joints], cfg.binning.k_bins)

        return PreparedSample(
            pose_flat=input_norm.coords.reshape(-1),
            joint_xyz0=np.concatenate(
                [input_norm.coords, np.zeros((self.n_joints, 1))], axis=1
            ),
            gt3d=root_center(sample.gt3d.coords),
            raw_level_feats=raw_feats,
            level_pixels=list(plan.level_pixels),
            pair_token=list(plan.owner_pairs_token),
            pair_points=pair_points,
            pair_head=pair_head,
            pair_weight=list(plan.owner_pair_weight),
            owner_count=list(plan.owner_count),
            sup_pixels=sup_pixels,
            sup_head=sup_head,
            sup_targets=sup_targets,
            token_count=plan.token_count,
            challenging=bool(getattr(sample, "challenging", False)),
            pyramid=sample.pyramid.levels,
        )

    # -- batched forward ------------------------------------------------------

    def _anchor_positions(self, batch: list[PreparedSample]) -> Tensor:
        flags = self.flags
        b = len(batch)
        cfgA = self.config.anchor
        if flags.anchors == ANCHORS_BOTH:
            pose_flat = Tensor(np.stack([p.pose_flat for p in batch]))
            return anchor_positions_batch(pose_flat, self.offset_params, cfgA)
        if flags.anchors == ANCHORS_LOCAL:
            pose_flat = Tensor(np.stack([p.pose_flat for p in batch]))
            return local_positions_batch(pose_flat, self.offset_params)
        if flags.anchors == ANCHORS_GLOBAL:
            glob = global_positions(cfgA)
            return Tensor(np.broadcast_to(glob[None], (b,) + glob.shape).copy())
        return Tensor(np.stack([p.joint_xyz0 for p in batch]))

    def _batched_depth_loss(self, dist_map, batch: list[PreparedSample]) -> Tensor:
        rows, heads_, weights, targets = [], [], [], []
        nh = dist_map.head_count
        hd, wd = self.config.depth_hw
        plane = hd * wd
        b_count = len(batch)
        for b, p in enumerate(batch):
            n = len(p.sup_pixels)
            rows.append((b * nh + p.sup_head) * plane + p.sup_pixels)
            weights.append(np.full(n, 1.0 / (n * b_count)))
            targets.append(p.sup_targets)
        rows = np.concatenate(rows)
        weights = np.concatenate(weights)
        targets = np.concatenate(targets)
        if self.flags.depth == MODE_REGRESSION:
            flat = ad.reshape(dist_map.depth_value, (b_count * nh * plane, 1))
            picked = ad.reshape(ad.gather(flat, rows), (len(rows),))
            diff = ad.add(picked, Tensor(-targets))
            return ad.sum_(ad.mul(ad.mul(diff, diff), Tensor(weights)))
        k = self.config.binning.k_bins
        flat = ad.reshape(dist_map.logits, (b_count * nh * plane, k))
        picked = ad.gather(flat, rows)
        bce = ad.add(ad.softplus(picked), ad.mul(ad.mul(picked, Tensor(targets)), -1.0))
        return ad.sum_(ad.mul(ad.sum_(bce, axis=-1), Tensor(weights)))

    def forward_batch(self, batch: list[PreparedSample], with_loss: bool = True) -> dict:
        cfg = self.config
        b = len(batch)

        depth_tokens = None
        depth_loss_t = Tensor(0.0)
        grids_flat = None
        nh1 = 1
        if self.with_depth:
            # only the coarsest level feeds the depth net; token features were
            # gathered at preparation time
            coarse = Tensor(np.stack([p.pyramid[-1] for p in batch]))
            dist_map, embedding = self.depth_net(coarse)
            depth_tokens = embedding.tokens
            if with_loss:
                depth_loss_t = self._batched_depth_loss(dist_map, batch)
            dist = dist_map.dist  # (B, NH, Hd, Wd, K)
            marginal = ad.mean(dist, axis=1, keepdims=True)
            grids = ad.concat([dist, marginal], axis=1)  # (B, NH+1, Hd, Wd, K)
            nh1 = grids.data.shape[1]
            hd, wd = cfg.depth_hw
            grids_flat = ad.reshape(grids, (b * nh1, hd, wd, self.volume_k))

        volumes = []
        for lvl, (h, w, _) in enumerate(cfg.level_shapes):
            raw = Tensor(np.concatenate([p.raw_level_feats[lvl] for p in batch]))
            feats = self.sampler.project_level(raw, lvl)  # (T, C_I)
            counts = np.concatenate([p.owner_count[lvl] for p in batch])
            t_total = counts.shape[0]
            if self.with_depth:
                pts = np.concatenate([p.pair_points[lvl] for p in batch])
                grid_rows, tok_slots, pair_w = [], [], []
                offset = 0
                for bi, p in enumerate(batch):
                    grid_rows.append(bi * nh1 + p.pair_head[lvl])
                    tok_slots.append(p.pair_token[lvl] + offset)
                    pair_w.append(p.pair_weight[lvl])
                    offset += len(p.owner_count[lvl])
                gathered = ad.bilinear_gather_rows(
                    grids_flat, Tensor(pts), np.concatenate(grid_rows)
                )
                weighted = ad.mul(gathered, Tensor(np.concatenate(pair_w)[:, None]))
                rows = ad.scatter_add(weighted, np.concatenate(tok_slots), t_total)
                rows = ad.div(rows, ad.sum_(rows, axis=-1, keepdims=True))
            else:
                rows = Tensor(np.ones((t_total, 1)))
            outer = ad.matmul(
                ad.reshape(rows, (t_total, self.volume_k, 1)),
                ad.reshape(feats, (t_total, 1, cfg.sampler.c_i)),
            )
            outer = ad.mul(outer, Tensor(counts[:, None, None].astype(np.float64)))
            pix = np.concatenate(
                [p.level_pixels[lvl] + bi * h * w for bi, p in enumerate(batch)]
            )
            plan = ScatterPlan(pix, b * h * w)
            vol = ad.scatter_add(
                ad.reshape(outer, (t_total, self.volume_k * cfg.sampler.c_i)), plan=plan
            )
            volumes.append(ad.reshape(vol, (b, h, w, self.volume_k, cfg.sampler.c_i)))

        positions = self._anchor_positions(batch)
        query = self.decoder(positions, self.prov_joint, depth_tokens, volumes, cfg.binning)

        if self.heads is not None:
            offsets, logits = self.heads(query.embedding)
            pose, weights = anchor_to_joint_batch(query.reference, offsets, logits)
        else:
            pose = self.pooled(query.embedding)
            weights = None

        out = {"pose": pose, "anchor_weights": weights, "positions": positions}
        if with_loss:
            gt = np.stack([p.gt3d for p in batch])
            pose_term = pose_loss_batch(pose, gt)
            out["pose_loss"] = pose_term
            out["depth_loss"] = depth_loss_t
            out["loss"] = total_loss(pose_term, depth_loss_t, cfg.loss)
        return out

    def predict_batch(self, batch: list[PreparedSample]) -> np.ndarray:
        """Root-relative predicted poses, (B, N_J, 3), no graph."""
        with ad.no_grad():
            out = self.forward_batch(batch, with_loss=False)
        return out["pose"].data

    def predict_with_weights(self, batch: list[PreparedSample]):
        with ad.no_grad():
            out = self.forward_batch(batch, with_loss=False)
        weights = out["anchor_weights"]
        return (
            out["pose"].data,
            None if weights is None else weights.data,
            out["positions"].data,
        )
