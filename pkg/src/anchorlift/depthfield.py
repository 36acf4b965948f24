"""Depth discretization, the lightweight depth network, and the sparse
ordinal depth loss.

Depth over [-d_min, d_max] is split into K_bin uniform bins and estimated as
per-bin classification. The network reads the coarsest pyramid level and
emits one distribution map per joint (or a single shared map / a scalar
regression map for the ablation variants), plus attention-ready embedding
tokens from a single-layer self-attention encoder over its trunk features.

Supervision is sparse: only an r x r window around each joint's ground-truth
2D position contributes, with ordinal targets t_k = 1[k >= label_bin] applied
to per-bin sigmoids of the shared logits. The softmax of the same logits is
the distribution used for feature lifting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import FeedForward, LayerNormP, Linear, MultiHeadAttention, sinusoid_features
from .nn import ParameterStore
from .skeleton import Pose2D, Pose3D

MODE_JOINT = "joint"
MODE_SINGLE = "single"
MODE_REGRESSION = "regression"


@dataclass(frozen=True)
class DepthBinning:
    """Uniform bins over [-d_min, d_max]; width w = (d_min + d_max) / K."""

    d_min: float = 1.0
    d_max: float = 1.0
    k_bins: int = 64

    def __post_init__(self):
        if self.d_min <= 0 or self.d_max <= 0:
            raise ValueError("d_min and d_max must be > 0")
        if self.k_bins < 2:
            raise ValueError("k_bins must be >= 2")

    @property
    def width(self) -> float:
        return (self.d_min + self.d_max) / self.k_bins

    def bin_center(self, k) -> np.ndarray:
        return -self.d_min + (np.asarray(k, dtype=np.float64) + 0.5) * self.width

    def centers(self) -> np.ndarray:
        return self.bin_center(np.arange(self.k_bins))

    def to_normalized(self, depth) -> np.ndarray:
        """Map depth units onto the volume's [-1, 1] z axis."""
        return 2.0 * (np.asarray(depth, dtype=np.float64) + self.d_min) / (self.d_min + self.d_max) - 1.0


def depth_to_bin(depth, binning: DepthBinning) -> np.ndarray:
    """floor((d + d_min) / w), clamped into [0, K-1]; accepts scalars or arrays."""
    raw = np.floor((np.asarray(depth, dtype=np.float64) + binning.d_min) / binning.width)
    return np.clip(raw, 0, binning.k_bins - 1).astype(np.int64)


@dataclass
class DepthDistributionMap:
    """Per-head, per-pixel logits over depth bins.

    logits: (B, NH, H, W, K); NH is N_J for joint-wise maps and 1 for the
    shared-map variant. `dist` (softmax) and `ordinal` (per-bin sigmoid) are
    materialized on demand and cached. In regression mode `depth_value`
    holds the scalar head output and `logits` a Gaussian soft-binning of it,
    so lifting works identically across variants.
    """

    logits: Tensor
    binning: DepthBinning
    mode: str = MODE_JOINT
    depth_value: Tensor | None = None

    def __post_init__(self):
        self._dist = None
        self._ordinal = None

    @property
    def dist(self) -> Tensor:
        if self._dist is None:
            self._dist = ad.softmax(self.logits, axis=-1)
        return self._dist

    @property
    def ordinal(self) -> Tensor:
        if self._ordinal is None:
            self._ordinal = ad.sigmoid(self.logits)
        return self._ordinal

    @property
    def head_count(self) -> int:
        return int(self.logits.data.shape[1])


@dataclass
class DepthEmbedding:
    """Attention-ready tokens from the depth trunk: (B, H*W, C_D)."""

    tokens: Tensor
    grid_hw: tuple[int, int]


@dataclass
class DepthNetConfig:
    trunk_channels: int = 32
    k_bins: int = 64
    mode: str = MODE_JOINT
    pe_freqs: int = 4

    def head_count(self, n_joints: int) -> int:
        return 1 if self.mode == MODE_SINGLE else n_joints


class DepthNet:
    """Projection, two 3x3 convs, one dilated conv block, a 1x1 head, and a
    single-head self-attention encoder layer for the embedding branch."""

    def __init__(self, store: ParameterStore, n_joints: int, in_channels: int,
                 binning: DepthBinning, cfg: DepthNetConfig):
        ct = cfg.trunk_channels
        self.cfg = cfg
        self.binning = binning
        self.n_joints = n_joints
        self.heads = cfg.head_count(n_joints)
        per_head = 1 if cfg.mode == MODE_REGRESSION else cfg.k_bins
        self.out_per_pixel = self.heads * per_head
        self.proj = Linear(store, "depthnet.proj", in_channels, ct)
        self.conv1_w = store.add("depthnet.conv1.w", (3, 3, ct, ct))
        self.conv1_b = store.add("depthnet.conv1.b", (ct,), init="zeros")
        self.conv2_w = store.add("depthnet.conv2.w", (3, 3, ct, ct))
        self.conv2_b = store.add("depthnet.conv2.b", (ct,), init="zeros")
        self.dil_w = store.add("depthnet.dilated.w", (3, 3, ct, ct))
        self.dil_b = store.add("depthnet.dilated.b", (ct,), init="zeros")
        self.head = Linear(store, "depthnet.head", ct, self.out_per_pixel)
        self.enc_norm1 = LayerNormP(store, "depthnet.encoder.norm1", ct)
        self.enc_attn = MultiHeadAttention(store, "depthnet.encoder.attn", ct, heads=1)
        self.enc_norm2 = LayerNormP(store, "depthnet.encoder.norm2", ct)
        self.enc_ffn = FeedForward(store, "depthnet.encoder.ffn", ct, 2 * ct)
        self._pe_cache: dict[tuple[int, int], np.ndarray] = {}

    def _check(self, stage: str, x: Tensor) -> Tensor:
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError(f"non-finite activations in depth net at {stage}")
        return x

    def _positional(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        pe = self._pe_cache.get(key)
        if pe is None:
            ys = -1.0 + (np.arange(h) + 0.5) * 2.0 / h
            xs = -1.0 + (np.arange(w) + 0.5) * 2.0 / w
            gy, gx = np.meshgrid(ys, xs, indexing="ij")
            coords = np.stack([gx.ravel(), gy.ravel()], axis=1)
            raw = sinusoid_features(coords, self.cfg.pe_freqs)
            ct = self.cfg.trunk_channels
            pe = np.zeros((h * w, ct))
            span = min(ct, raw.shape[1])
            pe[:, :span] = raw[:, :span]
            self._pe_cache[key] = pe
        return pe

    def __call__(self, features: Tensor) -> tuple[DepthDistributionMap, DepthEmbedding]:
        b, h, w, _ = features.data.shape
        x = self._check("proj", ad.relu(self.proj(features)))
        x = self._check("conv1", ad.relu(ad.conv2d(x, self.conv1_w, self.conv1_b)))
        x = self._check("conv2", ad.relu(ad.conv2d(x, self.conv2_w, self.conv2_b)))
        trunk = self._check("dilated", ad.relu(ad.conv2d(x, self.dil_w, self.dil_b, dilation=2)))

        raw = self.head(trunk)  # (B, H, W, heads*per_head)
        if self.cfg.mode == MODE_REGRESSION:
            depth_value = ad.transpose(
                ad.reshape(raw, (b, h, w, self.heads)), (0, 3, 1, 2)
            )
            self._check("head", depth_value)
            # Gaussian soft-binning around the predicted depth keeps lifting
            # identical across variants (sigma = one bin width)
            centers = Tensor(self.binning.centers())
            dv = ad.reshape(depth_value, (b, self.heads, h, w, 1))
            delta = ad.add(dv, ad.mul(centers, -1.0))
            logits = ad.mul(ad.mul(delta, delta), -0.5 / self.binning.width**2)
            dist_map = DepthDistributionMap(logits, self.binning, self.cfg.mode, depth_value)
        else:
            logits = ad.transpose(
                ad.reshape(raw, (b, h, w, self.heads, self.cfg.k_bins)), (0, 3, 1, 2, 4)
            )
            self._check("head", logits)
            dist_map = DepthDistributionMap(logits, self.binning, self.cfg.mode)

        tokens = ad.reshape(trunk, (b, h * w, self.cfg.trunk_channels))
        tokens = ad.add(tokens, Tensor(self._positional(h, w)))
        attn_in = self.enc_norm1(tokens)
        tokens = ad.add(tokens, self.enc_attn(attn_in, attn_in))
        tokens = ad.add(tokens, self.enc_ffn(self.enc_norm2(tokens)))
        self._check("encoder", tokens)
        return dist_map, DepthEmbedding(tokens, (h, w))


def predict_depth(features, net: DepthNet):
    """Single-sample convenience wrapper around the batched forward pass."""
    arr = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    dist_map, embedding = net(Tensor(arr[None]))
    return dist_map, embedding


def upsample_distribution(dist: Tensor, target_hw: tuple[int, int]) -> Tensor:
    """Bilinearly resample per-joint distributions to `target_hw`, then
    renormalize each pixel's row over bins.

    dist: (NH, Hs, Ws, K). Interpolation happens at target pixel centers
    with the same node convention as the samplers, so resampling to the
    source resolution is the identity.
    """
    nh, hs, ws, k = dist.data.shape
    ht, wt = target_hw
    if ht < hs or wt < ws:
        raise ValueError("upsample target must be >= source resolution")
    ys = -1.0 + (np.arange(ht) + 0.5) * 2.0 / ht
    xs = -1.0 + (np.arange(wt) + 0.5) * 2.0 / wt
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gy.ravel(), gx.ravel()], axis=1)  # (Ht*Wt, 2) as (row, col)
    pts = np.broadcast_to(pts[None], (nh, ht * wt, 2)).copy()
    sampled = ad.bilinear_gather(dist, Tensor(pts))
    sampled = ad.reshape(sampled, (nh, ht, wt, k))
    total = ad.sum_(sampled, axis=-1, keepdims=True)
    return ad.div(sampled, total)


def joint_window(center_rc: tuple[int, int], r: int, h: int, w: int) -> np.ndarray:
    """Flat pixel indices of the r x r window at `center_rc`, border-clipped."""
    lo = (r - 1) // 2
    hi = r // 2
    r0 = max(center_rc[0] - lo, 0)
    r1 = min(center_rc[0] + hi, h - 1)
    c0 = max(center_rc[1] - lo, 0)
    c1 = min(center_rc[1] + hi, w - 1)
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    return (rows[:, None] * w + cols[None, :]).ravel()


def pixel_of_normalized(coords: np.ndarray, h: int, w: int) -> np.ndarray:
    """(row, col) pixel indices of normalized [-1,1] (x, y) coordinates."""
    coords = np.atleast_2d(coords)
    col = np.clip(((coords[:, 0] + 1.0) * 0.5 * w).astype(np.int64), 0, w - 1)
    row = np.clip(((coords[:, 1] + 1.0) * 0.5 * h).astype(np.int64), 0, h - 1)
    return np.stack([row, col], axis=1)


def ordinal_targets(labels: np.ndarray, k_bins: int) -> np.ndarray:
    """t_k = 1 for bins at or beyond the label bin, else 0; shape (N, K)."""
    return (np.arange(k_bins)[None, :] >= np.asarray(labels)[:, None]).astype(np.float64)


def depth_loss_rows(logit_rows: Tensor, targets: np.ndarray, row_weights: np.ndarray) -> Tensor:
    """Weighted ordinal BCE over gathered logit rows.

    logit_rows: (R, K) logits; targets: (R, K) in {0,1}; row_weights sum to
    the number of samples' 1/N factors, so the result is the positive mean
    over supervision pixels. Stable form: sum_k softplus(x) - t*x.
    """
    tgt = Tensor(targets)
    bce = ad.add(ad.softplus(logit_rows), ad.mul(ad.mul(logit_rows, tgt), -1.0))
    per_row = ad.sum_(bce, axis=-1)
    return ad.sum_(ad.mul(per_row, Tensor(row_weights)))


def regression_loss_rows(depth_rows: Tensor, target_depth: np.ndarray, row_weights: np.ndarray) -> Tensor:
    """Mean squared depth error over supervision pixels (regression head)."""
    diff = ad.add(depth_rows, Tensor(-np.asarray(target_depth)))
    return ad.sum_(ad.mul(ad.mul(diff, diff), Tensor(row_weights)))


def depth_loss(dist_map: DepthDistributionMap, gt3d: Pose3D, gt2d: Pose2D,
               binning: DepthBinning, r: int) -> Tensor:
    """Sparse depth loss for a single sample (Eq.-level contract).

    For each joint j: label bin from the ground-truth z, ordinal BCE over
    the r x r window around the joint's 2D position in the map grid,
    averaged over the N actually-supervised pixels (windows are clipped at
    borders and N adjusts). Regression maps use squared error instead.
    """
    if r < 1:
        raise ValueError("window size r must be >= 1")
    if not gt2d.normalized:
        raise ValueError("depth_loss expects a normalized gt 2D pose")
    logits = dist_map.logits
    if logits.data.ndim != 5 or logits.data.shape[0] != 1:
        raise ValueError("depth_loss expects single-sample logits (1, NH, H, W, K)")
    _, nh, h, w, k = logits.data.shape
    n_joints = gt3d.joint_count
    centers = pixel_of_normalized(gt2d.coords, h, w)
    labels = depth_to_bin(gt3d.coords[:, 2], binning)

    rows = []
    row_joint = []
    head_idx = []
    for j in range(n_joints):
        pix = joint_window((centers[j, 0], centers[j, 1]), r, h, w)
        rows.append(pix)
        row_joint.append(np.full(pix.shape[0], j))
        head_idx.append(np.full(pix.shape[0], 0 if nh == 1 else j))
    rows = np.concatenate(rows)
    row_joint = np.concatenate(row_joint)
    head_idx = np.concatenate(head_idx)
    n = rows.shape[0]
    weights = np.full(n, 1.0 / n)

    if dist_map.mode == MODE_REGRESSION:
        flat = ad.reshape(dist_map.depth_value, (nh * h * w, 1))
        picked = ad.reshape(ad.gather(flat, head_idx * h * w + rows), (n,))
        return regression_loss_rows(picked, gt3d.coords[row_joint, 2], weights)

    flat_logits = ad.reshape(logits, (nh * h * w, k))
    picked = ad.gather(flat_logits, head_idx * h * w + rows)
    targets = ordinal_targets(labels[row_joint], k)
    return depth_loss_rows(picked, targets, weights)


def export_depth_maps(dist_map: DepthDistributionMap, path_prefix: str) -> list[str]:
    """Write per-head CSV grids of argmax bin and expected depth."""
    dist = dist_map.dist.data
    binning = dist_map.binning
    centers = binning.centers()
    written = []
    b, nh, h, w, _ = dist.shape
    for head in range(nh):
        argmax = dist[0, head].argmax(axis=-1)
        expected = (dist[0, head] * centers).sum(axis=-1)
        for tag, grid in (("argmax", argmax), ("expected", expected)):
            path = f"{path_prefix}_head{head}_{tag}.csv"
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for row in grid:
                    fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
            written.append(path)
    return written
