"""Anchor-feature interaction decoder.

Queries are anchor embeddings (per-provenance base vector + projected
sinusoidal encoding of the 3D position). Each decoder block runs, in order,
depth cross-attention over the depth-net embedding tokens, inter-anchor
self-attention, 3D deformable cross-attention over the lifted feature
volumes, and a feed-forward sublayer; all four are pre-norm residual blocks.
Anchor reference positions stay fixed across layers.

Deformable sampling: every anchor predicts, per head, N offset points
around its position, reads each pyramid level's volume there by trilinear
interpolation (levels averaged), and mixes the N reads with a softmax
weight head. Offset and weight heads start at zero so training begins by
sampling exactly at the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .depthfield import DepthBinning
from .layers import FeedForward, LayerNormP, Linear, MultiHeadAttention, sinusoid_features_t
from .nn import ParameterHealthError, ParameterStore

GLOBAL_ROW = 0


@dataclass
class DecoderConfig:
    layers: int = 3
    heads: int = 4
    model_dim: int = 64
    sample_points: int = 4
    pe_freqs: int = 6
    ffn_hidden: int | None = None

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")
        if self.ffn_hidden is None:
            self.ffn_hidden = 2 * self.model_dim


@dataclass
class AnchorQuery:
    """Query embeddings plus the fixed anchor reference positions."""

    embedding: Tensor  # (B, A, C)
    reference: Tensor  # (B, A, 3) anchor coordinates (x, y, z-units)


class QueryEncoder:
    """Base embedding per provenance row + projected sinusoid of position.

    Row 0 is the global-anchor embedding; row 1+j belongs to joint j's local
    anchors (slots share their joint's row, their positions differ).
    """

    def __init__(self, store: ParameterStore, n_joints: int, cfg: DecoderConfig):
        self.cfg = cfg
        self.base = store.add("decoder.query.base", (n_joints + 1, cfg.model_dim))
        self.pe_proj = Linear(store, "decoder.query.pe", 3 * 2 * cfg.pe_freqs, cfg.model_dim)

    def __call__(self, positions: Tensor, prov_joint: np.ndarray) -> AnchorQuery:
        rows = np.where(prov_joint < 0, GLOBAL_ROW, prov_joint + 1)
        base = ad.gather(self.base, rows)  # (A, C), broadcasts over batch
        pe = self.pe_proj(sinusoid_features_t(positions, self.cfg.pe_freqs))
        return AnchorQuery(ad.add(base, pe), positions)


class DeformableCross3D:
    """3D deformable cross-attention over lifted volumes.

    Volume channels are split across heads (each head reads its own
    C_I/heads slice at its own sampling points), matching the usual
    multi-head value layout.
    """

    def __init__(self, store: ParameterStore, name: str, cfg: DecoderConfig, c_i: int):
        if c_i % cfg.heads:
            raise ValueError(f"token width {c_i} not divisible by heads {cfg.heads}")
        self.cfg = cfg
        self.c_i = c_i
        self.c_head = c_i // cfg.heads
        hn = cfg.heads * cfg.sample_points
        self.offset_head = Linear(store, f"{name}.offsets", cfg.model_dim, hn * 3, init="zeros")
        self.weight_head = Linear(store, f"{name}.weights", cfg.model_dim, hn, init="zeros")
        self.out_proj = Linear(store, f"{name}.out", c_i, cfg.model_dim)

    def sample_points(self, query: Tensor, reference: Tensor) -> Tensor:
        """Reference + predicted offsets: (B, A, heads*N, 3) in anchor coords."""
        b, a, _ = reference.data.shape
        hn = self.cfg.heads * self.cfg.sample_points
        offsets = self.offset_head(query)
        if not np.all(np.isfinite(offsets.data)):
            raise ParameterHealthError("non-finite deformable offsets")
        offsets = ad.reshape(offsets, (b, a, hn, 3))
        ref = ad.reshape(reference, (b, a, 1, 3))
        return ad.add(ref, offsets)

    def _head_groups(self, a: int) -> np.ndarray:
        cfg = self.cfg
        per_anchor = np.repeat(np.arange(cfg.heads, dtype=np.intp), cfg.sample_points)
        return np.tile(per_anchor, a)

    def __call__(self, query: Tensor, volumes: list, reference: Tensor,
                 binning: DepthBinning, return_weights: bool = False):
        cfg = self.cfg
        b, a, _ = query.data.shape
        hn = cfg.heads * cfg.sample_points
        points = self.sample_points(query, reference)
        flat_pts = ad.reshape(points, (b, a * hn, 3))
        vol_pts = anchor_to_volume_coords(flat_pts, binning)
        groups = self._head_groups(a)
        reads = None
        for vol in volumes:
            r = ad.trilinear_gather_grouped(vol, vol_pts, groups, cfg.heads)
            reads = r if reads is None else ad.add(reads, r)
        reads = ad.mul(reads, 1.0 / len(volumes))  # (B, A*hn, C_I/heads)
        reads = ad.reshape(reads, (b, a, cfg.heads, cfg.sample_points, self.c_head))
        logits = ad.reshape(self.weight_head(query), (b, a, cfg.heads, cfg.sample_points))
        weights = ad.softmax(logits, axis=-1)
        mixed = ad.sum_(ad.mul(reads, ad.reshape(weights, weights.data.shape + (1,))), axis=3)
        out = self.out_proj(ad.reshape(mixed, (b, a, self.c_i)))
        if return_weights:
            return out, weights
        return out


def anchor_to_volume_coords(points: Tensor, binning: DepthBinning) -> Tensor:
    """(x, y, z-units) anchor coordinates -> (y, x, z-normalized) volume axes.

    Volumes are laid out (H, W, K, C) with H indexed by y and W by x; the z
    axis is normalized through the depth binning. Differentiable.
    """
    x = points[..., 0:1]
    y = points[..., 1:2]
    z = points[..., 2:3]
    span = binning.d_min + binning.d_max
    z_norm = ad.add(ad.mul(z, 2.0 / span), 2.0 * binning.d_min / span - 1.0)
    return ad.concat([y, x, z_norm], axis=-1)


def trilinear_sample(volume: Tensor, point, binning: DepthBinning) -> Tensor:
    """Sample one (H, W, K, C_I) volume at a single (x, y, z-units) point."""
    pt = point if isinstance(point, Tensor) else Tensor(np.asarray(point, dtype=np.float64))
    pt = ad.reshape(pt, (1, 3))
    vol_pt = anchor_to_volume_coords(pt, binning)
    out = ad.trilinear_gather(volume, vol_pt)
    return ad.reshape(out, (volume.data.shape[-1],))


class DecoderLayer:
    def __init__(self, store: ParameterStore, name: str, cfg: DecoderConfig, c_i: int,
                 c_depth: int | None):
        self.cfg = cfg
        self.with_depth = c_depth is not None
        if self.with_depth:
            self.depth_norm = LayerNormP(store, f"{name}.depthnorm", cfg.model_dim)
            self.depth_attn = MultiHeadAttention(
                store, f"{name}.depthattn", cfg.model_dim, cfg.heads, kv_dim=c_depth
            )
        self.self_norm = LayerNormP(store, f"{name}.selfnorm", cfg.model_dim)
        self.self_attn = MultiHeadAttention(store, f"{name}.selfattn", cfg.model_dim, cfg.heads)
        self.deform_norm = LayerNormP(store, f"{name}.deformnorm", cfg.model_dim)
        self.deform = DeformableCross3D(store, f"{name}.deform", cfg, c_i)
        self.ffn_norm = LayerNormP(store, f"{name}.ffnnorm", cfg.model_dim)
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.model_dim, cfg.ffn_hidden)

    def __call__(self, x: Tensor, depth_tokens: Tensor | None, volumes: list,
                 reference: Tensor, binning: DepthBinning) -> Tensor:
        if self.with_depth and depth_tokens is not None:
            x = ad.add(x, self.depth_attn(self.depth_norm(x), depth_tokens))
        normed = self.self_norm(x)
        x = ad.add(x, self.self_attn(normed, normed))
        x = ad.add(x, self.deform(self.deform_norm(x), volumes, reference, binning))
        x = ad.add(x, self.ffn(self.ffn_norm(x)))
        return x


class Decoder:
    """Query encoder + `layers` decoder blocks + final normalization."""

    def __init__(self, store: ParameterStore, n_joints: int, cfg: DecoderConfig, c_i: int,
                 c_depth: int | None):
        self.cfg = cfg
        self.encoder = QueryEncoder(store, n_joints, cfg)
        self.layers = [
            DecoderLayer(store, f"decoder.layer{i}", cfg, c_i, c_depth)
            for i in range(cfg.layers)
        ]
        if cfg.layers:
            self.final_norm = LayerNormP(store, "decoder.final", cfg.model_dim)

    def __call__(self, positions: Tensor, prov_joint: np.ndarray,
                 depth_tokens: Tensor | None, volumes: list,
                 binning: DepthBinning) -> AnchorQuery:
        query = self.encoder(positions, prov_joint)
        x = query.embedding
        for layer in self.layers:
            x = layer(x, depth_tokens, volumes, query.reference, binning)
        if self.layers:
            x = self.final_norm(x)
        return AnchorQuery(x, query.reference)
