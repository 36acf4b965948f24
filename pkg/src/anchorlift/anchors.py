"""3D anchor generation: adaptive joint-wise local anchors + fixed global grid.

Local anchors start at each joint's normalized 2D position lifted to depth 0
and are displaced by offsets produced by one shared linear map over the whole
flattened 2D pose, so every anchor sees global pose context. Global anchors
are a fixed grid on the depth-0 plane. The combined set, global block first,
is the positional basis for the decoder queries and the ensemble prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ParameterHealthError, ParameterStore
from .skeleton import Pose2D

GLOBAL_TAG = -1


@dataclass
class AnchorConfig:
    """Anchor-set layout.

    local_per_joint: anchors per joint (K). global_grid: (nx, ny) grid on the
    z = global_depth plane spanning [-1,1]^2 with anchors at cell centers, so
    the stride in normalized units is 2/nx by 2/ny.
    """

    local_per_joint: int = 16
    global_grid: tuple[int, int] = (16, 16)
    global_depth: float = 0.0

    def __post_init__(self):
        if self.local_per_joint < 1:
            raise ValueError("local_per_joint must be >= 1")
        if min(self.global_grid) < 1:
            raise ValueError("global grid dims must be >= 1")

    @property
    def plane_stride(self) -> tuple[float, float]:
        return (2.0 / self.global_grid[0], 2.0 / self.global_grid[1])

    @property
    def global_count(self) -> int:
        return self.global_grid[0] * self.global_grid[1]


@dataclass
class LocalOffsetParams:
    """The learnable offset map: flattened 2D pose (2*N_J) -> all offsets (N_J*K*3)."""

    weight: Tensor
    bias: Tensor
    n_joints: int
    local_per_joint: int

    def __post_init__(self):
        expected = (2 * self.n_joints, self.n_joints * self.local_per_joint * 3)
        if self.weight.data.shape != expected:
            raise ValueError(f"offset weight shape {self.weight.data.shape} != {expected}")
        if self.bias.data.shape != (expected[1],):
            raise ValueError(f"offset bias shape {self.bias.data.shape} != {(expected[1],)}")


@dataclass
class AnchorSet:
    """Anchor positions plus provenance.

    positions: (A, 3) in normalized coordinates (x, y nominally in [-1,1],
    z in depth units). prov_joint/prov_slot are -1 for global anchors and
    (joint, slot) for local ones. `tensor` carries the differentiable
    positions when the set was built inside a computation graph.
    """

    positions: np.ndarray
    prov_joint: np.ndarray
    prov_slot: np.ndarray
    tensor: Tensor | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.prov_joint = np.asarray(self.prov_joint, dtype=np.int64)
        self.prov_slot = np.asarray(self.prov_slot, dtype=np.int64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (A, 3)")
        if not (len(self.prov_joint) == len(self.prov_slot) == len(self.positions)):
            raise ValueError("provenance arrays must match position count")

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    @property
    def local_mask(self) -> np.ndarray:
        return self.prov_joint != GLOBAL_TAG

    def to_csv(self, path) -> None:
        """x,y,z,provenance rows for scatter-plot diagnostics."""
        lines = ["x,y,z,provenance"]
        for pos, j, k in zip(self.positions, self.prov_joint, self.prov_slot):
            tag = "global" if j == GLOBAL_TAG else f"local:{j}:{k}"
            lines.append(f"{pos[0]:.17g},{pos[1]:.17g},{pos[2]:.17g},{tag}")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def make_offset_params(store: ParameterStore, n_joints: int, cfg: AnchorConfig) -> LocalOffsetParams:
    """Register the offset-map parameters under the anchors.* group."""
    k = cfg.local_per_joint
    weight = store.add("anchors.offset.w", (2 * n_joints, n_joints * k * 3), init="fan_in")
    bias = store.add("anchors.offset.b", (n_joints * k * 3,), init="zeros")
    return LocalOffsetParams(weight, bias, n_joints, k)


def local_positions_batch(pose_flat: Tensor, params: LocalOffsetParams) -> Tensor:
    """Differentiable local anchor positions for a batch.

    pose_flat: (B, 2*N_J) normalized coordinates. Returns (B, N_J*K, 3):
    offsets from the shared linear map added onto each joint's (x, y, 0).
    """
    nj, k = params.n_joints, params.local_per_joint
    offsets = ad.linear(pose_flat, params.weight, params.bias)
    if not np.all(np.isfinite(offsets.data)):
        raise ParameterHealthError("non-finite local anchor offsets")
    offsets = ad.reshape(offsets, (-1, nj, k, 3))
    base_xy = ad.reshape(pose_flat, (-1, nj, 1, 2))
    zeros = Tensor(np.zeros((pose_flat.data.shape[0], nj, 1, 1)))
    base = ad.concat([base_xy, zeros], axis=3)
    positions = ad.add(base, offsets)
    return ad.reshape(positions, (-1, nj * k, 3))


def generate_local_anchors(pose: Pose2D, params: LocalOffsetParams) -> AnchorSet:
    """Local anchor block for one normalized pose, in (joint, slot) order."""
    if not pose.normalized:
        raise ValueError("local anchors require a normalized pose")
    nj, k = params.n_joints, params.local_per_joint
    if pose.joint_count != nj:
        raise ValueError(f"pose has {pose.joint_count} joints, params expect {nj}")
    flat = Tensor(pose.coords.reshape(1, 2 * nj))
    tensor = local_positions_batch(flat, params)
    tensor = ad.reshape(tensor, (nj * k, 3))
    prov_joint = np.repeat(np.arange(nj), k)
    prov_slot = np.tile(np.arange(k), nj)
    return AnchorSet(tensor.data, prov_joint, prov_slot, tensor=tensor)


def global_positions(cfg: AnchorConfig) -> np.ndarray:
    """Grid-center anchor positions on the global plane, row-major in (x, y)."""
    nx, ny = cfg.global_grid
    xs = -1.0 + (np.arange(nx) + 0.5) * (2.0 / nx)
    ys = -1.0 + (np.arange(ny) + 0.5) * (2.0 / ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    out = np.stack([gx.ravel(), gy.ravel(), np.full(nx * ny, cfg.global_depth)], axis=1)
    return out


def generate_global_anchors(cfg: AnchorConfig) -> AnchorSet:
    pos = global_positions(cfg)
    n = pos.shape[0]
    tag = np.full(n, GLOBAL_TAG, dtype=np.int64)
    return AnchorSet(pos, tag, tag.copy())


def build_anchor_set(pose: Pose2D, params: LocalOffsetParams, cfg: AnchorConfig) -> AnchorSet:
    """Global block first, then local block in (joint, slot) order.

    The order is load-bearing: decoder queries and ensemble heads index
    anchors positionally, so it must stay stable across calls.
    """
    global_part = generate_global_anchors(cfg)
    local_part = generate_local_anchors(pose, params)
    tensor = ad.concat([Tensor(global_part.positions), local_part.tensor], axis=0)
    return AnchorSet(
        tensor.data,
        np.concatenate([global_part.prov_joint, local_part.prov_joint]),
        np.concatenate([global_part.prov_slot, local_part.prov_slot]),
        tensor=tensor,
    )


def anchor_positions_batch(
    pose_flat: Tensor, params: LocalOffsetParams, cfg: AnchorConfig
) -> Tensor:
    """Batched full anchor positions (B, A_global + N_J*K, 3)."""
    b = pose_flat.data.shape[0]
    glob = np.broadcast_to(global_positions(cfg)[None], (b, cfg.global_count, 3)).copy()
    local = local_positions_batch(pose_flat, params)
    return ad.concat([Tensor(glob), local], axis=1)


def anchor_provenance(n_joints: int, cfg: AnchorConfig) -> tuple[np.ndarray, np.ndarray]:
    """(prov_joint, prov_slot) arrays matching anchor_positions_batch order."""
    k = cfg.local_per_joint
    prov_joint = np.concatenate(
        [np.full(cfg.global_count, GLOBAL_TAG, dtype=np.int64), np.repeat(np.arange(n_joints), k)]
    )
    prov_slot = np.concatenate(
        [np.full(cfg.global_count, GLOBAL_TAG, dtype=np.int64), np.tile(np.arange(k), n_joints)]
    )
    return prov_joint, prov_slot
