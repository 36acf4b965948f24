"""Synthetic skeleton gym: controllable scenes plus the train/eval harness.

Scenes are sampled by forward kinematics over the default 17-joint tree,
projected through a pinhole camera, and rendered into a 3-level feature
pyramid of per-joint Gaussian blobs. Two controllable failure modes drive
the experiments:

* self-occlusion: where two joints' blobs overlap on a fine level, the
  farther joint's blob is attenuated by (1 - occlusion_rate), removing the
  visual evidence the depth branch would otherwise read;
* 2D noise: the input pose fed to the model is the exact projection plus
  i.i.d. Gaussian pixel noise.

Depth is recoverable in principle: channel 0 of every level carries each
blob scaled by its joint's depth mapped into [0, 1]. The remaining channels
carry a fixed random nonnegative joint-to-channel mixing, so joint identity
is (softly) encoded. The mixing is a module constant: train and test sets
generated from different seeds must agree on it.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .nn import (
    AdamW,
    OptimizerConfig,
    ParameterStore,
    load_array_container,
    save_array_container,
)
from .pipeline import LiftingModel, ModelConfig, PreparedSample
from .sampler import FeaturePyramid
from .skeleton import (
    MetricReport,
    Pose2D,
    Pose3D,
    REST_DIRECTIONS,
    SkeletonTopology,
    aggregate_metrics,
    default_topology,
    load_pose_samples,
    root_center,
    save_pose_samples,
    select_challenging,
)

MIXING_SEED = 0x5EEDF00D  # joint-to-channel mixing is global, not per-dataset


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    sample_count: int = 200
    image_hw: tuple[int, int] = (64, 64)
    camera_distance: float = 4.0
    focal: float | None = None  # default: W * camera_distance / 2
    yaw_range: float = np.pi
    limb_angle_range: float = 0.7
    torso_angle_range: float = 0.35
    occlusion_rate: float = 0.3
    occlusion_reach: float = 2.0  # blob-center overlap threshold, in sigmas
    noise_sigma: float = 1.5  # pixels
    feature_channels: int = 8
    feature_noise: float = 0.02
    depth_range: tuple[float, float] = (1.0, 1.0)  # (d_min, d_max)
    challenging_threshold: float = 5.0  # pixels, mean per-joint error

    def __post_init__(self):
        h, w = self.image_hw
        if h % 8 or w % 8:
            raise ValueError("image size must be divisible by 8")
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError("occlusion_rate must be a probability")

    def focal_length(self) -> float:
        return self.focal if self.focal is not None else self.image_hw[1] * self.camera_distance / 2.0

    def bone_angle_ranges(self, topology: SkeletonTopology) -> np.ndarray:
        """Per-bone rotation ranges; index 0 is the whole-body yaw range."""
        ranges = np.full(topology.joint_count, self.limb_angle_range)
        ranges[0] = self.yaw_range
        for j in (7, 8, 9, 10):  # spine chain moves less than limbs
            if j < topology.joint_count:
                ranges[j] = self.torso_angle_range
        return ranges


@dataclass
class Sample:
    index: int
    gt3d: Pose3D
    gt2d: Pose2D  # exact projection, pixel units
    input2d: Pose2D  # gt2d + noise, pixel units
    pyramid: FeaturePyramid
    challenging: bool


def _rot_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def generate_skeleton(rng: np.random.Generator, topology: SkeletonTopology,
                      cfg: SynthConfig) -> Pose3D:
    """Forward-kinematics walk from the root.

    Each bone's rest direction is perturbed by rotations about the x and y
    axes drawn from the per-bone range, then the whole pose is yawed about
    the vertical axis. Zero ranges reproduce the rest pose exactly. The
    root stays at the origin, so the result is root-relative; the depth
    span is bounded by twice the maximum reach, inside [-d_min, d_max].
    """
    ranges = cfg.bone_angle_ranges(topology)
    yaw = _rot_y(rng.uniform(-ranges[0], ranges[0]))
    nj = topology.joint_count
    coords = np.zeros((nj, 3))
    for j in range(1, nj):
        r = ranges[j]
        ax = rng.uniform(-r, r)
        ay = rng.uniform(-r, r)
        direction = yaw @ _rot_x(ax) @ _rot_y(ay) @ REST_DIRECTIONS[j]
        coords[j] = coords[topology.parent_index[j]] + topology.bone_length[j] * direction
    return Pose3D(coords)


def project(pose3d: Pose3D, cfg: SynthConfig) -> Pose2D:
    """Pinhole projection to pixel coordinates.

    x_pix = f * X / (Z + distance) + W/2 (and likewise for y), with the
    camera looking down +z at the root plane. Joints at or behind the
    camera are a generation error and raise.
    """
    h, w = cfg.image_hw
    f = cfg.focal_length()
    z_cam = pose3d.coords[:, 2] + cfg.camera_distance
    if np.any(z_cam <= 1e-6):
        raise ValueError("joint behind the camera")
    x = f * pose3d.coords[:, 0] / z_cam + w / 2.0
    y = f * pose3d.coords[:, 1] / z_cam + h / 2.0
    return Pose2D(np.stack([x, y], axis=1))


def add_noise(pose2d: Pose2D, sigma: float, rng: np.random.Generator) -> Pose2D:
    """i.i.d. Gaussian pixel noise per coordinate, before normalization."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if pose2d.normalized:
        raise ValueError("noise applies to pixel coordinates")
    if sigma == 0.0:
        return Pose2D(pose2d.coords.copy())
    return Pose2D(pose2d.coords + rng.normal(0.0, sigma, size=pose2d.coords.shape))


def joint_channel_mixing(n_joints: int, channels: int) -> np.ndarray:
    """Fixed nonnegative joint-to-channel mixing for channels 1..C-1.

    Nonnegativity keeps pyramid energy monotone under occlusion attenuation;
    the lower bound keeps every joint visible in at least one channel.
    """
    rng = np.random.default_rng(np.random.SeedSequence(MIXING_SEED))
    return rng.uniform(0.2, 1.0, size=(n_joints, channels - 1))


def synthesize_features(gt3d: Pose3D, gt2d: Pose2D, cfg: SynthConfig,
                        mixing: np.ndarray, rng: np.random.Generator | None = None) -> FeaturePyramid:
    """Gaussian-blob pyramid with occlusion attenuation and a depth channel.

    Per level (H/2, H/4, H/8): blob sigma proportional to resolution. On the
    two fine levels, a joint whose blob center lies within occlusion_reach
    sigmas of a nearer joint's center is attenuated by (1 - occlusion_rate)
    per occluder. Channel 0 accumulates blob * depth01; channels 1..C-1
    accumulate blob * mixing. Optional i.i.d. feature noise comes last.
    """
    h_img, w_img = cfg.image_hw
    d_min, d_max = cfg.depth_range
    z = gt3d.coords[:, 2]
    depth01 = (z + d_min) / (d_min + d_max)
    nj = gt3d.joint_count
    levels = []
    n_levels = 3
    for lvl in range(n_levels):
        h, w = h_img >> (lvl + 1), w_img >> (lvl + 1)
        sigma = max(0.5, h / 16.0)
        scale_x, scale_y = w / w_img, h / h_img
        px = gt2d.coords[:, 0] * scale_x
        py = gt2d.coords[:, 1] * scale_y
        atten = np.ones(nj)
        if lvl < n_levels - 1 and cfg.occlusion_rate > 0:
            for j in range(nj):
                for i in range(nj):
                    if z[i] < z[j]:  # i is nearer to the camera
                        d2 = (px[i] - px[j]) ** 2 + (py[i] - py[j]) ** 2
                        if d2 < (cfg.occlusion_reach * sigma) ** 2:
                            atten[j] *= 1.0 - cfg.occlusion_rate
        ys = np.arange(h)[:, None] + 0.5
        xs = np.arange(w)[None, :] + 0.5
        grid = np.zeros((h, w, cfg.feature_channels))
        for j in range(nj):
            blob = np.exp(
                -((xs - px[j]) ** 2 + (ys - py[j]) ** 2) / (2.0 * sigma**2)
            ) * atten[j]
            grid[:, :, 0] += blob * depth01[j]
            grid[:, :, 1:] += blob[:, :, None] * mixing[j][None, None, :]
        if rng is not None and cfg.feature_noise > 0:
            grid += cfg.feature_noise * rng.standard_normal(grid.shape)
        levels.append(grid)
    return FeaturePyramid(levels)


def generate_sample(index: int, cfg: SynthConfig, topology: SkeletonTopology,
                    mixing: np.ndarray) -> Sample:
    """One deterministic sample from the per-index RNG stream."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(index,)))
    h, w = cfg.image_hw
    rejections = 0
    while True:
        pose3d = generate_skeleton(rng, topology, cfg)
        try:
            gt2d = project(pose3d, cfg)
        except ValueError:
            rejections += 1
            continue
        inside = np.all((gt2d.coords >= 0) & (gt2d.coords <= [w, h]))
        if inside:
            break
        rejections += 1
        if rejections > 100:
            raise RuntimeError("camera configuration rejects every pose")
    input2d = add_noise(gt2d, cfg.noise_sigma, rng)
    pyramid = synthesize_features(pose3d, gt2d, cfg, mixing, rng)
    challenging = select_challenging(input2d, gt2d, cfg.challenging_threshold)
    return Sample(index, pose3d, gt2d, input2d, pyramid, challenging)


def generate_dataset(cfg: SynthConfig, topology: SkeletonTopology | None = None) -> list[Sample]:
    topology = topology or default_topology()
    mixing = joint_channel_mixing(topology.joint_count, cfg.feature_channels)
    return [generate_sample(i, cfg, topology, mixing) for i in range(cfg.sample_count)]


# -- dataset files -------------------------------------------------------------


def save_dataset(dir_path, samples: list[Sample], cfg: SynthConfig) -> None:
    """poses.json (gt3d/gt2d/pred2d schema) + pyramids.bin + meta.json."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    save_pose_samples(
        out / "poses.json",
        [
            {"gt3d": s.gt3d.coords, "gt2d": s.gt2d.coords, "pred2d": s.input2d.coords}
            for s in samples
        ],
    )
    arrays = {}
    for s in samples:
        for lvl, grid in enumerate(s.pyramid.levels):
            arrays[f"s{s.index}.l{lvl}"] = grid
    save_array_container(out / "pyramids.bin", arrays)
    meta = {"config": _config_dict(cfg), "count": len(samples)}
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)


def load_dataset(dir_path) -> tuple[list[Sample], SynthConfig]:
    src = Path(dir_path)
    with open(src / "meta.json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = _config_from_dict(meta["config"])
    poses = load_pose_samples(src / "poses.json")
    arrays = load_array_container(src / "pyramids.bin")
    samples = []
    for i, entry in enumerate(poses):
        levels = [arrays[f"s{i}.l{lvl}"] for lvl in range(3)]
        gt2d = Pose2D(entry["gt2d"])
        input2d = Pose2D(entry["pred2d"])
        samples.append(
            Sample(
                index=i,
                gt3d=Pose3D(entry["gt3d"]),
                gt2d=gt2d,
                input2d=input2d,
                pyramid=FeaturePyramid(levels),
                challenging=select_challenging(input2d, gt2d, cfg.challenging_threshold),
            )
        )
    return samples, cfg


def _config_dict(cfg) -> dict:
    d = asdict(cfg)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d


def _config_from_dict(d: dict) -> SynthConfig:
    kwargs = dict(d)
    for key in ("image_hw", "depth_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    return SynthConfig(**kwargs)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: LiftingModel
    store: ParameterStore
    curve: list  # (epoch, train_loss, train_mpjpe, val_mpjpe)
    checkpoint_path: str | None
    wall_seconds: float
    token_count_mean: float


def curve_to_csv(curve, path) -> None:
    lines = ["epoch,train_loss,train_mpjpe,val_mpjpe"]
    for epoch, loss, tm, vm in curve:
        lines.append(f"{epoch},{loss:.17g},{tm:.17g},{vm:.17g}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield range(start, min(start + size, n))


def eval_mpjpe(model: LiftingModel, prepared: list[PreparedSample], batch_size: int = 32) -> float:
    total = 0.0
    count = 0
    for chunk in _batches(len(prepared), batch_size):
        batch = [prepared[i] for i in chunk]
        poses = model.predict_batch(batch)
        for p, pred in zip(batch, poses):
            total += float(np.linalg.norm(pred - p.gt3d, axis=-1).mean())
            count += 1
    return total / max(count, 1)


def train_model(
    model_cfg: ModelConfig,
    opt_cfg: OptimizerConfig,
    train_samples: list[Sample],
    val_samples: list[Sample],
    seed: int = 0,
    batch_size: int = 16,
    checkpoint_path=None,
    curve_path=None,
    log=None,
) -> TrainResult:
    """Train one variant to the epoch budget; deterministic given (seed, cfg).

    Divergence (mean epoch loss above 10x the first epoch's for 3
    consecutive epochs) aborts with diagnostics in the exception message.
    """
    t0 = time.time()
    store = ParameterStore(seed)
    model = LiftingModel(store, model_cfg)
    prepared = [model.prepare_sample(s, s.index) for s in train_samples]
    prepared_val = [model.prepare_sample(s, s.index) for s in val_samples]
    optimizer = AdamW(store, opt_cfg)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xBA7C,)))

    curve = []
    reference_loss = None
    bad_epochs = 0
    for epoch in range(opt_cfg.epochs):
        order = shuffle_rng.permutation(len(prepared))
        ep_loss = 0.0
        ep_mpjpe = 0.0
        n_batches = 0
        for chunk in _batches(len(order), batch_size):
            batch = [prepared[order[i]] for i in chunk]
            out = model.forward_batch(batch)
            out["loss"].backward()
            ep_loss += out["loss"].item()
            ep_mpjpe += out["pose_loss"].item()
            n_batches += 1
            optimizer.step()
        optimizer.end_epoch()
        ep_loss /= n_batches
        ep_mpjpe /= n_batches
        val_mpjpe = eval_mpjpe(model, prepared_val) if prepared_val else float("nan")
        curve.append((epoch, ep_loss, ep_mpjpe, val_mpjpe))
        if log:
            log(f"epoch {epoch}: loss {ep_loss:.5f} train_mpjpe {ep_mpjpe:.5f} val_mpjpe {val_mpjpe:.5f}")
        if reference_loss is None:
            reference_loss = ep_loss
        if ep_loss > 10.0 * reference_loss:
            bad_epochs += 1
            if bad_epochs >= 3:
                raise TrainingDiverged(
                    f"loss {ep_loss:.4g} above 10x initial {reference_loss:.4g} "
                    f"for {bad_epochs} consecutive epochs (variant={model_cfg.variant}, "
                    f"epoch={epoch}, lr={optimizer.lr:.3g})"
                )
        else:
            bad_epochs = 0

    store.check_health()
    if checkpoint_path is not None:
        store.save(checkpoint_path)
    if curve_path is not None:
        curve_to_csv(curve, curve_path)
    token_mean = float(np.mean([p.token_count for p in prepared])) if prepared else 0.0
    return TrainResult(model, store, curve, checkpoint_path, time.time() - t0, token_mean)


# -- evaluation ------------------------------------------------------------------


def evaluate(model: LiftingModel, samples: list[Sample], pck_threshold: float = 0.15,
             batch_size: int = 32) -> dict:
    """MetricReports for the full set and the challenging / non-challenging
    partition (by 2D input error); empty splits are reported as None."""
    prepared = [model.prepare_sample(s, s.index) for s in samples]
    preds = []
    for chunk in _batches(len(prepared), batch_size):
        preds.extend(model.predict_batch([prepared[i] for i in chunk]))
    gts = [root_center(s.gt3d.coords) for s in samples]
    preds = [np.asarray(p) for p in preds]

    def report(idx):
        if not idx:
            return None
        return aggregate_metrics([preds[i] for i in idx], [gts[i] for i in idx], pck_threshold)

    challenging = [i for i, s in enumerate(samples) if s.challenging]
    easy = [i for i, s in enumerate(samples) if not s.challenging]
    return {
        "full": report(list(range(len(samples)))),
        "challenging": report(challenging),
        "non_challenging": report(easy),
    }


def noise_sweep(model: LiftingModel, samples: list[Sample], sigmas, cfg: SynthConfig,
                sweep_seed: int = 7, pck_threshold: float = 0.15) -> list[dict]:
    """Re-noise the ground-truth 2D inputs at each sigma and evaluate.

    Mirrors the robustness protocol: one row per sigma with full-set
    metrics. Deterministic via a dedicated (sweep_seed, sigma, sample)
    stream; the original dataset noise is discarded.
    """
    rows = []
    for s_i, sigma in enumerate(sigmas):
        noised = []
        for s in samples:
            rng = np.random.default_rng(
                np.random.SeedSequence(sweep_seed, spawn_key=(s_i, s.index))
            )
            input2d = add_noise(s.gt2d, float(sigma), rng)
            noised.append(
                Sample(
                    s.index,
                    s.gt3d,
                    s.gt2d,
                    input2d,
                    s.pyramid,
                    select_challenging(input2d, s.gt2d, cfg.challenging_threshold),
                )
            )
        result = evaluate(model, noised, pck_threshold)["full"]
        rows.append(
            {
                "sigma": float(sigma),
                "mpjpe": result.mpjpe,
                "pa_mpjpe": result.pa_mpjpe,
                "pck": result.pck,
                "auc": result.auc,
            }
        )
    return rows
