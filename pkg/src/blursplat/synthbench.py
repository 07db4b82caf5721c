"""Synthetic scenes with known geometry, camera paths and simulated blur.

The world frame of a generated scene is the frame of camera 0, so the first
ground-truth pose is the identity. Ground-truth clouds use SH degree 0, which
keeps colors independent of that re-expression.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import convolve1d

from .losses import psnr, ssim  # noqa: F401  (re-exported metrics)
from .posekit import Trajectory, procrustes_align, trajectory_metrics
from .rasterizer import DEFAULT_OPTIONS, RenderOptions, render
from .scene import (
    CameraIntrinsics,
    CameraPose,
    GaussianCloud,
    atomic_write_bytes,
    load_ply,
    logit,
    read_png,
    rgb_to_sh0,
    rotmat_to_quat,
    save_ply,
    write_pfm,
    write_png,
)

BLUR_KINDS = ("camera_motion", "object_motion", "defocus", "none")
ARC_TABLE_SAMPLES = 4001


@dataclass(frozen=True)
class BlurSpec:
    kind: str = "camera_motion"
    n_sub: int = 16
    magnitude: float = 0.1

    def __post_init__(self):
        if self.kind not in BLUR_KINDS:
            raise ValueError(f"blur kind must be one of {BLUR_KINDS}, got {self.kind!r}")
        if self.n_sub < 1:
            raise ValueError("n_sub must be >= 1")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")


def _default_waypoints() -> tuple:
    # an arc of radius 0.45 through 2 rad: the motion direction turns from frame to frame
    return ((0.207, -0.379, -2.0), (0.171, -0.203, -2.0), (0.07, -0.056, -2.0),
            (-0.08, 0.041, -2.0), (-0.256, 0.071, -2.0), (-0.43, 0.031, -2.0))


@dataclass(frozen=True)
class SceneSpec:
    n_gaussians: int = 600
    extent: float = 1.0
    moving_fraction: float = 0.0
    n_frames: int = 10
    width: int = 64
    height: int = 64
    fov_x: float = 40.0
    seed: int = 0
    scale_range: tuple = (0.015, 0.04)
    opacity_range: tuple = (0.6, 0.95)
    waypoints: tuple = field(default_factory=_default_waypoints)
    look_at: tuple = (0.0, 0.0, 20.0)
    def __post_init__(self):
        if self.n_gaussians < 1 or self.n_frames < 1:
            raise ValueError("n_gaussians and n_frames must be >= 1")
        if not 0 <= self.moving_fraction <= 1:
            raise ValueError("moving_fraction must lie in [0, 1]")
        if len(self.waypoints) < 2:
            raise ValueError("need at least 2 waypoints")
        if self.extent <= 0:
            raise ValueError("extent must be > 0")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.from_fov(self.width, self.height, self.fov_x)


class CameraPath:
    """Cubic spline through waypoints, re-parameterized by arc length."""

    def __init__(self, waypoints, target, world_from_raw: CameraPose):
        w = np.asarray(waypoints, dtype=np.float64)
        self.knots = np.linspace(0.0, 1.0, len(w))
        self.spline = CubicSpline(self.knots, w, bc_type="natural")
        self.target = np.asarray(target, dtype=np.float64)
        self.world_from_raw = world_from_raw
        u = np.linspace(-0.5, 1.5, ARC_TABLE_SAMPLES)
        seg = np.linalg.norm(np.diff(self.spline(u), axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        self._u = u
        self._arc = arc - np.interp(0.0, u, arc)
        self.length = float(np.interp(1.0, u, self._arc))

    def param_at(self, arc) -> np.ndarray:
        return np.interp(arc, self._arc, self._u)

    def center_raw(self, arc) -> np.ndarray:
        return self.spline(self.param_at(arc))

    def pose_at(self, arc: float) -> CameraPose:
        raw = CameraPose.look_at(self.center_raw(arc), self.target)
        return raw.compose(self.world_from_raw.inverse())


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cloud: GaussianCloud
    trajectory: Trajectory
    path: CameraPath
    frame_arcs: np.ndarray
    moving: np.ndarray  # bool (N,)
    velocity: np.ndarray  # (N, 3) unit directions, zero for static Gaussians

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.spec.intrinsics

    def displacement(self, s: float) -> np.ndarray:
        """Offset of every Gaussian at exposure fraction ``s`` in [-0.5, 0.5], per unit magnitude."""
        return s * self.velocity


def _random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.sign(q[:, :1] + 1e-300)


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = np.moveaxis(a, -1, 0)
    w2, x2, y2, z2 = np.moveaxis(b, -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    rng = np.random.Generator(np.random.Philox(spec.seed))
    n = spec.n_gaussians
    pos_raw = rng.uniform(-spec.extent, spec.extent, size=(n, 3))
    colors = rng.uniform(0.05, 0.95, size=(n, 3))
    lo, hi = spec.scale_range
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 3))) * spec.extent
    opac = rng.uniform(*spec.opacity_range, size=n)
    rot_raw = _random_rotations(rng, n)
    moving = rng.uniform(size=n) < spec.moving_fraction
    vel = rng.normal(size=(n, 3))
    vel /= np.linalg.norm(vel, axis=1, keepdims=True)
    vel[~moving] = 0.0

    start = CameraPose.look_at(CubicSpline(np.linspace(0, 1, len(spec.waypoints)),
                                           np.asarray(spec.waypoints, dtype=np.float64),
                                           bc_type="natural")(0.0), spec.look_at)
    path = CameraPath(spec.waypoints, spec.look_at, start)
    R0 = start.R
    positions = pos_raw @ R0.T + start.translation
    rotations = _quat_mul(np.broadcast_to(rotmat_to_quat(R0), rot_raw.shape), rot_raw)
    velocity = vel @ R0.T
    sh = rgb_to_sh0(colors)[:, None, :]
    cloud = GaussianCloud(positions, rotations, np.log(scales), logit(opac), sh)

    if spec.n_frames == 1:
        arcs = np.zeros(1)
    else:
        arcs = np.linspace(0.0, path.length, spec.n_frames)
    poses = [path.pose_at(a) for a in arcs]
    poses[0] = CameraPose.identity()
    traj = Trajectory(poses, list(range(spec.n_frames)))
    return SyntheticScene(spec, cloud, traj, path, arcs, moving, velocity)


@dataclass
class BlurFrame:
    blurry: np.ndarray
    sharp: np.ndarray
    depth: np.ndarray


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.ones(1)
    r = max(1, int(np.ceil(4 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def sub_exposure_offsets(n_sub: int) -> np.ndarray:
    """Midpoint samples of the exposure interval, as fractions in (-0.5, 0.5)."""
    return (np.arange(n_sub) + 0.5) / n_sub - 0.5


def simulate_blur(scene: SyntheticScene, frame_t: int, blur: BlurSpec,
                  opts: RenderOptions = DEFAULT_OPTIONS) -> BlurFrame:
    intr = scene.intrinsics
    pose = scene.trajectory.poses[frame_t]
    sharp_out = render(scene.cloud, pose, intr, opts)
    sharp = sharp_out.color
    if blur.kind == "none" or blur.magnitude == 0:
        return BlurFrame(sharp.copy(), sharp, sharp_out.depth)
    if blur.kind == "defocus":
        k = gaussian_kernel1d(blur.magnitude)
        img = convolve1d(sharp, k, axis=0, mode="nearest")
        img = convolve1d(img, k, axis=1, mode="nearest")
        return BlurFrame(img, sharp, sharp_out.depth)
    acc = np.zeros_like(sharp)
    for s in sub_exposure_offsets(blur.n_sub):
        if blur.kind == "camera_motion":
            p = scene.path.pose_at(scene.frame_arcs[frame_t] + s * blur.magnitude)
            acc += render(scene.cloud, p, intr, opts).color
        else:
            moved = scene.cloud.copy()
            moved.positions = moved.positions + blur.magnitude * scene.displacement(s)
            acc += render(moved, pose, intr, opts).color
    return BlurFrame(acc / blur.n_sub, sharp, sharp_out.depth)


def sparse_points(scene: SyntheticScene, fraction: float = 1.0, noise: float = 0.01,
                  seed: int | None = None) -> GaussianCloud:
    """A noisy subset of the ground-truth centers with their base colors, standing in for SfM output."""
    rng = np.random.Generator(np.random.Philox(scene.spec.seed + 1 if seed is None else seed))
    n = len(scene.cloud)
    keep = np.sort(rng.choice(n, size=max(1, int(round(fraction * n))), replace=False))
    base = scene.cloud.select(keep)
    pos = base.positions + rng.normal(scale=noise * scene.spec.extent, size=base.positions.shape)
    out = GaussianCloud.create(pos, scales=0.05 * scene.spec.extent, opacities=0.5, sh_degree=0)
    out.sh[:] = base.sh
    return out


def write_dataset(scene: SyntheticScene, blur: BlurSpec, out_dir, with_sparse: bool = True,
                  opts: RenderOptions = DEFAULT_OPTIONS, sparse_fraction: float = 1.0) -> Path:
    out = Path(out_dir)
    for sub in ("frames", "sharp", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for t in range(len(scene.trajectory)):
        fr = simulate_blur(scene, t, blur, opts)
        write_png(out / "frames" / f"{t:05d}.png", fr.blurry)
        write_png(out / "sharp" / f"{t:05d}.png", fr.sharp)
        write_pfm(out / "depth" / f"{t:05d}.pfm", fr.depth)
    atomic_write_bytes(out / "intr.json", json.dumps(scene.intrinsics.to_dict(), indent=1).encode())
    scene.trajectory.save(out / "gt_poses.jsonl")
    save_ply(scene.cloud, out / "gt_cloud.ply")
    if with_sparse:
        save_ply(sparse_points(scene, sparse_fraction), out / "sparse.ply")
    meta = {"scene": asdict(scene.spec), "blur": asdict(blur)}
    atomic_write_bytes(out / "synth.json", json.dumps(meta, indent=1).encode())
    return out


REPORT_KEYS = ("psnr_sharp_mean", "ssim_sharp_mean", "psnr_blurry_mean", "ate", "rpe_t", "rpe_r")

REPORT_SCHEMA = {
    "type": "object",
    "required": list(REPORT_KEYS),
    "properties": {k: {"type": "number"} for k in REPORT_KEYS},
}


def evaluate_run(run_dir, gt_dir, opts: RenderOptions = DEFAULT_OPTIONS) -> dict:
    """Render the trained cloud at its estimated poses and score against ground truth."""
    run, gt = Path(run_dir), Path(gt_dir)
    cloud = load_ply(run / "cloud.ply")
    est = Trajectory.load(run / "traj.jsonl")
    intr = CameraIntrinsics.from_dict(json.loads((gt / "intr.json").read_text()))
    gt_traj = Trajectory.load(gt / "gt_poses.jsonl")
    ids = [i for i in est.frame_ids if i in set(gt_traj.frame_ids)]
    gt_idx = {f: k for k, f in enumerate(gt_traj.frame_ids)}
    est_idx = {f: k for k, f in enumerate(est.frame_ids)}
    ps, ss, pb = [], [], []
    for f in ids:
        sharp = read_png(gt / "sharp" / f"{f:05d}.png")
        blurry = read_png(gt / "frames" / f"{f:05d}.png")
        pred = render(cloud, est.poses[est_idx[f]], intr, opts).color
        ps.append(psnr(pred, sharp))
        ss.append(ssim(pred, sharp))
        pb.append(psnr(blurry, sharp))
    report = {
        "psnr_sharp_mean": float(np.mean(ps)),
        "ssim_sharp_mean": float(np.mean(ss)),
        "psnr_blurry_mean": float(np.mean(pb)),
        "ate": float("nan"), "rpe_t": float("nan"), "rpe_r": float("nan"),
        "psnr_sharp": ps, "psnr_blurry": pb,
    }
    if len(ids) >= 3:
        e = Trajectory([est.poses[est_idx[f]] for f in ids], ids)
        g = Trajectory([gt_traj.poses[gt_idx[f]] for f in ids], ids)
        aligned, sim = procrustes_align(e, g)
        report.update(trajectory_metrics(aligned, g))
        report["arc_length"] = g.arc_length()
        report["similarity_scale"] = sim.scale
    return report


__all__ = [
    "BlurSpec", "SceneSpec", "SyntheticScene", "CameraPath", "BlurFrame", "generate_scene",
    "simulate_blur", "gaussian_kernel1d", "sub_exposure_offsets", "sparse_points",
    "write_dataset", "evaluate_run", "psnr", "ssim", "REPORT_SCHEMA",
]
