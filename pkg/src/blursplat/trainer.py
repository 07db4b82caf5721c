"""Progressive frame-by-frame training: fit frame 0, then for every new frame
track its pose against the frozen scene and jointly refine scene, blur model
and recent poses on a two-frame window, with periodic passes over all frames.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .blurnet import BlurNet, BlurNetConfig, render_blurred, render_blurred_backward, save_blurnet
from .densify import DensifyConfig, densify_cloud, knn_query
from .losses import LossWeights, depth_loss_and_grad, image_loss_and_grad, pose_reg_and_grad, psnr, total_loss
from .optim import Adam
from .posekit import PoseDivergenceError, PoseOptions, Trajectory, estimate_pose
from .rasterizer import DEFAULT_OPTIONS, RenderOptions
from .scene import (
    DEPTH_SENTINEL,
    CameraIntrinsics,
    CameraPose,
    GaussianCloud,
    atomic_write_bytes,
    load_ply,
    logit,
    quat_to_rotmat,
    read_pfm,
    read_png,
    rgb_to_sh0,
    save_ply,
)

CLOUD_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 20000
    frame0_iters: int = 600
    window_iters: int = 300
    global_every: int = 500
    global_iters: int = 100
    final_iters: int = 0
    densify_start_iter: int = 2000
    densify_interval: int = 100
    densify_stop_iter: int = 15000
    prune_opacity_threshold: float = 1e-2
    densify_grad_threshold: float = 5e-4
    depth_prune_multiplier: float = 3.0
    percent_dense: float = 0.01
    max_gaussians: int = 20000
    m_blur: int = 4
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_mlp: float = 1e-3
    lr_rho: float = 1e-4
    lr_pose_rotation: float = 1e-4
    lr_pose_translation: float = 1e-4
    refine_poses: bool = True
    init_opacity: float = 0.3
    init_scale_factor: float = 1.0
    use_blur_for_pose: bool = True
    constant_velocity_init: bool = False
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ValueError("total_iters must be > 0")
        for name in ("frame0_iters", "window_iters", "global_iters", "final_iters", "densify_start_iter", "log_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("init_scale_factor", "prune_opacity_threshold", "densify_grad_threshold", "depth_prune_multiplier",
                     "percent_dense", "densify_interval", "global_every", "m_blur"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


# ---------------------------------------------------------------------------
# dataset


@dataclass
class Dataset:
    frames: list[np.ndarray]
    intr: CameraIntrinsics
    depths: list[np.ndarray] | None = None
    gt_poses: Trajectory | None = None
    sparse: GaussianCloud | None = None
    frame_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.frame_ids:
            self.frame_ids = list(range(len(self.frames)))
        if self.depths is not None and len(self.depths) != len(self.frames):
            raise ValueError("depth count differs from frame count")


def load_dataset(path) -> Dataset:
    root = Path(path)
    frame_files = sorted((root / "frames").glob("*.png"))
    if not frame_files:
        raise FileNotFoundError(f"no frames in {root / 'frames'}")
    frames = [read_png(f) for f in frame_files]
    ids = [int(f.stem) for f in frame_files]
    depths = None
    if (root / "depth").is_dir():
        files = [root / "depth" / f"{i:05d}.pfm" for i in ids]
        if all(f.exists() for f in files):
            depths = [read_pfm(f) for f in files]
    intr = CameraIntrinsics.from_dict(json.loads((root / "intr.json").read_text()))
    gt = Trajectory.load(root / "gt_poses.jsonl") if (root / "gt_poses.jsonl").exists() else None
    sparse = load_ply(root / "sparse.ply") if (root / "sparse.ply").exists() else None
    return Dataset(frames, intr, depths, gt, sparse, ids)


def bootstrap_from_depth(image: np.ndarray, depth: np.ndarray, intr: CameraIntrinsics,
                         stride: int = 4, sh_degree: int = 0) -> GaussianCloud:
    """Back-project a pixel grid of a camera-0 depth map into a sparse colored cloud."""
    v, u = np.mgrid[0:intr.height:stride, 0:intr.width:stride]
    z = depth[v, u]
    ok = (z != DEPTH_SENTINEL) & (z > 0)
    if not ok.any():
        raise ValueError("depth map has no valid pixels to bootstrap from")
    u, v, z = u[ok], v[ok], z[ok]
    pts = np.stack([(u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z], axis=1)
    cloud = GaussianCloud.create(pts, scales=0.01, opacities=0.5, sh_degree=sh_degree)
    cloud.sh[:, 0, :] = rgb_to_sh0(image[v, u])
    return cloud


# ---------------------------------------------------------------------------
# densification and pruning


@dataclass
class DensifyState:
    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> DensifyState:
        return cls(np.zeros(n), np.zeros(n))

    def add(self, mean2d_grad: np.ndarray, visible: np.ndarray, intr: CameraIntrinsics) -> None:
        # screen gradients in normalized device units, as the thresholds expect
        ndc = mean2d_grad * np.array([intr.width / 2.0, intr.height / 2.0])
        self.grad_accum[visible] += np.linalg.norm(ndc[visible], axis=1)
        self.denom[visible] += 1

    def mean(self) -> np.ndarray:
        return self.grad_accum / np.maximum(self.denom, 1)


@dataclass
class DensifyResult:
    cloud: GaussianCloud
    keep: np.ndarray  # rows of the old cloud kept, in order
    parents: np.ndarray  # old row each appended Gaussian was derived from
    n_new: int

    def remap(self, values: np.ndarray, fill=0) -> np.ndarray:
        """Carry a per-Gaussian array through this step; new rows inherit ``fill``."""
        pad = np.full((self.n_new,) + values.shape[1:], fill, dtype=values.dtype)
        return np.concatenate([values[self.keep], pad])


def camera_depths(cloud: GaussianCloud, pose: CameraPose) -> np.ndarray:
    return cloud.positions @ pose.R[2] + pose.translation[2]


def densify_and_prune(cloud: GaussianCloud, mean_grad: np.ndarray, cfg: TrainConfig, scene_extent: float,
                      pose: CameraPose | None = None, rng: np.random.Generator | None = None,
                      allow_growth: bool = True) -> DensifyResult:
    """Clone or split high-gradient Gaussians, then prune faint and far ones."""
    n = len(cloud)
    rng = rng if rng is not None else np.random.Generator(np.random.Philox(cfg.seed))
    grow = (mean_grad > cfg.densify_grad_threshold) if allow_growth else np.zeros(n, dtype=bool)
    if allow_growth and n + grow.sum() > cfg.max_gaussians:
        budget = max(0, cfg.max_gaussians - n)
        order = np.argsort(-mean_grad, kind="stable")[:budget]
        grow = np.zeros(n, dtype=bool)
        grow[order] = mean_grad[order] > cfg.densify_grad_threshold
    big = cloud.scales.max(axis=1) > cfg.percent_dense * scene_extent
    clone = np.flatnonzero(grow & ~big)
    split = np.flatnonzero(grow & big)

    parents = [clone]
    new_clouds = [cloud.select(clone)]
    if len(split):
        src = cloud.select(np.repeat(split, 2))
        R = quat_to_rotmat(src.rotations)
        local = rng.normal(size=(len(src), 3)) * src.scales
        src.positions = src.positions + np.einsum("nij,nj->ni", R, local)
        src.log_scales = src.log_scales - np.log(1.6)
        new_clouds.append(src)
        parents.append(np.repeat(split, 2))

    alive = np.ones(n, dtype=bool)
    alive[split] = False
    merged = cloud.select(np.flatnonzero(alive))
    parents_all = np.concatenate(parents)
    for c in new_clouds:
        merged = merged.concat(c)
    keep_mask = merged.opacities >= cfg.prune_opacity_threshold
    if pose is not None:
        z = camera_depths(merged, pose)
        front = z > 0
        if front.any():
            limit = cfg.depth_prune_multiplier * float(np.median(z[front]))
            keep_mask &= z <= limit
    n_old_kept = int(alive.sum())
    old_rows = np.flatnonzero(alive)
    kept_old = old_rows[keep_mask[:n_old_kept]]
    kept_new = keep_mask[n_old_kept:]
    out = cloud.select(kept_old)
    added = merged.select(np.arange(n_old_kept, len(merged))[kept_new])
    if len(added):
        out = out.concat(added)
    return DensifyResult(out, kept_old, parents_all[kept_new], int(kept_new.sum()))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    cloud: GaussianCloud
    net: BlurNet
    trajectory: Trajectory
    log: list[dict]
    pose_failures: list[int]
    iterations: int


def _cloud_params(cloud: GaussianCloud) -> dict[str, np.ndarray]:
    return {k: getattr(cloud, k) for k in CLOUD_FIELDS}


class _Trainer:
    def __init__(self, data: Dataset, cfg: TrainConfig, weights: LossWeights, net_cfg: BlurNetConfig,
                 render_opts: RenderOptions, pose_opts: PoseOptions, log_fn: Callable[[dict], None] | None,
                 dump_dir: Path | None):
        self.data = data
        self.cfg = cfg
        self.w = weights
        self.opts = render_opts
        self.pose_opts = pose_opts
        self.log_fn = log_fn
        self.dump_dir = dump_dir
        self.rng = np.random.Generator(np.random.Philox(cfg.seed + 17))
        self.net = BlurNet.create(replace(net_cfg, m=cfg.m_blur), seed=cfg.seed)
        self.it = 0
        self.log: list[dict] = []
        self.poses: dict[int, CameraPose] = {}
        self.adam = Adam({"positions": cfg.lr_position, "rotations": cfg.lr_rotation,
                          "log_scales": cfg.lr_scale, "opacity_logits": cfg.lr_opacity, "sh": cfg.lr_sh,
                          **{f"net.{k}": cfg.lr_mlp for k in self.net.weight_names()},
                          "net.rho_r": cfg.lr_rho, "net.rho_s": cfg.lr_rho})
        self.cloud: GaussianCloud | None = None
        self.dstate: DensifyState | None = None
        self.extent = 1.0

    # -- setup ---------------------------------------------------------------
    def init_cloud(self, sparse: GaussianCloud, densify_cfg: DensifyConfig):
        cloud = densify_cloud(sparse, densify_cfg)
        n = len(cloud)
        k = min(3, n - 1)
        if k >= 1:
            d = np.array([np.sqrt(np.mean(knn_query(cloud.positions, p, k + 1)[1][1:] ** 2))
                          for p in cloud.positions])
            cloud.log_scales = np.log(np.maximum(self.cfg.init_scale_factor * d, 1e-4))[:, None].repeat(3, axis=1)
        cloud.opacity_logits = np.full(n, float(logit(self.cfg.init_opacity)))
        self.cloud = cloud
        center = cloud.positions.mean(axis=0)
        self.extent = float(np.max(np.linalg.norm(cloud.positions - center, axis=1))) or 1.0
        self.dstate = DensifyState.zeros(n)

    # -- one optimization step --------------------------------------------
    def lr_position(self) -> float:
        t = min(1.0, self.it / self.cfg.total_iters)
        return math.exp((1 - t) * math.log(self.cfg.lr_position) + t * math.log(self.cfg.lr_position_final))

    def net_names(self) -> list[str]:
        return self.net.weight_names() + ["rho_r", "rho_s"]

    def step(self, frame: int, phase: str, update_pose: bool) -> dict:
        cfg, data, cloud = self.cfg, self.data, self.cloud
        pose = self.poses[frame]
        target = data.frames[frame]
        fwd = render_blurred(cloud, self.net, pose, data.intr, self.opts)
        l_img, g_img = image_loss_and_grad(fwd.color, target, self.w.lambda_image_mix)
        l_dep, g_dep = 0.0, None
        if data.depths is not None and self.w.lambda_depth > 0:
            l_dep, g_dep, _ = depth_loss_and_grad(fwd.depth, data.depths[frame])
            g_dep = self.w.lambda_depth * g_dep
        l_pose, g_pose = pose_reg_and_grad(cloud.log_scales, self.w.eps_pose)
        try:
            loss = total_loss(l_img, l_dep, l_pose, self.w)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"iteration {self.it} frame {frame}: {exc}", self._dump()) from exc
        grads = render_blurred_backward(cloud, self.net, pose, data.intr, fwd, g_img, g_dep, self.opts)
        cg = grads.cloud
        cg.log_scales += self.w.lambda_pose * g_pose

        visible = np.zeros(len(cloud), dtype=bool)
        for r in fwd.renders:
            visible |= r.projection.visible
        self.dstate.add(cg.mean2d / len(fwd.renders), visible, data.intr)

        self.adam.lrs["positions"] = self.lr_position()
        params = _cloud_params(cloud)
        self.adam.step(params, {k: getattr(cg, k) for k in CLOUD_FIELDS})
        names = self.net_names()
        self.adam.step({f"net.{k}": self.net.params[k] for k in names}, {f"net.{k}": grads.net[k] for k in names})
        cloud.normalize_rotations()
        if update_pose and frame != 0:
            self.adam.lrs.setdefault(f"pose_r{frame}", cfg.lr_pose_rotation)
            self.adam.lrs.setdefault(f"pose_t{frame}", cfg.lr_pose_translation)
            self.poses[frame] = pose.perturbed(self.adam.delta(f"pose_r{frame}", cg.pose_rotation),
                                               self.adam.delta(f"pose_t{frame}", cg.pose_translation))
        self.it += 1
        self._maybe_densify()
        rec = {"iter": self.it, "frame": int(data.frame_ids[frame]), "phase": phase, "loss": loss,
               "l_image": l_img, "l_depth": l_dep, "l_pose": l_pose,
               "psnr": psnr(fwd.color, target), "n_gaussians": len(self.cloud)}
        if cfg.log_every and self.it % cfg.log_every == 0:
            self._emit(rec)
        return rec

    def _maybe_densify(self):
        cfg = self.cfg
        if self.it < cfg.densify_start_iter or self.it % cfg.densify_interval:
            return
        last = max(self.poses)
        res = densify_and_prune(self.cloud, self.dstate.mean(), cfg, self.extent, self.poses[last],
                                self.rng, allow_growth=self.it <= cfg.densify_stop_iter)
        self.adam.remap_rows(CLOUD_FIELDS, res.keep, res.n_new)
        self.cloud = res.cloud
        self.dstate = DensifyState.zeros(len(self.cloud))

    def _emit(self, rec: dict):
        self.log.append(rec)
        if self.log_fn is not None:
            self.log_fn(rec)

    def _dump(self) -> str | None:
        if self.dump_dir is None:
            return None
        path = self.dump_dir / "diverged_state.ply"
        try:
            save_ply(self.cloud, path)
        except (ValueError, OSError):
            return None
        return str(path)

    def budget_left(self) -> int:
        return self.cfg.total_iters - self.it

    # -- phases ---------------------------------------------------------------
    def fit(self, frames: list[int], iters: int, phase: str, update_pose: bool):
        rec = None
        for i in range(min(iters, self.budget_left())):
            rec = self.step(frames[i % len(frames)], phase, update_pose)
        if rec is not None and (not self.cfg.log_every or self.it % self.cfg.log_every):
            self._emit(rec)

    def track(self, t: int) -> tuple[CameraPose, bool]:
        prev = self.poses[t - 1]
        init = prev
        if self.cfg.constant_velocity_init and t >= 2:
            init = prev.compose(self.poses[t - 2].inverse()).compose(prev)
        net = self.net if self.cfg.use_blur_for_pose else None
        try:
            res = estimate_pose(self.cloud, self.data.frames[t], init, self.data.intr, self.pose_opts, net)
        except PoseDivergenceError:
            return prev, False
        return res.pose, True


def train_progressive(data: Dataset, sparse_init: GaussianCloud | None = None, cfg: TrainConfig = TrainConfig(),
                      weights: LossWeights = LossWeights(), densify_cfg: DensifyConfig = DensifyConfig(),
                      net_cfg: BlurNetConfig = BlurNetConfig(), render_opts: RenderOptions = DEFAULT_OPTIONS,
                      pose_opts: PoseOptions = PoseOptions(), log_fn: Callable[[dict], None] | None = None,
                      dump_dir=None) -> TrainResult:
    """Track and reconstruct a frame sequence; frame 0 is the world frame."""
    n = len(data.frames)
    if n < 2:
        raise ValueError("need at least 2 frames")
    if sparse_init is None:
        sparse_init = data.sparse
    if sparse_init is None:
        if data.depths is None:
            raise ValueError("no sparse cloud and no depth to bootstrap one from")
        sparse_init = bootstrap_from_depth(data.frames[0], data.depths[0], data.intr)
    tr = _Trainer(data, cfg, weights, net_cfg, render_opts, replace(pose_opts, render=render_opts),
                  log_fn, Path(dump_dir) if dump_dir is not None else None)
    tr.init_cloud(sparse_init, densify_cfg)
    tr.poses[0] = CameraPose.identity()
    tr.fit([0], cfg.frame0_iters, "frame0", update_pose=False)

    failures: list[int] = []
    next_global = cfg.global_every * (tr.it // cfg.global_every + 1)
    for t in range(1, n):
        pose, ok = tr.track(t)
        if not ok:
            failures.append(int(data.frame_ids[t]))
        tr.poses[t] = pose
        start = tr.it
        while tr.it - start < cfg.window_iters and tr.budget_left() > 0:
            chunk = min(cfg.window_iters - (tr.it - start), next_global - tr.it)
            tr.fit([t - 1, t], chunk, "window", cfg.refine_poses)
            if tr.it >= next_global:
                tr.fit(list(range(t + 1)), cfg.global_iters, "global", cfg.refine_poses)
                while next_global <= tr.it:
                    next_global += cfg.global_every
    tr.fit(list(range(n)), cfg.final_iters, "final", cfg.refine_poses)
    traj = Trajectory([tr.poses[i] for i in range(n)], list(data.frame_ids))
    return TrainResult(tr.cloud, tr.net, traj, tr.log, failures, tr.it)


def save_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(result.cloud, out / "cloud.ply")
    save_blurnet(result.net, out / "blurnet.bin")
    result.trajectory.save(out / "traj.jsonl")
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.log)
    atomic_write_bytes(out / "metrics.jsonl", lines.encode())
