"""Camera tracking against a frozen cloud, trajectory alignment and pose metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .blurnet import BlurNet, render_blurred, render_blurred_backward
from .losses import image_loss_and_grad
from .optim import Adam
from .rasterizer import DEFAULT_OPTIONS, RenderOptions, render, render_backward
from .scene import CameraIntrinsics, CameraPose, GaussianCloud, atomic_write_bytes, rotation_angle


class PoseDivergenceError(RuntimeError):
    def __init__(self, message: str, last_pose: CameraPose):
        super().__init__(message)
        self.last_pose = last_pose


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class Trajectory:
    poses: list[CameraPose]
    frame_ids: list[int]

    def __post_init__(self):
        if len(self.poses) != len(self.frame_ids):
            raise ValueError("poses and frame_ids differ in length")
        if not self.poses:
            raise ValueError("trajectory must be non-empty")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError("frame_ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def centers(self) -> np.ndarray:
        return np.array([p.center for p in self.poses])

    def arc_length(self) -> float:
        c = self.centers()
        return float(np.linalg.norm(np.diff(c, axis=0), axis=1).sum())

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"frame_id": int(i), **p.to_dict()}) + "\n"
                       for i, p in zip(self.frame_ids, self.poses))

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_jsonl().encode())

    @classmethod
    def load(cls, path) -> Trajectory:
        poses, ids = [], []
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    d = json.loads(line)
                    ids.append(int(d["frame_id"]))
                    poses.append(CameraPose.from_dict(d))
        return cls(poses, ids)


@dataclass
class PoseOptions:
    iters: int = 300
    lr_rotation: float = 1e-3
    lr_translation: float = 1e-3
    tol: float = 1e-6
    patience: int = 20
    lambda_image_mix: float = 0.2
    # coarse-to-fine: image smoothing sigmas (px) fitted before full resolution,
    # each for at most ``coarse_iters`` iterations taken from the same budget
    coarse_sigmas: tuple = (2.0, 1.0)
    coarse_iters: int = 50
    render: RenderOptions = field(default_factory=lambda: DEFAULT_OPTIONS)


@dataclass
class PoseOptimResult:
    pose: CameraPose
    final_loss: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)


def smooth(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with zero padding (self-adjoint, so it also maps gradients)."""
    if sigma <= 0:
        return img
    r = max(1, int(np.ceil(3 * sigma)))
    x = np.arange(-r, r + 1)
    k = np.exp(-(x**2) / (2 * sigma**2))
    k /= k.sum()
    out = correlate1d(img, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


def _loss_and_pose_grad(cloud, target, pose, intr, opts: PoseOptions, net: BlurNet | None,
                        sigma: float = 0.0):
    if net is None:
        out = render(cloud, pose, intr, opts.render)
    else:
        out = render_blurred(cloud, net, pose, intr, opts.render)
    loss, g = image_loss_and_grad(smooth(out.color, sigma), target, opts.lambda_image_mix)
    g = smooth(g, sigma)
    if net is None:
        grads = render_backward(cloud, pose, intr, g, opts=opts.render, forward=out)
        return loss, grads.pose_rotation, grads.pose_translation
    grads = render_blurred_backward(cloud, net, pose, intr, out, g, opts=opts.render)
    return loss, grads.cloud.pose_rotation, grads.cloud.pose_translation


def _descend(frozen, target, pose, intr, opts, net, sigma, budget):
    """Adam from ``pose`` on one smoothing level; returns (best pose, best loss, iterations, stalled, history)."""
    tgt = smooth(target, sigma)
    loss, g_rot, g_tr = _loss_and_pose_grad(frozen, tgt, pose, intr, opts, net, sigma)
    if not np.isfinite(loss):
        raise PoseDivergenceError("initial loss is not finite", pose)
    history = [loss]
    best_pose, best_loss = pose, loss
    adam = Adam({"rot": opts.lr_rotation, "trans": opts.lr_translation})
    stall = 0
    it = 0
    while it < budget:
        pose = pose.perturbed(adam.delta("rot", g_rot), adam.delta("trans", g_tr))
        it += 1
        loss, g_rot, g_tr = _loss_and_pose_grad(frozen, tgt, pose, intr, opts, net, sigma)
        if not np.isfinite(loss):
            raise PoseDivergenceError(f"non-finite loss at iteration {it}", best_pose)
        history.append(loss)
        stall = 0 if loss < best_loss - opts.tol else stall + 1
        if loss < best_loss:
            best_pose, best_loss = pose, loss
        if stall >= opts.patience:
            return best_pose, best_loss, it, True, history
    return best_pose, best_loss, it, False, history


def estimate_pose(frozen: GaussianCloud, target: np.ndarray, init: CameraPose, intr: CameraIntrinsics,
                  opts: PoseOptions = PoseOptions(), net: BlurNet | None = None) -> PoseOptimResult:
    """Fit the world-to-camera pose of ``target`` with the Gaussians held fixed.

    Adam runs on a left-multiplied rotation increment and the translation, first
    on smoothed images (widening the basin of attraction) and then at full
    resolution. The best full-resolution pose seen is returned, and the initial
    pose is kept if nothing beats it, so ``final_loss`` never exceeds the initial loss.
    With ``net`` the blurred (M-set) render is matched instead of the sharp one.
    """
    if opts.iters <= 0:
        loss = _loss_and_pose_grad(frozen, target, init, intr, opts, net)[0]
        return PoseOptimResult(init, float(loss), 0, False, [loss])
    pose = init
    used = 0
    history: list[float] = []
    for sigma in opts.coarse_sigmas:
        budget = min(opts.coarse_iters, opts.iters - used - 1)
        if budget <= 0:
            break
        pose, _, it, _, _ = _descend(frozen, target, pose, intr, opts, net, sigma, budget)
        used += it
    best_pose, best_loss, it, converged, history = _descend(
        frozen, target, pose, intr, opts, net, 0.0, opts.iters - used)
    used += it
    if pose is not init:
        # the coarse levels may have moved away from a better start
        init_loss = _loss_and_pose_grad(frozen, target, init, intr, opts, net)[0]
        if init_loss <= best_loss:
            best_pose, best_loss = init, init_loss
    return PoseOptimResult(best_pose, float(best_loss), used, converged, history)


def chain_relative(traj: Trajectory, rel: CameraPose, frame_id: int) -> Trajectory:
    """Append ``rel ∘ last`` (world-to-camera maps: the new camera sees ``rel`` applied after ``last``)."""
    if frame_id <= traj.frame_ids[-1]:
        raise ValueError(f"frame_id {frame_id} must exceed {traj.frame_ids[-1]}")
    return Trajectory(traj.poses + [rel.compose(traj.poses[-1])], traj.frame_ids + [frame_id])


@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply_points(self, x: np.ndarray) -> np.ndarray:
        return self.scale * x @ self.rotation.T + self.translation


def umeyama(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares similarity with dst ≈ s R src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs**2, axis=1))
    s = float(np.trace(np.diag(D) @ S) / var_s)
    return Similarity(s, R, mu_d - s * R @ mu_s)


def apply_similarity(traj: Trajectory, sim: Similarity) -> Trajectory:
    poses = []
    for p in traj.poses:
        c = sim.apply_points(p.center[None])[0]
        Rw = p.R @ sim.rotation.T
        poses.append(CameraPose.from_rt(Rw, -Rw @ c))
    return Trajectory(poses, list(traj.frame_ids))


def procrustes_align(est: Trajectory, gt: Trajectory) -> tuple[Trajectory, Similarity]:
    if len(est) != len(gt):
        raise ValueError("trajectories differ in length")
    if len(est) < 3:
        raise DegenerateAlignmentError("need at least 3 poses")
    cg = gt.centers()
    ce = est.centers()
    for c, name in ((cg, "gt"), (ce, "est")):
        sv = np.linalg.svd(c - c.mean(axis=0), compute_uv=False)
        if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
            raise DegenerateAlignmentError(f"{name} camera centers are collinear or coincident")
    sim = umeyama(ce, cg)
    return apply_similarity(est, sim), sim


def _c2w(p: CameraPose) -> np.ndarray:
    return p.inverse().matrix


def trajectory_metrics(est_aligned: Trajectory, gt: Trajectory) -> dict[str, float]:
    """ATE (center RMSE) and consecutive-frame RPE (translation RMSE, rotation RMSE in degrees)."""
    if len(est_aligned) != len(gt):
        raise ValueError("trajectories differ in length")
    ce, cg = est_aligned.centers(), gt.centers()
    ate = float(np.sqrt(np.mean(np.sum((ce - cg) ** 2, axis=1))))
    te, re = [], []
    for i in range(len(gt) - 1):
        rel_g = np.linalg.inv(_c2w(gt.poses[i])) @ _c2w(gt.poses[i + 1])
        rel_e = np.linalg.inv(_c2w(est_aligned.poses[i])) @ _c2w(est_aligned.poses[i + 1])
        E = np.linalg.inv(rel_g) @ rel_e
        te.append(np.linalg.norm(E[:3, 3]))
        re.append(np.degrees(rotation_angle(E[:3, :3])))
    rpe_t = float(np.sqrt(np.mean(np.square(te)))) if te else 0.0
    rpe_r = float(np.sqrt(np.mean(np.square(re)))) if re else 0.0
    return {"ate": ate, "rpe_t": rpe_t, "rpe_r": rpe_r}
