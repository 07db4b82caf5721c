"""Central finite-difference checks of the analytic render and blur-model gradients.

Checks run with ``alpha_min=0`` and early exit off so the loss is smooth in every
parameter; opacities stay below the alpha clamp and colors off the [0, 1] clamp.
The scalar objective is a random linear functional of color and depth.
"""
from dataclasses import dataclass

import numpy as np

from blursplat.blurnet import BlurNet, BlurNetConfig, render_blurred, render_blurred_backward, transform_sets
from blursplat.rasterizer import RenderOptions, render, render_backward
from blursplat.scene import CameraIntrinsics, CameraPose, GaussianCloud, logit, quat_normalize

SMOOTH = RenderOptions(alpha_min=0.0, early_exit=False)
H = 1e-4
CLOUD_FIELDS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")


@dataclass
class FdScene:
    cloud: GaussianCloud
    pose: CameraPose
    intr: CameraIntrinsics
    w_color: np.ndarray
    w_depth: np.ndarray


def random_scene(rng: np.random.Generator, max_gaussians: int = 20, size: int = 16) -> FdScene:
    n = int(rng.integers(3, max_gaussians + 1))
    z = rng.uniform(3.0, 5.0, n)
    # well separated depths keep the sort order fixed under perturbation
    z = np.sort(z) + np.arange(n) * 0.05
    pos = np.column_stack([rng.uniform(-0.8, 0.8, (n, 2)) * z[:, None] / 4, z])
    cloud = GaussianCloud(
        positions=pos,
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=np.log(rng.uniform(0.1, 0.4, (n, 3))),
        opacity_logits=logit(rng.uniform(0.1, 0.9, n)),
        sh=np.concatenate([rng.normal(0, 0.3, (n, 1, 3)), rng.normal(0, 0.05, (n, 3, 3))], axis=1),
    )
    intr = CameraIntrinsics(float(size), float(size), size / 2, size / 2, size, size)
    w = rng.normal(size=3) * 0.05
    pose = CameraPose.from_rt(_exp(w), rng.normal(size=3) * 0.1)
    return FdScene(cloud, pose, intr, rng.normal(size=(size, size, 3)), rng.normal(size=(size, size)))


def _exp(w):
    from blursplat.scene import so3_exp

    return so3_exp(w)


def relative_errors(analytic: np.ndarray, fd: np.ndarray, scale: float) -> np.ndarray:
    """|a - f| / max(|a|, |f|, 1e-6 * scale): entries whose true value is ~0 are judged absolutely."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    f = np.asarray(fd, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-6 * scale)
    return np.abs(a - f) / denom


def _objective(s: FdScene, color, depth) -> float:
    return float((color * s.w_color).sum() + (depth * s.w_depth).sum())


def rasterizer_errors(s: FdScene) -> np.ndarray:
    def loss(cloud, pose):
        o = render(cloud, pose, s.intr, SMOOTH)
        return _objective(s, o.color, o.raw_depth)

    g = render_backward(s.cloud, s.pose, s.intr, s.w_color, s.w_depth, opts=SMOOTH)
    analytic, fd = [], []
    for name in CLOUD_FIELDS:
        arr = getattr(s.cloud, name)
        for idx in np.ndindex(arr.shape):
            cp, cm = s.cloud.copy(), s.cloud.copy()
            getattr(cp, name)[idx] += H
            getattr(cm, name)[idx] -= H
            fd.append((loss(cp, s.pose) - loss(cm, s.pose)) / (2 * H))
            analytic.append(getattr(g, name)[idx])
    for k in range(3):
        e = np.zeros(3)
        e[k] = H
        fd.append((loss(s.cloud, s.pose.perturbed(e, 0 * e)) - loss(s.cloud, s.pose.perturbed(-e, 0 * e))) / (2 * H))
        analytic.append(g.pose_rotation[k])
        fd.append((loss(s.cloud, s.pose.perturbed(0 * e, e)) - loss(s.cloud, s.pose.perturbed(0 * e, -e))) / (2 * H))
        analytic.append(g.pose_translation[k])
    fd = np.array(fd)
    return relative_errors(analytic, fd, float(np.max(np.abs(fd))))


def blurnet_errors(s: FdScene, rng: np.random.Generator, n_weights: int = 24, n_offsets: int = 24) -> np.ndarray:
    """Sampled MLP weights, both global factors and sampled per-set offsets."""
    net = BlurNet.create(BlurNetConfig(hidden=16, trunk_layers=2, lambda_p=0.1, lambda_q=0.5),
                         seed=int(rng.integers(1 << 30)))
    for k in net.weight_names():
        net.params[k] = net.params[k] + rng.normal(0, 0.1, net.params[k].shape)
    net.params["rho_r"][:] = rng.uniform(0.8, 1.2)
    net.params["rho_s"][:] = rng.uniform(0.8, 1.2)
    X = net.features(s.cloud, s.pose.center)

    def loss_net(n):
        o = render_blurred(s.cloud, n, s.pose, s.intr, SMOOTH, features=X)
        return _objective(s, o.color, o.raw_depth)

    def loss_offsets(off):
        sets = transform_sets(s.cloud, off, net)
        outs = [render(c, s.pose, s.intr, SMOOTH) for c in sets]
        m = len(outs)
        return _objective(s, sum(o.color for o in outs) / m, sum(o.raw_depth for o in outs) / m)

    fwd = render_blurred(s.cloud, net, s.pose, s.intr, SMOOTH, features=X)
    g = render_blurred_backward(s.cloud, net, s.pose, s.intr, fwd, s.w_color, s.w_depth, SMOOTH)
    analytic, fd = [], []
    entries = [(k, idx) for k in net.weight_names() for idx in np.ndindex(net.params[k].shape)]
    pick = rng.choice(len(entries), size=min(n_weights, len(entries)), replace=False)
    for j in list(pick) + ["rho_r", "rho_s"]:
        k, idx = (j, (0,)) if isinstance(j, str) else entries[j]
        n1, n2 = net.copy(), net.copy()
        n1.params[k][idx] += H
        n2.params[k][idx] -= H
        fd.append((loss_net(n1) - loss_net(n2)) / (2 * H))
        analytic.append(g.net[k][idx])
    off = fwd.offsets
    flat = rng.choice(off.size, size=min(n_offsets, off.size), replace=False)
    for f in flat:
        idx = np.unravel_index(f, off.shape)
        o1, o2 = off.copy(), off.copy()
        o1[idx] += H
        o2[idx] -= H
        fd.append((loss_offsets(o1) - loss_offsets(o2)) / (2 * H))
        analytic.append(g.offsets[idx])
    fd = np.array(fd)
    return relative_errors(analytic, fd, float(np.max(np.abs(fd))))
