"""Differentiable Gaussian splatting on the CPU.

Forward: project Gaussians (numpy), bin them into screen tiles in global depth
order, then alpha-composite front to back per pixel (numba). Backward replays the
compositing back to front per pixel and accumulates per-Gaussian screen-space
gradients into a fixed number of chunk buffers which are summed in chunk order,
so results do not depend on the thread count. The per-Gaussian chain rule back
to 3-D parameters and the camera pose is vectorized numpy.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .scene import (
    DEPTH_SENTINEL,
    CameraIntrinsics,
    CameraPose,
    GaussianCloud,
    quat_normalize,
    quat_rotmat_vjp,
    quat_to_rotmat,
    sh_basis,
    sh_basis_jacobian,
    sigmoid,
)

N_CHUNKS = 8


@dataclass(frozen=True)
class RenderOptions:
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    t_min: float = 1e-4
    early_exit: bool = True
    near: float = 0.01
    lowpass: float = 0.3
    tile: int = 8


DEFAULT_OPTIONS = RenderOptions()


@dataclass(frozen=True)
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_peak: float


@dataclass
class Projection:
    """Screen-space Gaussians plus the intermediates the backward pass needs."""

    visible: np.ndarray  # (N,) bool
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3): a, b, c of the inverse covariance
    depth: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)
    alpha_peak: np.ndarray  # (N,)
    bbox: np.ndarray  # (N, 4) int: x0, x1, y0, y1 inclusive; x0 > x1 means empty
    # intermediates
    p_cam: np.ndarray
    J: np.ndarray
    V: np.ndarray
    Rg: np.ndarray
    scales: np.ndarray
    dirs: np.ndarray
    dir_norm: np.ndarray
    basis: np.ndarray
    color_mask: np.ndarray
    Rw: np.ndarray
    cam_center: np.ndarray

    def __len__(self) -> int:
        return len(self.visible)

    def __getitem__(self, i: int) -> ProjectedGaussian:
        return ProjectedGaussian(self.mean2d[i].copy(), self.cov2d[i].copy(), float(self.depth[i]),
                                 self.color[i].copy(), float(self.alpha_peak[i]))


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), premultiplied by coverage; sentinel where nothing was hit
    accum_alpha: np.ndarray  # (H, W)
    # replay state for the backward pass
    projection: Projection | None = field(default=None, repr=False)
    final_T: np.ndarray | None = field(default=None, repr=False)
    n_contrib: np.ndarray | None = field(default=None, repr=False)
    tile_ranges: np.ndarray | None = field(default=None, repr=False)
    tile_ids: np.ndarray | None = field(default=None, repr=False)
    raw_depth: np.ndarray | None = field(default=None, repr=False)


@dataclass
class RenderGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    pose_rotation: np.ndarray  # (3,) tangent, left perturbation R <- exp(w^) R
    pose_translation: np.ndarray  # (3,)
    mean2d: np.ndarray  # (N, 2) screen-space gradient, used for densification stats

    @classmethod
    def zeros(cls, n: int, k: int) -> RenderGradients:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, k, 3)), np.zeros(3), np.zeros(3), np.zeros((n, 2)))

    def __iadd__(self, other: RenderGradients) -> RenderGradients:
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh",
                     "pose_rotation", "pose_translation", "mean2d"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def scaled(self, s: float) -> RenderGradients:
        return RenderGradients(self.positions * s, self.rotations * s, self.log_scales * s,
                               self.opacity_logits * s, self.sh * s, self.pose_rotation * s,
                               self.pose_translation * s, self.mean2d * s)


# ---------------------------------------------------------------------------
# projection


def project(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
            opts: RenderOptions = DEFAULT_OPTIONS) -> Projection:
    n = len(cloud)
    Rw = pose.R
    t = pose.translation
    p_cam = cloud.positions @ Rw.T + t
    z = p_cam[:, 2]
    visible = z > opts.near
    zs = np.where(visible, z, 1.0)
    x, y = p_cam[:, 0], p_cam[:, 1]

    mean2d = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * y / zs**2

    q = quat_normalize(cloud.rotations)
    Rg = quat_to_rotmat(q)
    scales = np.exp(cloud.log_scales)
    Mg = Rg * scales[:, None, :]
    cov3 = Mg @ np.swapaxes(Mg, 1, 2)
    V = Rw @ cov3 @ Rw.T
    cov2d = J @ V @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += opts.lowpass
    cov2d[:, 1, 1] += opts.lowpass
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    det = np.where(visible, det, 1.0)
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)

    cam_center = -Rw.T @ t
    v = cloud.positions - cam_center
    dir_norm = np.linalg.norm(v, axis=1)
    dir_norm = np.where(dir_norm > 0, dir_norm, 1.0)
    dirs = v / dir_norm[:, None]
    basis = sh_basis(dirs, cloud.sh_degree)
    raw = 0.5 + np.einsum("nk,nkc->nc", basis, cloud.sh)
    color = np.clip(raw, 0.0, 1.0)
    color_mask = (raw > 0.0) & (raw < 1.0)

    alpha_peak = sigmoid(cloud.opacity_logits)

    bbox = np.zeros((n, 4), dtype=np.int64)
    bbox[:, 0] = 1  # empty by default
    w, h = intr.width, intr.height
    if opts.alpha_min > 0:
        ratio = alpha_peak / opts.alpha_min
        live = visible & (ratio > 1.0)
        d2 = 2.0 * np.log(np.where(live, ratio, 1.0))
        rx = np.sqrt(d2 * cov2d[:, 0, 0])
        ry = np.sqrt(d2 * cov2d[:, 1, 1])
        with np.errstate(invalid="ignore"):
            x0 = np.floor(mean2d[:, 0] - rx)
            x1 = np.ceil(mean2d[:, 0] + rx)
            y0 = np.floor(mean2d[:, 1] - ry)
            y1 = np.ceil(mean2d[:, 1] + ry)
        x0 = np.clip(np.nan_to_num(x0, nan=w), 0, w)
        x1 = np.clip(np.nan_to_num(x1, nan=-1), -1, w - 1)
        y0 = np.clip(np.nan_to_num(y0, nan=h), 0, h)
        y1 = np.clip(np.nan_to_num(y1, nan=-1), -1, h - 1)
        bbox[live] = np.stack([x0, x1, y0, y1], axis=1)[live].astype(np.int64)
    else:
        bbox[visible] = (0, w - 1, 0, h - 1)

    return Projection(
        visible=visible, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z.copy(), color=color,
        alpha_peak=alpha_peak, bbox=bbox, p_cam=p_cam, J=J, V=V, Rg=Rg, scales=scales, dirs=dirs,
        dir_norm=dir_norm, basis=basis, color_mask=color_mask, Rw=Rw, cam_center=cam_center,
    )


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _bin_tiles(order, bbox, tile, tiles_x, tiles_y):
    n_tiles = tiles_x * tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in order:
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * tiles_x + tx + 1] += 1
    for i in range(n_tiles):
        counts[i + 1] += counts[i]
    ids = np.empty(counts[n_tiles], dtype=np.int64)
    fill = counts[:n_tiles].copy()
    for g in order:
        x0, x1, y0, y1 = bbox[g, 0], bbox[g, 1], bbox[g, 2], bbox[g, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                t = ty * tiles_x + tx
                ids[fill[t]] = g
                fill[t] += 1
    ranges = np.empty((n_tiles, 2), dtype=np.int64)
    for i in range(n_tiles):
        ranges[i, 0] = counts[i]
        ranges[i, 1] = counts[i + 1]
    return ranges, ids


@numba.njit(cache=True, parallel=True)
def _forward_kernel(ranges, ids, mean2d, conic, color, opac, power_min, depth, bg, width, height,
                    tile, tiles_x, alpha_max, t_min, early_exit):
    out_c = np.empty((height, width, 3))
    out_d = np.zeros((height, width))
    out_T = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    n_tiles = ranges.shape[0]
    for t in numba.prange(n_tiles):
        tx = t % tiles_x
        ty = t // tiles_x
        start, end = ranges[t, 0], ranges[t, 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                T = 1.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                dd = 0.0
                last = 0
                for j in range(start, end):
                    g = ids[j]
                    dx = px - mean2d[g, 0]
                    dy = py - mean2d[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                    if power < power_min[g]:
                        continue
                    alpha = opac[g] * np.exp(power)
                    if alpha > alpha_max:
                        alpha = alpha_max
                    if alpha <= 0.0:
                        continue
                    test_T = T * (1.0 - alpha)
                    if early_exit and test_T < t_min:
                        break
                    w = alpha * T
                    c0 += color[g, 0] * w
                    c1 += color[g, 1] * w
                    c2 += color[g, 2] * w
                    dd += depth[g] * w
                    T = test_T
                    last = j - start + 1
                out_c[py, px, 0] = c0 + T * bg[0]
                out_c[py, px, 1] = c1 + T * bg[1]
                out_c[py, px, 2] = c2 + T * bg[2]
                out_d[py, px] = dd
                out_T[py, px] = T
                n_contrib[py, px] = last
    return out_c, out_d, out_T, n_contrib


@numba.njit(cache=True, parallel=True)
def _backward_kernel(ranges, ids, mean2d, conic, color, opac, power_min, depth, bg, width, height,
                     tile, tiles_x, alpha_max, final_T, n_contrib, d_color, d_depth, d_alpha,
                     n_gauss, n_chunks):
    # per-Gaussian screen-space grads: mx, my, conic a, b, c, opacity, r, g, b, depth
    buf = np.zeros((n_chunks, n_gauss, 10))
    n_tiles = ranges.shape[0]
    for chunk in numba.prange(n_chunks):
        for t in range(chunk, n_tiles, n_chunks):
            tx = t % tiles_x
            ty = t // tiles_x
            start = ranges[t, 0]
            for py in range(ty * tile, min((ty + 1) * tile, height)):
                for px in range(tx * tile, min((tx + 1) * tile, width)):
                    T_final = final_T[py, px]
                    T = T_final
                    dC0 = d_color[py, px, 0]
                    dC1 = d_color[py, px, 1]
                    dC2 = d_color[py, px, 2]
                    dD = d_depth[py, px]
                    dA = d_alpha[py, px]
                    acc0 = T_final * bg[0]
                    acc1 = T_final * bg[1]
                    acc2 = T_final * bg[2]
                    accd = 0.0
                    for j in range(start + n_contrib[py, px] - 1, start - 1, -1):
                        g = ids[j]
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                        if power < power_min[g]:
                            continue
                        G = np.exp(power)
                        raw_alpha = opac[g] * G
                        alpha = raw_alpha
                        capped = False
                        if alpha > alpha_max:
                            alpha = alpha_max
                            capped = True
                        if alpha <= 0.0:
                            continue
                        one_m = 1.0 - alpha
                        T_i = T / one_m
                        w = alpha * T_i
                        d_a = (dC0 * (color[g, 0] * T_i - acc0 / one_m)
                               + dC1 * (color[g, 1] * T_i - acc1 / one_m)
                               + dC2 * (color[g, 2] * T_i - acc2 / one_m)
                               + dD * (depth[g] * T_i - accd / one_m)
                               + dA * T_final / one_m)
                        buf[chunk, g, 6] += dC0 * w
                        buf[chunk, g, 7] += dC1 * w
                        buf[chunk, g, 8] += dC2 * w
                        buf[chunk, g, 9] += dD * w
                        acc0 += color[g, 0] * w
                        acc1 += color[g, 1] * w
                        acc2 += color[g, 2] * w
                        accd += depth[g] * w
                        T = T_i
                        if capped:
                            continue
                        buf[chunk, g, 5] += d_a * G
                        dp = d_a * raw_alpha
                        buf[chunk, g, 0] += dp * (conic[g, 0] * dx + conic[g, 1] * dy)
                        buf[chunk, g, 1] += dp * (conic[g, 1] * dx + conic[g, 2] * dy)
                        buf[chunk, g, 2] += -0.5 * dx * dx * dp
                        buf[chunk, g, 3] += -dx * dy * dp
                        buf[chunk, g, 4] += -0.5 * dy * dy * dp
    out = np.zeros((n_gauss, 10))
    for chunk in range(n_chunks):
        out += buf[chunk]
    return out


# ---------------------------------------------------------------------------
# public API


def _power_min(proj: Projection, opts: RenderOptions) -> np.ndarray:
    # alpha < alpha_min  <=>  power < log(alpha_min / peak); checked before exp()
    if opts.alpha_min <= 0:
        return np.full(len(proj.alpha_peak), -np.inf)
    with np.errstate(divide="ignore"):
        return np.log(opts.alpha_min / proj.alpha_peak)


def _tiles(intr: CameraIntrinsics, tile: int) -> tuple[int, int]:
    return (intr.width + tile - 1) // tile, (intr.height + tile - 1) // tile


def render(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
           opts: RenderOptions = DEFAULT_OPTIONS) -> RenderOutput:
    """Render color, coverage-weighted depth and accumulated alpha.

    Gaussians are composited in one global depth order (ties by index).
    """
    if len(cloud) == 0:
        raise ValueError("cannot render an empty cloud")
    proj = project(cloud, pose, intr, opts)
    vis_idx = np.flatnonzero(proj.visible)
    order = vis_idx[np.argsort(proj.depth[vis_idx], kind="stable")]
    tiles_x, tiles_y = _tiles(intr, opts.tile)
    ranges, ids = _bin_tiles(order, proj.bbox, opts.tile, tiles_x, tiles_y)
    bg = np.asarray(opts.background, dtype=np.float64)
    color, depth, final_T, n_contrib = _forward_kernel(
        ranges, ids, proj.mean2d, proj.conic, proj.color, proj.alpha_peak, _power_min(proj, opts),
        proj.depth, bg, intr.width, intr.height, opts.tile, tiles_x, opts.alpha_max, opts.t_min,
        opts.early_exit,
    )
    accum = 1.0 - final_T
    depth_out = np.where(n_contrib > 0, depth, DEPTH_SENTINEL)
    return RenderOutput(color=color, depth=depth_out, accum_alpha=accum, projection=proj,
                        final_T=final_T, n_contrib=n_contrib, tile_ranges=ranges, tile_ids=ids,
                        raw_depth=depth)


def render_backward(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
                    d_color: np.ndarray | None = None, d_depth: np.ndarray | None = None,
                    d_alpha: np.ndarray | None = None, opts: RenderOptions = DEFAULT_OPTIONS,
                    forward: RenderOutput | None = None) -> RenderGradients:
    """Gradients of a scalar loss given its gradients w.r.t. the render outputs.

    ``d_depth`` is taken w.r.t. the coverage-weighted depth (sentinel pixels carry
    no gradient). If ``forward`` is omitted the forward pass is replayed.
    """
    h, w = intr.height, intr.width
    d_color = np.zeros((h, w, 3)) if d_color is None else np.asarray(d_color, dtype=np.float64)
    d_depth = np.zeros((h, w)) if d_depth is None else np.asarray(d_depth, dtype=np.float64)
    d_alpha = np.zeros((h, w)) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    for name, arr in (("color", d_color), ("depth", d_depth), ("alpha", d_alpha)):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite upstream gradient for {name}")
    if forward is None or forward.projection is None:
        forward = render(cloud, pose, intr, opts)
    proj = forward.projection
    n = len(cloud)
    k = cloud.sh.shape[1]
    tiles_x, _ = _tiles(intr, opts.tile)
    bg = np.asarray(opts.background, dtype=np.float64)
    d_depth = np.where(forward.n_contrib > 0, d_depth, 0.0)
    screen = _backward_kernel(
        forward.tile_ranges, forward.tile_ids, proj.mean2d, proj.conic, proj.color, proj.alpha_peak,
        _power_min(proj, opts), proj.depth, bg, w, h, opts.tile, tiles_x, opts.alpha_max, forward.final_T,
        forward.n_contrib, np.ascontiguousarray(d_color), np.ascontiguousarray(d_depth),
        np.ascontiguousarray(d_alpha), n, N_CHUNKS,
    )
    grads = RenderGradients.zeros(n, k)
    vis = proj.visible
    if not np.any(vis):
        return grads
    return _chain_to_params(cloud, pose, intr, proj, screen, grads)


def _chain_to_params(cloud, pose, intr, proj: Projection, screen: np.ndarray,
                     grads: RenderGradients) -> RenderGradients:
    vis = proj.visible
    idx = np.flatnonzero(vis)
    s = screen[idx]
    d_mean = s[:, 0:2]
    grads.mean2d[idx] = d_mean
    # conic -> 2-D covariance: dL/dSigma = -Q G Q with G the full-matrix gradient wrt Q
    Q = np.empty((len(idx), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (proj.conic[idx, 0], proj.conic[idx, 1],
                                                      proj.conic[idx, 1], proj.conic[idx, 2])
    G = np.empty_like(Q)
    G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = s[:, 2], 0.5 * s[:, 3], 0.5 * s[:, 3], s[:, 4]
    F = -Q @ G @ Q
    J = proj.J[idx]
    V = proj.V[idx]
    dV = np.swapaxes(J, 1, 2) @ F @ J
    dJ = 2.0 * F @ J @ V

    Rw = proj.Rw
    Rg = proj.Rg[idx]
    scales = proj.scales[idx]
    cov3 = (Rg * scales[:, None, :] ** 2) @ np.swapaxes(Rg, 1, 2)
    d_cov3 = Rw.T @ dV @ Rw
    dRw = 2.0 * np.einsum("nij,jk,nkl->il", dV, Rw, cov3)
    Mg = Rg * scales[:, None, :]
    dMg = 2.0 * d_cov3 @ Mg
    dRg = dMg * scales[:, None, :]
    d_scale = np.einsum("nik,nik->nk", Rg, dMg)
    grads.log_scales[idx] = d_scale * scales
    grads.rotations[idx] = quat_rotmat_vjp(cloud.rotations[idx], dRg)

    pc = proj.p_cam[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    fx, fy = intr.fx, intr.fy
    dp = np.zeros((len(idx), 3))
    dp[:, 0] = dJ[:, 0, 2] * (-fx / z**2) + d_mean[:, 0] * fx / z
    dp[:, 1] = dJ[:, 1, 2] * (-fy / z**2) + d_mean[:, 1] * fy / z
    dp[:, 2] = (dJ[:, 0, 0] * (-fx / z**2) + dJ[:, 0, 2] * (2 * fx * x / z**3)
                + dJ[:, 1, 1] * (-fy / z**2) + dJ[:, 1, 2] * (2 * fy * y / z**3)
                - d_mean[:, 0] * fx * x / z**2 - d_mean[:, 1] * fy * y / z**2
                + s[:, 9])
    mu = cloud.positions[idx]
    d_mu = dp @ Rw
    dt = dp.sum(axis=0)
    dRw += dp.T @ mu

    # view-dependent color
    d_col = s[:, 6:9] * proj.color_mask[idx]
    basis = proj.basis[idx]
    grads.sh[idx] = basis[:, :, None] * d_col[:, None, :]
    if cloud.sh_degree > 0:
        dirs = proj.dirs[idx]
        jac = sh_basis_jacobian(dirs, cloud.sh_degree)  # (n, K, 3)
        d_dir = np.einsum("nc,nkc,nkd->nd", d_col, cloud.sh[idx], jac)
        d_v = (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / proj.dir_norm[idx, None]
        d_mu += d_v
        d_center = -d_v.sum(axis=0)
        t = pose.translation
        dt += -Rw @ d_center
        dRw += -np.outer(t, d_center)
    grads.positions[idx] = d_mu

    op = proj.alpha_peak[idx]
    grads.opacity_logits[idx] = s[:, 5] * op * (1.0 - op)

    B = dRw @ Rw.T
    grads.pose_rotation[:] = (B[2, 1] - B[1, 2], B[0, 2] - B[2, 0], B[1, 0] - B[0, 1])
    grads.pose_translation[:] = dt
    return grads
