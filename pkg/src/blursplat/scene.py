"""Core scene types: Gaussians, cameras, images, depth maps and their file formats.

Conventions used everywhere in the package:

* quaternions are ``(w, x, y, z)``;
* a :class:`CameraPose` maps world to camera, ``x_cam = R(q) @ x_world + t``;
* the camera looks down ``+z`` with ``+x`` right and ``+y`` down;
* pixel ``(u, v)`` has its center at the continuous coordinate ``(u, v)``;
* images are float64 arrays of shape ``(H, W, C)`` with values in ``[0, 1]``;
  depth maps are ``(H, W)`` arrays where :data:`DEPTH_SENTINEL` marks "no surface".
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

DEPTH_SENTINEL = -1.0


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# rotations


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (already normalized) quaternions of shape (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`quat_to_rotmat` for a single matrix; returns w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotmat_vjp(q_raw: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Pull back dL/dR (..., 3, 3) to the raw (unnormalized) quaternion (..., 4)."""
    norm = np.linalg.norm(q_raw, axis=-1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = dR
    dw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0] - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    dx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1] - w * g[..., 1, 2]
              + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    dy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0] + z * g[..., 1, 2]
              - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    dz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0] - 2 * z * g[..., 1, 1]
              + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    dq = np.stack([dw, dx, dy, dz], axis=-1)
    # through q = q_raw / |q_raw|
    return (dq - q * np.sum(dq * q, axis=-1, keepdims=True)) / norm


def hat(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(theta) / theta * K + (1 - np.cos(theta)) / theta**2 * K @ K


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(c))


def build_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Covariance ``R S S^T R^T`` from unit quaternion(s) and linear scale(s).

    Accepts a single Gaussian (shapes (4,), (3,)) or a batch ((N, 4), (N, 3)).
    """
    R = quat_to_rotmat(quat_normalize(rotation))
    M = R * np.asarray(scale, dtype=np.float64)[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# spherical harmonics


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values (..., (degree+1)^2) at unit directions (..., 3)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree must be in [0, 3], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if degree >= 3:
        out += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3 * yy),
        ]
    return np.stack(out, axis=-1)


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d (x, y, z) treating the components as free variables: (..., K, 3)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    zero = np.zeros_like(x)
    rows = [(zero, zero, zero)]
    if degree >= 1:
        c = np.full_like(x, SH_C1)
        rows += [(zero, -c, zero), (zero, zero, c), (-c, zero, zero)]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        rows += [
            (SH_C2[0] * y, SH_C2[0] * x, zero),
            (zero, SH_C2[1] * z, SH_C2[1] * y),
            (-2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z),
            (SH_C2[3] * z, zero, SH_C2[3] * x),
            (2 * SH_C2[4] * x, -2 * SH_C2[4] * y, zero),
        ]
    if degree >= 3:
        rows += [
            (SH_C3[0] * 6 * x * y, SH_C3[0] * (3 * xx - 3 * yy), zero),
            (SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y),
            (SH_C3[2] * -2 * x * y, SH_C3[2] * (4 * zz - xx - 3 * yy), SH_C3[2] * 8 * y * z),
            (SH_C3[3] * -6 * x * z, SH_C3[3] * -6 * y * z, SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)),
            (SH_C3[4] * (4 * zz - 3 * xx - yy), SH_C3[4] * -2 * x * y, SH_C3[4] * 8 * x * z),
            (SH_C3[5] * 2 * x * z, SH_C3[5] * -2 * y * z, SH_C3[5] * (xx - yy)),
            (SH_C3[6] * (3 * xx - 3 * yy), SH_C3[6] * -6 * x * y, zero),
        ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def eval_sh(sh: np.ndarray, view_dir: np.ndarray, degree: int) -> np.ndarray:
    """RGB from SH coefficients ``(..., K, 3)`` seen along ``view_dir``, clamped to [0, 1]."""
    sh = np.asarray(sh, dtype=np.float64)
    if sh.shape[-2] != num_sh_coeffs(degree):
        raise ValueError(
            f"expected {num_sh_coeffs(degree)} SH coefficients for degree {degree}, got {sh.shape[-2]}"
        )
    basis = sh_basis(view_dir, degree)
    rgb = 0.5 + np.einsum("...k,...kc->...c", basis, sh)
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_sh0(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


# ---------------------------------------------------------------------------
# Gaussians


@dataclass(frozen=True)
class Gaussian3D:
    position: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray  # (K, 3)


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian set.

    ``log_scales`` and ``opacity_logits`` hold the unconstrained parameters;
    use :attr:`scales` / :attr:`opacities` for the activated values.
    """

    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) wxyz
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, K, 3)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        sh = np.asarray(self.sh, dtype=np.float64)
        self.sh = sh if sh.ndim == 3 and len(sh) == n else sh.reshape(n, -1, 3)
        if self.sh.shape[1] not in (1, 4, 9, 16):
            raise ValueError(f"invalid SH coefficient count {self.sh.shape[1]}")

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            scale=np.exp(self.log_scales[i]),
            opacity=float(sigmoid(self.opacity_logits[i])),
            sh=self.sh[i].copy(),
        )

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def from_gaussians(cls, gaussians: list[Gaussian3D]) -> GaussianCloud:
        if not gaussians:
            raise ValueError("cannot build a cloud from an empty list")
        degrees = {np.asarray(g.sh).reshape(-1, 3).shape[0] for g in gaussians}
        if len(degrees) != 1:
            raise ValueError("all Gaussians must share one SH degree")
        return cls(
            positions=np.array([g.position for g in gaussians]),
            rotations=quat_normalize(np.array([g.rotation for g in gaussians])),
            log_scales=np.log(np.array([g.scale for g in gaussians])),
            opacity_logits=logit(np.array([g.opacity for g in gaussians])),
            sh=np.array([np.asarray(g.sh).reshape(-1, 3) for g in gaussians]),
        )

    @classmethod
    def create(cls, positions, colors=None, scales=0.05, opacities=0.5, sh_degree: int = 1) -> GaussianCloud:
        """Convenience constructor from linear quantities and base colors."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        sh = np.zeros((n, num_sh_coeffs(sh_degree), 3))
        if colors is not None:
            sh[:, 0, :] = rgb_to_sh0(np.broadcast_to(colors, (n, 3)))
        rot = np.zeros((n, 4))
        rot[:, 0] = 1.0
        return cls(
            positions=positions,
            rotations=rot,
            log_scales=np.log(np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))).copy(),
            opacity_logits=logit(np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))).copy(),
            sh=sh,
        )

    def copy(self) -> GaussianCloud:
        return GaussianCloud(
            self.positions.copy(),
            self.rotations.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.sh.copy(),
        )

    def select(self, index) -> GaussianCloud:
        return GaussianCloud(
            self.positions[index],
            self.rotations[index],
            self.log_scales[index],
            self.opacity_logits[index],
            self.sh[index],
        )

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        if other.sh.shape[1] != self.sh.shape[1]:
            raise ValueError("SH degree mismatch")
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh, other.sh]),
        )

    def normalize_rotations(self) -> None:
        self.rotations = quat_normalize(self.rotations)

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.scales)


# ---------------------------------------------------------------------------
# cameras


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width: int, height: int, fov_x_deg: float) -> CameraIntrinsics:
        fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2)
        return cls(fx, fx, width / 2, height / 2, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CameraPose:
    """World-to-camera rigid transform ``x_cam = R(rotation) x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", quat_normalize(q))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> CameraPose:
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> CameraPose:
        T = np.asarray(T, dtype=np.float64)
        return cls(rotmat_to_quat(T[:3, :3]), T[:3, 3].copy())

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> CameraPose:
        return cls(rotmat_to_quat(R), np.asarray(t, dtype=np.float64))

    @classmethod
    def look_at(cls, center, target, up=(0.0, -1.0, 0.0)) -> CameraPose:
        """Camera at ``center`` looking at ``target``; ``up`` is world-up in image terms (-y)."""
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, -np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])  # rows: camera axes in world
        return cls.from_rt(R, -R @ center)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def inverse(self) -> CameraPose:
        R = self.R
        return CameraPose.from_rt(R.T, -R.T @ self.translation)

    def compose(self, other: CameraPose) -> CameraPose:
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        R = self.R @ other.R
        t = self.R @ other.translation + self.translation
        return CameraPose.from_rt(R, t)

    def perturbed(self, omega: np.ndarray, dt: np.ndarray) -> CameraPose:
        """Left-perturbation in camera frame: R <- exp(omega^) R, t <- t + dt."""
        return CameraPose.from_rt(so3_exp(omega) @ self.R, self.translation + np.asarray(dt))

    def to_dict(self) -> dict:
        return {"q": [float(v) for v in self.rotation], "t": [float(v) for v in self.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> CameraPose:
        q = d.get("q", d.get("rotation"))
        t = d.get("t", d.get("translation"))
        return cls(np.array(q, dtype=np.float64), np.array(t, dtype=np.float64))


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# PLY


class PlyError(ValueError):
    pass


class PlyHeaderError(PlyError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PlyMissingFieldError(PlyError):
    def __init__(self, field_name: str):
        super().__init__(f"PLY is missing required vertex property '{field_name}'")
        self.field = field_name


_BASE_FIELDS = ["x", "y", "z", "rot_w", "rot_x", "rot_y", "rot_z",
                "scale_x", "scale_y", "scale_z", "opacity", "f_dc_0", "f_dc_1", "f_dc_2"]

_PLY_TYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
              "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4"}


def ply_field_names(sh_degree: int) -> list[str]:
    n_rest = 3 * (num_sh_coeffs(sh_degree) - 1)
    return _BASE_FIELDS + [f"f_rest_{i}" for i in range(n_rest)]


def save_ply(cloud: GaussianCloud, path, comments: tuple[str, ...] = ()) -> None:
    """Write ``cloud`` as binary little-endian PLY (float32 per property)."""
    if len(cloud) == 0:
        raise ValueError("refusing to write an empty Gaussian cloud")
    names = ply_field_names(cloud.sh_degree)
    n = len(cloud)
    # f_rest is channel-major: all coefficients of R, then G, then B
    rest = cloud.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, -1)
    cols = np.concatenate(
        [cloud.positions, cloud.rotations, cloud.log_scales, cloud.opacity_logits[:, None],
         cloud.sh[:, 0, :], rest],
        axis=1,
    ).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    payload = ("\n".join(header) + "\n").encode("ascii") + np.ascontiguousarray(cols).tobytes()
    atomic_write_bytes(path, payload)


def load_ply(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    offset = 0
    lines: list[tuple[str, int]] = []
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise PlyHeaderError("unterminated header", offset)
        try:
            line = data[offset:end].decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyHeaderError("non-ascii header line", offset) from None
        lines.append((line, offset))
        offset = end + 1
        if line == "end_header":
            break
        if len(lines) > 10000:
            raise PlyHeaderError("header too long", offset)
    body_start = offset
    if not lines or lines[0][0] != "ply":
        raise PlyHeaderError("missing 'ply' magic", 0)
    fmt_ok = False
    n_vertex = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    for line, off in lines[1:-1]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise PlyHeaderError(f"unsupported format '{' '.join(tok[1:])}'", off)
            fmt_ok = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyHeaderError("malformed element line", off)
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except ValueError:
                    raise PlyHeaderError("vertex count is not an integer", off) from None
            elif n_vertex is None:
                raise PlyHeaderError("elements before 'vertex' are not supported", off)
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in _PLY_TYPES:
                raise PlyHeaderError(f"unsupported property line '{line}'", off)
            if in_vertex:
                props.append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise PlyHeaderError(f"unexpected header keyword '{tok[0]}'", off)
    if not fmt_ok:
        raise PlyHeaderError("missing format line", lines[0][1])
    if n_vertex is None:
        raise PlyHeaderError("missing 'element vertex' line", body_start)
    dtype = np.dtype([(name, t) for name, t in props])
    if len(data) - body_start < dtype.itemsize * n_vertex:
        raise PlyHeaderError("vertex data truncated", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=n_vertex, offset=body_start)
    names = set(dtype.names or ())
    for f in _BASE_FIELDS:
        if f not in names:
            raise PlyMissingFieldError(f)
    n_rest = sum(1 for nm in names if nm.startswith("f_rest_"))
    k = 1 + n_rest // 3
    if n_rest % 3 or k not in (1, 4, 9, 16):
        raise PlyError(f"invalid number of f_rest properties: {n_rest}")
    for i in range(n_rest):
        if f"f_rest_{i}" not in names:
            raise PlyMissingFieldError(f"f_rest_{i}")

    def col(*fs):
        return np.stack([arr[f].astype(np.float64) for f in fs], axis=1)

    sh = np.zeros((n_vertex, k, 3))
    sh[:, 0, :] = col("f_dc_0", "f_dc_1", "f_dc_2")
    if n_rest:
        rest = col(*[f"f_rest_{i}" for i in range(n_rest)]).reshape(n_vertex, 3, k - 1)
        sh[:, 1:, :] = rest.transpose(0, 2, 1)
    return GaussianCloud(
        positions=col("x", "y", "z"),
        rotations=quat_normalize(col("rot_w", "rot_x", "rot_y", "rot_z")),
        log_scales=col("scale_x", "scale_y", "scale_z"),
        opacity_logits=arr["opacity"].astype(np.float64),
        sh=sh,
    )


# ---------------------------------------------------------------------------
# images and depth


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def write_png(path, image: np.ndarray) -> None:
    """Write a [0, 1] float image (H, W[, C]) as 8-bit PNG, linear (gamma 1.0)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    Image.fromarray(u8).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    arr = arr.astype(np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    elif arr.shape[2] == 4:
        arr = arr[..., :3]
    return arr


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM; rows are stored bottom-to-top."""
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError("depth map must be 2-D")
    h, w = d.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    atomic_write_bytes(path, header + np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    offset = 0
    while len(parts) < 3:
        end = data.index(b"\n", offset)
        line = data[offset:end].decode("ascii").strip()
        offset = end + 1
        if line:
            parts.append(line)
    if parts[0] != "Pf":
        raise ValueError(f"not a single-channel PFM file: {path}")
    w, h = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h, offset=offset).reshape(h, w)
    return arr[::-1].astype(np.float64)
