"""Blur model: an MLP predicts M per-Gaussian perturbations whose renders are averaged.

For Gaussian j and set i the network predicts ``(dmu, dr, ds)`` and the set is

    mu_ji = mu_j + lambda_p * dmu_ji
    r_ji  = normalize(r_j * rho_r * min(1, lambda_q * dr_ji + 1 - lambda_q))
    s_ji  = s_j * rho_s * min(1, lambda_q * ds_ji + 1 - lambda_q)

with elementwise products. ``dr`` and ``ds`` come out of a sigmoid, ``dmu`` is linear.
With ``center_offsets`` the mean of ``dmu`` over the M sets is subtracted, so the
base cloud stays at the centroid of its copies; otherwise a common shift of all
sets is free and the base drifts away from what the blurred render shows.
The sharp image is the plain render of the base cloud.

Checkpoint layout (``save_blurnet``), all little-endian::

    8s   magic b"BLURNET1"
    u32  version (=1)
    7*u32 input_dim, hidden, trunk_layers, m, l_pos, l_view, flags
          (flags bit 0: include_input, bit 1: center_offsets)
    4*f32 lambda_p, lambda_q, rho_r, rho_s
    f32[] W0 (input_dim x hidden), b0, W1, b1, ..., W_mu (hidden x 3m), b_mu,
          W_r (hidden x 4m), b_r, W_s (hidden x 3m), b_s   -- row-major
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .rasterizer import (
    DEFAULT_OPTIONS,
    RenderGradients,
    RenderOptions,
    RenderOutput,
    render,
    render_backward,
)
from .scene import (
    DEPTH_SENTINEL,
    CameraIntrinsics,
    CameraPose,
    GaussianCloud,
    atomic_write_bytes,
    quat_normalize,
    sigmoid,
)

MAGIC = b"BLURNET1"
VERSION = 1


# ---------------------------------------------------------------------------
# positional encoding


@dataclass(frozen=True)
class PositionalEncoding:
    num_freqs: int
    include_input: bool = False

    def __post_init__(self):
        if self.num_freqs < 1:
            raise ValueError("num_freqs must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * (2 * self.num_freqs + int(self.include_input))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return encode(x, self.num_freqs, self.include_input)


def encode(x, L: int, include_input: bool = False) -> np.ndarray:
    """Per scalar v: [v?, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]."""
    if L < 1:
        raise ValueError("L must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    ang = x[..., None] * ((2.0 ** np.arange(L)) * np.pi)
    parts = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(x.shape + (2 * L,))
    if include_input:
        parts = np.concatenate([x[..., None], parts], axis=-1)
    return parts.reshape(x.shape[:-1] + (-1,)) if x.ndim else parts


# ---------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class BlurNetConfig:
    m: int = 4
    hidden: int = 64
    trunk_layers: int = 3
    l_pos: int = 10
    l_view: int = 4
    include_input: bool = False
    lambda_p: float = 1e-2
    lambda_q: float = 1e-2
    zero_heads: bool = False
    center_offsets: bool = True

    @property
    def input_dim(self) -> int:
        inc = int(self.include_input)
        return 3 * (2 * self.l_pos + inc) + 4 + 3 + 3 * (2 * self.l_view + inc)


HEAD_DIMS = {"mu": 3, "r": 4, "s": 3}


@dataclass
class BlurNet:
    cfg: BlurNetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: BlurNetConfig = BlurNetConfig(), seed: int = 0) -> BlurNet:
        rng = np.random.default_rng(seed)

        def xavier(fan_in, fan_out):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-a, a, (fan_in, fan_out))

        p: dict[str, np.ndarray] = {}
        dims = [cfg.input_dim] + [cfg.hidden] * cfg.trunk_layers
        for i in range(cfg.trunk_layers):
            p[f"W{i}"] = xavier(dims[i], dims[i + 1])
            p[f"b{i}"] = np.zeros(dims[i + 1])
        for name, d in HEAD_DIMS.items():
            w = xavier(cfg.hidden, d * cfg.m)
            p[f"W_{name}"] = np.zeros_like(w) if cfg.zero_heads else w
            p[f"b_{name}"] = np.zeros(d * cfg.m)
        p["rho_r"] = np.ones(1)
        p["rho_s"] = np.ones(1)
        return cls(cfg, p)

    @property
    def rho_r(self) -> float:
        return float(self.params["rho_r"][0])

    @property
    def rho_s(self) -> float:
        return float(self.params["rho_s"][0])

    def copy(self) -> BlurNet:
        return BlurNet(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def weight_names(self) -> list[str]:
        names = []
        for i in range(self.cfg.trunk_layers):
            names += [f"W{i}", f"b{i}"]
        for h in HEAD_DIMS:
            names += [f"W_{h}", f"b_{h}"]
        return names

    # -- inputs

    def features(self, cloud: GaussianCloud, view_center: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        n = len(cloud)
        pos = encode(cloud.positions, cfg.l_pos, cfg.include_input)
        view = np.broadcast_to(encode(np.asarray(view_center, dtype=np.float64), cfg.l_view, cfg.include_input),
                               (n, 3 * (2 * cfg.l_view + int(cfg.include_input))))
        return np.concatenate([pos, quat_normalize(cloud.rotations), cloud.scales, view], axis=1)

    # -- MLP

    def forward(self, X: np.ndarray):
        """Raw head outputs arranged as (N, M, 10): dmu(3), dr(4), ds(3), plus a cache."""
        p = self.params
        acts = [X]
        pre = []
        h = X
        for i in range(self.cfg.trunk_layers):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            pre.append(z)
            h = np.maximum(z, 0.0)
            acts.append(h)
        n, m = len(X), self.cfg.m
        mu = (h @ p["W_mu"] + p["b_mu"]).reshape(n, m, 3)
        r = sigmoid((h @ p["W_r"] + p["b_r"]).reshape(n, m, 4))
        s = sigmoid((h @ p["W_s"] + p["b_s"]).reshape(n, m, 3))
        out = np.concatenate([mu, r, s], axis=2)
        return out, (acts, pre, r, s)

    def backward(self, cache, d_out: np.ndarray):
        """Parameter gradients and dL/dX from dL/d(out) of shape (N, M, 10)."""
        acts, pre, r, s = cache
        p = self.params
        n, m = d_out.shape[:2]
        h = acts[-1]
        g_mu = d_out[:, :, 0:3].reshape(n, 3 * m)
        g_r = (d_out[:, :, 3:7] * r * (1 - r)).reshape(n, 4 * m)
        g_s = (d_out[:, :, 7:10] * s * (1 - s)).reshape(n, 3 * m)
        grads = {}
        dh = np.zeros_like(h)
        for name, g in (("mu", g_mu), ("r", g_r), ("s", g_s)):
            grads[f"W_{name}"] = h.T @ g
            grads[f"b_{name}"] = g.sum(axis=0)
            dh += g @ p[f"W_{name}"].T
        for i in reversed(range(self.cfg.trunk_layers)):
            dz = dh * (pre[i] > 0)
            grads[f"W{i}"] = acts[i].T @ dz
            grads[f"b{i}"] = dz.sum(axis=0)
            dh = dz @ p[f"W{i}"].T
        return grads, dh


def predict_offsets(net: BlurNet, cloud: GaussianCloud, view: CameraPose) -> np.ndarray:
    """Per-Gaussian offsets, shape (N, M, 10): dmu (identity head), dr and ds in (0, 1)."""
    return net.forward(net.features(cloud, view.center))[0]


# ---------------------------------------------------------------------------
# set transformation


def _factor(delta: np.ndarray, lam_q: float):
    raw = lam_q * delta + (1.0 - lam_q)
    return np.minimum(1.0, raw), raw < 1.0


def _center(x: np.ndarray, on: bool) -> np.ndarray:
    # x: (N, M, 3); the map is a projection, so it is its own adjoint
    return x - x.mean(axis=1, keepdims=True) if on else x


def transform_sets(cloud: GaussianCloud, offsets: np.ndarray, net: BlurNet) -> list[GaussianCloud]:
    cfg = net.cfg
    q = quat_normalize(cloud.rotations)
    shift = cfg.lambda_p * _center(offsets[:, :, 0:3], cfg.center_offsets)
    out = []
    for i in range(offsets.shape[1]):
        o = offsets[:, i]
        f_r, _ = _factor(o[:, 3:7], cfg.lambda_q)
        f_s, _ = _factor(o[:, 7:10], cfg.lambda_q)
        u = q * f_r * net.rho_r
        out.append(GaussianCloud(
            positions=cloud.positions + shift[:, i],
            rotations=quat_normalize(u),
            log_scales=cloud.log_scales + np.log(net.rho_s) + np.log(f_s),
            opacity_logits=cloud.opacity_logits,
            sh=cloud.sh,
        ))
    return out


def _normalize_vjp(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    return (g - u * np.sum(u * g, axis=-1, keepdims=True)) / norm


def transform_sets_backward(cloud: GaussianCloud, offsets: np.ndarray, net: BlurNet,
                            set_grads: list[RenderGradients]):
    """Pull per-set gradients back to (base-cloud grads, d_offsets, d_rho_r, d_rho_s)."""
    cfg = net.cfg
    n, m = offsets.shape[:2]
    q = quat_normalize(cloud.rotations)
    base = RenderGradients.zeros(n, cloud.sh.shape[1])
    d_off = np.zeros_like(offsets)
    d_rho_r = 0.0
    d_rho_s = 0.0
    d_q = np.zeros((n, 4))
    for i, g in enumerate(set_grads):
        o = offsets[:, i]
        base.positions += g.positions
        base.log_scales += g.log_scales
        base.opacity_logits += g.opacity_logits
        base.sh += g.sh
        base.pose_rotation += g.pose_rotation
        base.pose_translation += g.pose_translation
        base.mean2d += g.mean2d
        d_off[:, i, 0:3] = cfg.lambda_p * g.positions

        f_s, live_s = _factor(o[:, 7:10], cfg.lambda_q)
        d_rho_s += float(g.log_scales.sum()) / net.rho_s
        d_off[:, i, 7:10] = g.log_scales / f_s * cfg.lambda_q * live_s

        f_r, live_r = _factor(o[:, 3:7], cfg.lambda_q)
        u = q * f_r * net.rho_r
        d_u = _normalize_vjp(u, g.rotations)
        d_q += d_u * f_r * net.rho_r
        d_rho_r += float(np.sum(d_u * q * f_r))
        d_off[:, i, 3:7] = d_u * q * net.rho_r * cfg.lambda_q * live_r
    base.rotations += _normalize_vjp(cloud.rotations, d_q)
    d_off[:, :, 0:3] = _center(d_off[:, :, 0:3], cfg.center_offsets)
    return base, d_off, d_rho_r, d_rho_s


# ---------------------------------------------------------------------------
# rendering


@dataclass
class BlurredRender:
    color: np.ndarray
    depth: np.ndarray
    accum_alpha: np.ndarray
    raw_depth: np.ndarray
    sets: list[GaussianCloud] = field(repr=False)
    renders: list[RenderOutput] = field(repr=False)
    offsets: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)
    cache: tuple = field(repr=False)


@dataclass
class BlurGradients:
    cloud: RenderGradients
    net: dict[str, np.ndarray]
    offsets: np.ndarray


def render_blurred(cloud: GaussianCloud, net: BlurNet, pose: CameraPose, intr: CameraIntrinsics,
                   opts: RenderOptions = DEFAULT_OPTIONS, features: np.ndarray | None = None) -> BlurredRender:
    """Pixelwise mean of the renders of the M transformed sets.

    The network inputs are conditioning only: no gradient flows through them back
    to the Gaussians or the pose. Pass ``features`` to pin them explicitly.
    """
    X = net.features(cloud, pose.center) if features is None else features
    offsets, cache = net.forward(X)
    sets = transform_sets(cloud, offsets, net)
    renders = [render(s, pose, intr, opts) for s in sets]
    m = len(renders)
    color = sum(r.color for r in renders) / m
    raw_depth = sum(r.raw_depth for r in renders) / m
    alpha = sum(r.accum_alpha for r in renders) / m
    hit = np.any(np.stack([r.n_contrib > 0 for r in renders]), axis=0)
    depth = np.where(hit, raw_depth, DEPTH_SENTINEL)
    return BlurredRender(color, depth, alpha, raw_depth, sets, renders, offsets, X, cache)


def render_sharp(cloud: GaussianCloud, pose: CameraPose, intr: CameraIntrinsics,
                 opts: RenderOptions = DEFAULT_OPTIONS) -> np.ndarray:
    return render(cloud, pose, intr, opts).color


def render_blurred_backward(cloud: GaussianCloud, net: BlurNet, pose: CameraPose, intr: CameraIntrinsics,
                            fwd: BlurredRender, d_color=None, d_depth=None,
                            opts: RenderOptions = DEFAULT_OPTIONS) -> BlurGradients:
    m = len(fwd.renders)
    dc = None if d_color is None else np.asarray(d_color) / m
    dd = None if d_depth is None else np.where(fwd.depth != DEPTH_SENTINEL, np.asarray(d_depth), 0.0) / m
    set_grads = [render_backward(s, pose, intr, dc, dd, opts=opts, forward=r)
                 for s, r in zip(fwd.sets, fwd.renders)]
    base, d_off, d_rho_r, d_rho_s = transform_sets_backward(cloud, fwd.offsets, net, set_grads)
    net_grads, _ = net.backward(fwd.cache, d_off)
    net_grads["rho_r"] = np.array([d_rho_r])
    net_grads["rho_s"] = np.array([d_rho_s])
    return BlurGradients(base, net_grads, d_off)


# ---------------------------------------------------------------------------
# checkpoint


def save_blurnet(net: BlurNet, path) -> None:
    c = net.cfg
    head = MAGIC + struct.pack("<I", VERSION)
    flags = int(c.include_input) | (int(c.center_offsets) << 1)
    head += struct.pack("<7I", c.input_dim, c.hidden, c.trunk_layers, c.m, c.l_pos, c.l_view, flags)
    head += struct.pack("<4f", c.lambda_p, c.lambda_q, net.rho_r, net.rho_s)
    body = b"".join(np.ascontiguousarray(net.params[k], dtype="<f4").tobytes() for k in net.weight_names())
    atomic_write_bytes(path, head + body)


def load_blurnet(path) -> BlurNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a blurnet checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    in_dim, hidden, layers, m, l_pos, l_view, flags = struct.unpack_from("<7I", data, 12)
    lam_p, lam_q, rho_r, rho_s = struct.unpack_from("<4f", data, 40)
    cfg = BlurNetConfig(m=m, hidden=hidden, trunk_layers=layers, l_pos=l_pos, l_view=l_view,
                        include_input=bool(flags & 1), center_offsets=bool(flags & 2),
                        lambda_p=lam_p, lambda_q=lam_q)
    if cfg.input_dim != in_dim:
        raise ValueError(f"{path}: input_dim {in_dim} inconsistent with encoding sizes")
    net = BlurNet.create(replace(cfg, zero_heads=True))
    offset = 56
    for k in net.weight_names():
        shape = net.params[k].shape
        count = int(np.prod(shape))
        net.params[k] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 4 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing bytes in checkpoint")
    net.params["rho_r"] = np.array([rho_r], dtype=np.float64)
    net.params["rho_s"] = np.array([rho_s], dtype=np.float64)
    return net
