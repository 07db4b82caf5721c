"""Shared scene builders for the tests."""
import numpy as np

from blursplat.scene import GaussianCloud


def random_cloud(rng, n, sh_degree=1, depth=(2.0, 4.0), spread=0.8, scale=(0.05, 0.2), opacity=(0.2, 0.95)):
    """Gaussians in front of an identity camera, colors kept off the [0, 1] clamp."""
    z = rng.uniform(*depth, n)
    xy = rng.uniform(-spread, spread, (n, 2)) * z[:, None] / 3
    pos = np.column_stack([xy, z])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    cloud = GaussianCloud.create(pos, colors=rng.uniform(0.2, 0.8, (n, 3)),
                                 scales=0.1, opacities=0.5, sh_degree=sh_degree)
    cloud.rotations = q
    cloud.log_scales = np.log(rng.uniform(*scale, (n, 3)))
    cloud.opacity_logits = np.log(np.reshape(o := rng.uniform(*opacity, n), -1) / (1 - o))
    if sh_degree > 0:
        cloud.sh[:, 1:, :] = rng.normal(scale=0.05, size=cloud.sh[:, 1:, :].shape)
    return cloud
