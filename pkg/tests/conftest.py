import numpy as np
import pytest

from splatopt.core import Camera, GaussianCloud, inverse_sigmoid


def make_cloud(rng, n, sh_degree=2, spread=0.5):
    """Random well-conditioned cloud for rasterizer and IO tests."""
    basis = (sh_degree + 1) ** 2
    cloud = GaussianCloud(
        positions=rng.uniform(-spread, spread, size=(n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.05), np.log(0.25), size=(n, 3)),
        opacity_logits=inverse_sigmoid(rng.uniform(0.3, 0.9, size=n)),
        color_coeffs=rng.uniform(-0.4, 0.4, size=(n, basis, 3)),
    )
    cloud.color_coeffs[:, 0, :] = rng.uniform(-0.5, 1.2, size=(n, 3))
    return cloud


def make_camera(width=32, height=32, position=(0.0, -2.5, 0.6), fx=None, fy=None):
    fx = fx if fx is not None else 0.9 * width
    fy = fy if fy is not None else 0.9 * width
    return Camera.look_at(position=position, target=(0.0, 0.0, 0.0),
                          fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
                          width=width, height=height, near=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
