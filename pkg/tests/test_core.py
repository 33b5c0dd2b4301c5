import numpy as np
import pytest

from splatopt.core import (
    BehindCameraError,
    Camera,
    GaussianCloud,
    TrainConfig,
    project_point,
    scene_extent,
    unproject_pixel,
    validate_cloud,
    world_to_camera,
)

from conftest import make_cloud, make_camera


def identity_camera(fx=100.0, fy=100.0, cx=64.0, cy=64.0, w=128, h=128):
    return Camera(rotation=np.eye(3), translation=np.zeros(3),
                  fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h, near=0.01)


class TestWorldToCamera:
    def test_identity(self):
        cam = identity_camera()
        assert np.allclose(world_to_camera(cam, np.array([1.0, 2.0, 3.0])),
                           [1.0, 2.0, 3.0])

    def test_pure_translation(self):
        cam = Camera(rotation=np.eye(3), translation=np.array([0.0, 0.0, 5.0]),
                     fx=100, fy=100, cx=64, cy=64, width=128, height=128)
        assert np.allclose(world_to_camera(cam, np.array([0.0, 0.0, -2.0])),
                           [0.0, 0.0, 3.0])

    def test_rotation_about_z(self):
        # hand-built 90-degree rotation about z
        c, s = np.cos(np.pi / 2), np.sin(np.pi / 2)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        cam = Camera(rotation=rot, translation=np.zeros(3),
                     fx=100, fy=100, cx=64, cy=64, width=128, height=128)
        got = world_to_camera(cam, np.array([1.0, 0.0, 0.0]))
        assert np.allclose(got, rot @ np.array([1.0, 0.0, 0.0]), atol=1e-12)
        assert np.allclose(got, [0.0, 1.0, 0.0], atol=1e-12)

    def test_rigid_preserves_distances(self, rng):
        cam = make_camera()
        pts = rng.normal(size=(20, 3))
        out = world_to_camera(cam, pts)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=2)
        assert np.abs(d_in - d_out).max() < 1e-9


class TestProjectPoint:
    def test_optical_axis(self):
        cam = identity_camera()
        pixel, depth = project_point(cam, np.array([0.0, 0.0, 1.0]))
        assert np.allclose(pixel, [64.0, 64.0])
        assert depth == 1.0

    def test_off_axis(self):
        cam = identity_camera()
        pixel, _ = project_point(cam, np.array([0.5, 0.0, 1.0]))
        assert np.allclose(pixel, [114.0, 64.0])

    def test_behind_camera(self):
        cam = identity_camera()
        with pytest.raises(BehindCameraError):
            project_point(cam, np.array([0.0, 0.0, -1.0]))

    def test_matches_composition(self, rng):
        # compose world_to_camera with the pinhole formula independently
        cam = make_camera(width=64, height=48, position=(1.0, -2.0, 0.5))
        for _ in range(50):
            p = rng.uniform(-0.8, 0.8, size=3)
            c = cam.rotation @ p + cam.translation
            if c[2] <= 0:
                continue
            expect = np.array([cam.fx * c[0] / c[2] + cam.cx,
                               cam.fy * c[1] / c[2] + cam.cy])
            pixel, depth = project_point(cam, p)
            assert np.allclose(pixel, expect, atol=1e-12)
            assert np.isclose(depth, c[2])

    def test_unproject_round_trip(self, rng):
        cam = make_camera(position=(0.3, -2.0, 1.0))
        for _ in range(30):
            p = rng.uniform(-0.5, 0.5, size=3)
            pixel, depth = project_point(cam, p)
            cam_pt = unproject_pixel(cam, pixel, depth)
            expect = world_to_camera(cam, p)
            assert np.linalg.norm(cam_pt - expect) / np.linalg.norm(expect) < 1e-9


class TestCameraValidation:
    def test_rejects_non_orthonormal(self):
        rot = np.eye(3)
        rot[0, 1] = 1e-3
        with pytest.raises(ValueError):
            Camera(rotation=rot, translation=np.zeros(3), fx=10, fy=10,
                   cx=5, cy=5, width=10, height=10)

    def test_rejects_bad_intrinsics(self):
        with pytest.raises(ValueError):
            Camera(rotation=np.eye(3), translation=np.zeros(3), fx=-1, fy=10,
                   cx=5, cy=5, width=10, height=10)
        with pytest.raises(ValueError):
            Camera(rotation=np.eye(3), translation=np.zeros(3), fx=10, fy=10,
                   cx=5, cy=5, width=0, height=10)

    def test_center_round_trip(self):
        cam = make_camera(position=(1.0, 2.0, 3.0))
        assert np.allclose(cam.center(), [1.0, 2.0, 3.0], atol=1e-12)

    def test_scene_extent(self):
        cams = [make_camera(position=p) for p in
                [(2, 0, 0), (-2, 0, 0), (0, 1, 0)]]
        ext = scene_extent(cams)
        centers = np.stack([c.center() for c in cams])
        centroid = centers.mean(axis=0)
        assert np.isclose(ext, np.linalg.norm(centers - centroid, axis=1).max())


class TestValidateCloud:
    def test_empty_ok(self):
        assert validate_cloud(GaussianCloud.empty()) is None

    def test_nan_position(self, rng):
        cloud = make_cloud(rng, 5)
        cloud.positions[3, 1] = np.nan
        v = validate_cloud(cloud)
        assert v is not None
        assert v.attribute == "positions"
        assert v.index == 3

    def test_generated_cloud_ok(self, rng):
        assert validate_cloud(make_cloud(rng, 64)) is None

    def test_length_mismatch(self, rng):
        cloud = make_cloud(rng, 5)
        cloud.log_scales = cloud.log_scales[:4]
        v = validate_cloud(cloud)
        assert v is not None
        assert v.attribute == "log_scales"

    def test_zero_quaternion(self, rng):
        cloud = make_cloud(rng, 5)
        cloud.rotations[2] = 0.0
        v = validate_cloud(cloud)
        assert v is not None
        assert v.attribute == "rotations"
        assert v.index == 2

    def test_normalize_rotations(self, rng):
        cloud = make_cloud(rng, 10)
        cloud.normalize_rotations()
        norms = np.linalg.norm(cloud.rotations, axis=1)
        assert np.abs(norms - 1.0).max() < 1e-9


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig().validate()

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_dssim=1.5).validate()

    def test_bad_pyramid(self):
        with pytest.raises(ValueError):
            TrainConfig(pyramid_factors=(4, 8, 1),
                        views_per_iter=(4, 2, 1)).validate()
        with pytest.raises(ValueError):
            TrainConfig(pyramid_factors=(8, 4, 2),
                        views_per_iter=(4, 2, 1)).validate()

    def test_round_trip_dict(self):
        cfg = TrainConfig(iterations=123, seed=9, pyramid_factors=(4, 1),
                          views_per_iter=(6, 2))
        again = TrainConfig.from_dict(cfg.to_dict())
        assert again == cfg
