"""Core value types: Gaussian clouds, pinhole cameras, training configuration.

Everything downstream (rasterizer, optimizer, densifier) consumes these types.
Cameras follow the splatting-community convention: world-to-camera extrinsics,
right-handed, camera looks down +z, y points down in pixel space.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class SplatError(Exception):
    """Base class for all package errors."""


class BehindCameraError(SplatError):
    """Point has non-positive camera-space depth."""


class DegenerateQuaternionError(SplatError):
    """Quaternion norm too small to define a rotation."""


class DimensionMismatchError(SplatError):
    """Array dimensions disagree."""


class ShapeMismatchError(SplatError):
    """Gradient / state shapes disagree with the cloud."""


class AuxMismatchError(SplatError):
    """Render aux does not match the cloud/camera it is replayed against."""


class ImageTooSmallError(SplatError):
    """Image smaller than the SSIM window."""


class MTooLargeError(SplatError):
    """Requested more distinct views than the dataset holds."""


class EmptyDistancesError(SplatError):
    """Adaptive threshold needs at least one pairwise distance."""


class WindowTooLargeError(SplatError):
    """Loss window exceeds the loss-map dimensions."""


class ResultTooSmallError(SplatError):
    """Downscaled image would be smaller than the SSIM window."""


class BudgetExceedsTotalError(SplatError):
    """Pyramid stage budgets exceed the total iteration count."""


class OutOfRangeError(SplatError):
    """Iteration outside the training schedule."""


class MissingFileError(SplatError):
    """Expected dataset file absent."""


class SchemaViolationError(SplatError):
    """cameras.json does not match the expected schema."""


class ImageDimensionMismatchError(SplatError):
    """PNG dimensions disagree with the camera record."""


class UnsupportedPlyError(SplatError):
    """PLY file is not a little-endian binary splat checkpoint."""


class PropertyMissingError(SplatError):
    """PLY checkpoint lacks a required vertex property."""


class IoFailureError(SplatError):
    """Filesystem write failed."""


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=float)
    return np.log(y / (1.0 - y))


# ---------------------------------------------------------------------------
# GaussianCloud
# ---------------------------------------------------------------------------

@dataclass
class GaussianCloud:
    """Attribute arrays for N anisotropic Gaussian kernels.

    positions      (N, 3) world-space centers
    rotations      (N, 4) quaternions (w, x, y, z), normalized before use
    log_scales     (N, 3) log of per-axis standard deviations
    opacity_logits (N,)   opacity = sigmoid(logit)
    color_coeffs   (N, B, 3) spherical-harmonic coefficients, B = (degree+1)^2
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    color_coeffs: np.ndarray

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.color_coeffs.shape[1]))) - 1

    @property
    def dtype(self):
        return self.positions.dtype

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise DegenerateQuaternionError("quaternion with near-zero norm")
        self.rotations /= norms

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            color_coeffs=self.color_coeffs.copy(),
        )

    @staticmethod
    def empty(sh_degree: int = 2, dtype=np.float64) -> "GaussianCloud":
        b = (sh_degree + 1) ** 2
        return GaussianCloud(
            positions=np.zeros((0, 3), dtype=dtype),
            rotations=np.zeros((0, 4), dtype=dtype),
            log_scales=np.zeros((0, 3), dtype=dtype),
            opacity_logits=np.zeros((0,), dtype=dtype),
            color_coeffs=np.zeros((0, b, 3), dtype=dtype),
        )

    def attribute_arrays(self) -> dict:
        return {
            "positions": self.positions,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "opacity_logits": self.opacity_logits,
            "color_coeffs": self.color_coeffs,
        }


@dataclass
class CloudViolation:
    """First invariant violation found by validate_cloud."""

    attribute: str
    index: int
    reason: str

    def __str__(self):
        return f"{self.attribute}[{self.index}]: {self.reason}"


def validate_cloud(cloud: GaussianCloud):
    """Check GaussianCloud invariants.

    Returns None when the cloud is valid, otherwise a CloudViolation
    describing the first violation (attribute name, kernel index, reason).
    """
    n = cloud.count
    expected = {
        "positions": (n, 3),
        "rotations": (n, 4),
        "log_scales": (n, 3),
        "opacity_logits": (n,),
    }
    for name, shape in expected.items():
        arr = getattr(cloud, name)
        if arr.shape != shape:
            return CloudViolation(name, -1, f"shape {arr.shape} != {shape}")
    cc = cloud.color_coeffs
    if cc.ndim != 3 or cc.shape[0] != n or cc.shape[2] != 3:
        return CloudViolation("color_coeffs", -1, f"shape {cc.shape} invalid")
    b = cc.shape[1]
    deg = int(round(np.sqrt(b))) - 1
    if (deg + 1) ** 2 != b or not (0 <= deg <= 3):
        return CloudViolation("color_coeffs", -1, f"basis size {b} not (D+1)^2 for D in 0..3")
    for name, arr in cloud.attribute_arrays().items():
        bad = ~np.isfinite(arr)
        if bad.any():
            idx = int(np.argwhere(bad)[0][0])
            return CloudViolation(name, idx, "non-finite value")
    if n:
        qn = np.linalg.norm(cloud.rotations, axis=1)
        tiny = qn < 1e-12
        if tiny.any():
            return CloudViolation("rotations", int(np.argmax(tiny)), "near-zero quaternion")
    return None


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera: world-to-camera extrinsics plus intrinsics in pixels."""

    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.near <= 0:
            raise ValueError("near plane must be positive")

    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def forward_axis(self) -> np.ndarray:
        """World-space unit vector along the camera +z axis."""
        return self.rotation[2]

    @staticmethod
    def look_at(position, target, fx, fy, cx, cy, width, height, near=0.01,
                up=(0.0, 0.0, 1.0)) -> "Camera":
        """Build a camera at `position` looking at `target` (y down in image)."""
        position = np.asarray(position, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        z = target - position
        z = z / np.linalg.norm(z)
        u = np.asarray(up, dtype=np.float64)
        if abs(z @ u) > 0.999:
            u = np.array([0.0, 1.0, 0.0])
            if abs(z @ u) > 0.999:
                u = np.array([1.0, 0.0, 0.0])
        x = np.cross(z, u)
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z], axis=0)
        trans = -rot @ position
        return Camera(rot, trans, fx, fy, cx, cy, width, height, near)


def world_to_camera(camera: Camera, points: np.ndarray) -> np.ndarray:
    """Rigid transform into the camera frame: R @ p + t.

    Accepts a single (3,) point or an (N, 3) batch.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        return camera.rotation @ pts + camera.translation
    return pts @ camera.rotation.T + camera.translation


def project_point(camera: Camera, point: np.ndarray):
    """Project a world point through the pinhole model.

    Returns (pixel (2,), depth). Raises BehindCameraError when the
    camera-space depth is not positive.
    """
    cam = world_to_camera(camera, np.asarray(point, dtype=np.float64))
    z = cam[2]
    if z <= 0:
        raise BehindCameraError(f"depth {z} <= 0")
    pixel = np.array([camera.fx * cam[0] / z + camera.cx,
                      camera.fy * cam[1] / z + camera.cy])
    return pixel, float(z)


def project_points(camera: Camera, points: np.ndarray):
    """Batched projection without depth checks.

    Returns (pixels (N, 2), depths (N,)); callers cull non-positive depths.
    """
    cam = world_to_camera(camera, points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera.fx * cam[:, 0] / z + camera.cx
        py = camera.fy * cam[:, 1] / z + camera.cy
    return np.stack([px, py], axis=1), z


def unproject_pixel(camera: Camera, pixel, depth: float) -> np.ndarray:
    """Camera-space point on the ray through `pixel` at the given depth."""
    px, py = float(pixel[0]), float(pixel[1])
    return np.array([(px - camera.cx) / camera.fx * depth,
                     (py - camera.cy) / camera.fy * depth,
                     depth])


def scene_extent(cameras) -> float:
    """Radius of the bounding sphere of the camera centers.

    Unit for densification thresholds and position learning-rate decay.
    """
    centers = np.stack([c.center() for c in cameras])
    centroid = centers.mean(axis=0)
    radius = float(np.linalg.norm(centers - centroid, axis=1).max())
    return max(radius, 1e-8)


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """All knobs for a training run. Defaults follow the baseline splatting
    recipe; pyramid/view-count defaults follow the multi-view schedule."""

    iterations: int = 30_000
    lambda_dssim: float = 0.2

    # image pyramid (coarse-to-fine): downsample factors and views per iteration
    pyramid_factors: tuple = (8, 4, 2, 1)
    views_per_iter: tuple = (48, 24, 12, 8)
    coarse_iters: int = 2000          # budget for each non-final pyramid level

    # densification
    densify_grad_threshold: float = 2e-4   # base threshold on view-space grads
    tau: float = 1.0                       # camera-spread gate
    densify_interval: int = 100
    densify_from: int = 500
    densify_until: int = 15_000
    prune_opacity: float = 0.005
    prune_screen_frac: float = 0.8
    opacity_reset_interval: int = 3000
    percent_dense: float = 0.01            # clone/split scale cut, fraction of extent
    split_scale_factor: float = 1.6
    distance_aggregate: str = "mean"       # or "max": Heaviside gate aggregation

    # cross-ray densification
    loss_window: tuple = (64, 64)
    ray_epsilon: float = 0.02              # closeness cut, fraction of scene extent
    region_boost: float = 0.5              # threshold multiplier inside cuboids

    # learning rates (baseline groups, at single-view scale)
    lr_position_init: float = 1.6e-4       # scaled by scene extent
    lr_position_final: float = 1.6e-6
    lr_position_max_steps: int = 30_000
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color_dc: float = 2.5e-3
    lr_color_rest_div: float = 20.0

    # gradient accumulation across views: "sum" follows the multi-view rule,
    # "mean" kept for ablation
    gradient_mode: str = "sum"

    sh_degree: int = 2
    sh_ramp_interval: int = 1000

    # model init
    init_points: int = 2000
    init_opacity: float = 0.1

    background: tuple = (0.0, 0.0, 0.0)

    seed: int = 0
    threads: int = 1
    deterministic: bool = True
    dtype: str = "float64"                 # or "float32"

    # feature toggles
    multiview: bool = True        # sample M > 1 views per iteration
    cross_ray: bool = True        # loss-window cuboid regions
    adaptive_beta: bool = True    # camera-spread threshold halving
    pyramid_enabled: bool = True  # coarse-to-fine intrinsic pyramid

    eval_interval: int = 1000
    checkpoint_interval: int = 0  # 0: final checkpoint only

    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def validate(self) -> None:
        if not (0.0 <= self.lambda_dssim <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")
        if self.densify_grad_threshold <= 0:
            raise ValueError("densify threshold must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if any(m < 1 for m in self.views_per_iter):
            raise ValueError("views per iteration must be >= 1")
        factors = list(self.pyramid_factors)
        if factors != sorted(factors, reverse=True) or factors[-1] != 1:
            raise ValueError("pyramid factors must strictly decrease to 1")
        if len(set(factors)) != len(factors):
            raise ValueError("pyramid factors must strictly decrease to 1")
        if len(factors) != len(self.views_per_iter):
            raise ValueError("one view count per pyramid level required")
        if self.gradient_mode not in ("sum", "mean"):
            raise ValueError("gradient_mode must be 'sum' or 'mean'")
        if self.distance_aggregate not in ("mean", "max"):
            raise ValueError("distance_aggregate must be 'mean' or 'max'")
        if not (0 <= self.sh_degree <= 3):
            raise ValueError("sh degree must lie in 0..3")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, val in out.items():
            if isinstance(val, tuple):
                out[key] = list(val)
        return out

    @staticmethod
    def from_dict(data: dict) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(TrainConfig):
            if f.name in data:
                val = data[f.name]
                if isinstance(val, list):
                    val = tuple(val)
                kwargs[f.name] = val
        return TrainConfig(**kwargs)
