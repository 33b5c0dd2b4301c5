"""Dataset and checkpoint I/O plus synthetic scene generation.

Datasets are a cameras.json file next to an images/ directory of 8-bit RGB
PNGs, loaded to linear [0, 1] by dividing by 255 (no gamma transform).
Checkpoints are binary little-endian PLY files using the community splat
vertex layout, bit-exact at float32 across a save/load round trip.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    Camera,
    GaussianCloud,
    ImageDimensionMismatchError,
    IoFailureError,
    MissingFileError,
    PropertyMissingError,
    SchemaViolationError,
    UnsupportedPlyError,
    inverse_sigmoid,
)
from .raster import SH_C0, forward_render


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """A set of (image, camera) views with a train / held-out split."""

    views: list                 # list of (image (H, W, 3) float64, Camera)
    heldout_indices: list
    name: str = "scene"
    near: float = 0.01

    @property
    def size(self) -> int:
        return len(self.views)

    @property
    def train_indices(self) -> list:
        held = set(self.heldout_indices)
        return [i for i in range(len(self.views)) if i not in held]

    def train_views(self) -> list:
        return [self.views[i] for i in self.train_indices]

    def heldout_views(self) -> list:
        return [self.views[i] for i in self.heldout_indices]


def load_image(path) -> np.ndarray:
    """8-bit RGB PNG to linear [0, 1] float64."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, image: np.ndarray) -> None:
    """Clamp to [0, 1] and write an 8-bit RGB PNG."""
    arr = np.clip(image, 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def _require(record: dict, key: str, path: str):
    if key not in record:
        raise SchemaViolationError(f"{path}.{key} missing")
    return record[key]


def load_dataset(directory) -> Dataset:
    """Parse cameras.json and load every referenced PNG.

    View order follows the JSON entry order. Raises MissingFileError,
    SchemaViolationError (with the offending JSON path), or
    ImageDimensionMismatchError naming the view.
    """
    directory = Path(directory)
    cam_path = directory / "cameras.json"
    if not cam_path.exists():
        raise MissingFileError(f"{cam_path} not found")
    try:
        spec = json.loads(cam_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaViolationError(f"cameras.json: invalid JSON ({exc})") from exc
    if not isinstance(spec, dict) or "views" not in spec:
        raise SchemaViolationError("$.views missing")
    near = float(spec.get("near", 0.01))
    heldout = [int(i) for i in spec.get("heldout", [])]

    views = []
    for i, record in enumerate(spec["views"]):
        path = f"$.views[{i}]"
        if not isinstance(record, dict):
            raise SchemaViolationError(f"{path} is not an object")
        rel = _require(record, "image", path)
        width = int(_require(record, "width", path))
        height = int(_require(record, "height", path))
        rotation = np.asarray(_require(record, "rotation", path), dtype=np.float64)
        if rotation.size != 9:
            raise SchemaViolationError(f"{path}.rotation needs 9 floats")
        translation = np.asarray(_require(record, "translation", path),
                                 dtype=np.float64)
        if translation.size != 3:
            raise SchemaViolationError(f"{path}.translation needs 3 floats")
        try:
            camera = Camera(
                rotation=rotation.reshape(3, 3),
                translation=translation,
                fx=float(_require(record, "fx", path)),
                fy=float(_require(record, "fy", path)),
                cx=float(_require(record, "cx", path)),
                cy=float(_require(record, "cy", path)),
                width=width, height=height, near=near,
            )
        except ValueError as exc:
            raise SchemaViolationError(f"{path}: {exc}") from exc
        img_path = directory / rel
        if not img_path.exists():
            raise MissingFileError(f"view {i}: {img_path} not found")
        image = load_image(img_path)
        if image.shape[0] != height or image.shape[1] != width:
            raise ImageDimensionMismatchError(
                f"view {i} ({rel}): PNG is {image.shape[1]}x{image.shape[0]}, "
                f"camera says {width}x{height}")
        views.append((image, camera))

    bad = [i for i in heldout if not (0 <= i < len(views))]
    if bad:
        raise SchemaViolationError(f"$.heldout contains invalid indices {bad}")
    return Dataset(views=views, heldout_indices=heldout, name=directory.name,
                   near=near)


def write_dataset(dataset: Dataset, directory) -> None:
    """Write cameras.json plus images/ PNGs in the loadable schema."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (image, cam) in enumerate(dataset.views):
        rel = f"images/r_{i}.png"
        save_image(directory / rel, image)
        records.append({
            "image": rel,
            "width": cam.width,
            "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "rotation": [float(v) for v in cam.rotation.reshape(-1)],
            "translation": [float(v) for v in cam.translation],
        })
    payload = {"views": records, "near": dataset.near,
               "heldout": list(dataset.heldout_indices)}
    (directory / "cameras.json").write_text(json.dumps(payload, indent=1))


# ---------------------------------------------------------------------------
# PLY checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    cloud: GaussianCloud
    iteration: int = 0
    config_hash: str = ""


def _ply_property_names(sh_degree: int) -> list:
    basis = (sh_degree + 1) ** 2
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * (basis - 1))]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_checkpoint(cloud: GaussianCloud, path, iteration: int = 0,
                    config_hash: str = "") -> None:
    """Write the community splat PLY layout (binary little-endian, float32)."""
    path = Path(path)
    n = cloud.count
    basis = cloud.color_coeffs.shape[1]
    names = _ply_property_names(cloud.sh_degree)
    dtype = np.dtype([(name, "<f4") for name in names])
    data = np.empty(n, dtype=dtype)
    data["x"] = cloud.positions[:, 0]
    data["y"] = cloud.positions[:, 1]
    data["z"] = cloud.positions[:, 2]
    for c in range(3):
        data[f"f_dc_{c}"] = cloud.color_coeffs[:, 0, c]
    for c in range(3):
        for b in range(1, basis):
            data[f"f_rest_{c * (basis - 1) + b - 1}"] = cloud.color_coeffs[:, b, c]
    data["opacity"] = cloud.opacity_logits
    for a in range(3):
        data[f"scale_{a}"] = cloud.log_scales[:, a]
    for a in range(4):
        data[f"rot_{a}"] = cloud.rotations[:, a]

    header = ["ply", "format binary_little_endian 1.0",
              f"comment iteration={iteration}",
              f"comment config_hash={config_hash}",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    try:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(data.tobytes())
    except OSError as exc:
        raise IoFailureError(str(exc)) from exc


def load_checkpoint(path) -> Checkpoint:
    """Read a splat PLY; tolerates extra vertex properties (e.g. normals)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"{path} not found")
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise UnsupportedPlyError(f"{path} is not a supported splat PLY")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    fmt_lines = [ln for ln in header if ln.startswith("format")]
    if not fmt_lines or "binary_little_endian" not in fmt_lines[0]:
        raise UnsupportedPlyError(f"{path} is not a supported splat PLY")
    n = None
    props = []
    iteration = 0
    config_hash = ""
    in_vertex = False
    for ln in header:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "comment" and len(parts) >= 2:
            if parts[1].startswith("iteration="):
                iteration = int(parts[1].split("=", 1)[1])
            elif parts[1].startswith("config_hash="):
                config_hash = parts[1].split("=", 1)[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] not in ("float", "float32"):
                raise UnsupportedPlyError(f"{path}: property type {parts[1]} unsupported")
            props.append(parts[2])
    if n is None:
        raise UnsupportedPlyError(f"{path}: no vertex element")

    rest_count = sum(1 for p in props if p.startswith("f_rest_"))
    if rest_count % 3 != 0:
        raise PropertyMissingError(f"f_rest count {rest_count} not divisible by 3")
    basis = rest_count // 3 + 1
    degree = int(round(math.sqrt(basis))) - 1
    if (degree + 1) ** 2 != basis:
        raise PropertyMissingError(f"f_rest count {rest_count} is not an SH layout")
    required = _ply_property_names(degree)
    missing = [p for p in required if p not in props]
    if missing:
        raise PropertyMissingError(f"missing properties: {missing[:4]}")

    dtype = np.dtype([(p, "<f4") for p in props])
    expected = n * dtype.itemsize
    if len(body) < expected:
        raise UnsupportedPlyError(f"{path}: truncated vertex data")
    data = np.frombuffer(body[:expected], dtype=dtype)

    cloud = GaussianCloud(
        positions=np.stack([data["x"], data["y"], data["z"]], axis=1).astype(np.float64),
        rotations=np.stack([data[f"rot_{a}"] for a in range(4)], axis=1).astype(np.float64),
        log_scales=np.stack([data[f"scale_{a}"] for a in range(3)], axis=1).astype(np.float64),
        opacity_logits=data["opacity"].astype(np.float64),
        color_coeffs=np.zeros((n, basis, 3), dtype=np.float64),
    )
    for c in range(3):
        cloud.color_coeffs[:, 0, c] = data[f"f_dc_{c}"]
        for b in range(1, basis):
            cloud.color_coeffs[:, b, c] = data[f"f_rest_{c * (basis - 1) + b - 1}"]
    return Checkpoint(cloud=cloud, iteration=iteration, config_hash=config_hash)


def config_hash(config_dict: dict) -> str:
    """Stable short hash of a config snapshot."""
    blob = json.dumps(config_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """n roughly-equidistant points on a sphere."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - 2.0 * (i + 0.5) / n
    theta = math.pi * (3.0 - math.sqrt(5.0)) * i
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return radius * np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def generate_synthetic_scene(seed: int, n_kernels: int, n_cameras: int,
                             image_size: int = 128, heldout: int = 8,
                             camera_radius: float = 3.0):
    """Deterministic desk-scale scene: a ground-truth cloud in the unit ball
    rendered from cameras on a Fibonacci sphere.

    Returns (ground-truth GaussianCloud, Dataset); the last `heldout`
    cameras form the evaluation split.
    """
    if n_kernels < 1 or n_cameras < heldout + 2:
        raise ValueError("need n_kernels >= 1 and n_cameras >= heldout + 2")
    rng = np.random.default_rng(seed)

    direction = rng.normal(size=(n_kernels, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.uniform(0.0, 1.0, size=(n_kernels, 1)) ** (1.0 / 3.0)
    positions = direction * radius

    quats = rng.normal(size=(n_kernels, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    cloud = GaussianCloud(
        positions=positions,
        rotations=quats,
        log_scales=rng.uniform(np.log(0.01), np.log(0.05), size=(n_kernels, 3)),
        opacity_logits=inverse_sigmoid(rng.uniform(0.6, 0.95, size=n_kernels)),
        color_coeffs=((rng.uniform(0.0, 1.0, size=(n_kernels, 1, 3)) - 0.5) / SH_C0),
    )

    size = int(image_size)
    fx = fy = 0.9 * size
    cx = cy = size / 2.0
    near = 0.1
    centers = fibonacci_sphere(n_cameras, camera_radius)
    views = []
    for c in centers:
        cam = Camera.look_at(c, (0.0, 0.0, 0.0), fx, fy, cx, cy, size, size,
                             near=near)
        image, _ = forward_render(cloud, cam, sh_degree_active=0)
        views.append((np.clip(image, 0.0, 1.0), cam))

    heldout_indices = list(range(n_cameras - heldout, n_cameras))
    dataset = Dataset(views=views, heldout_indices=heldout_indices,
                      name=f"synthetic_seed{seed}", near=near)
    return cloud, dataset


# ---------------------------------------------------------------------------
# Metrics CSV
# ---------------------------------------------------------------------------

METRICS_HEADER = ["iter", "level", "views_per_iter", "n_gaussians",
                  "train_loss", "val_psnr", "val_ssim", "wall_seconds"]


def write_metrics(path, records) -> None:
    """RFC-4180 CSV with one row per evaluation event."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
            for rec in records:
                writer.writerow([rec.get(k, "") for k in METRICS_HEADER])
    except OSError as exc:
        raise IoFailureError(str(exc)) from exc
