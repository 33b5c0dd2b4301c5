"""Adaptive density control.

Baseline clone/split/prune machinery plus two multi-view extensions: a
camera-spread gate that halves the densification threshold when the sampled
views are far apart on the unit sphere, and cross-ray cuboid regions around
the intersections of rays cast through high-loss image windows, inside which
the threshold is halved again.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Camera,
    EmptyDistancesError,
    GaussianCloud,
    WindowTooLargeError,
    inverse_sigmoid,
)

PARALLEL_EPS = 1e-12
CUBOID_INFLATE_FRAC = 0.01   # per-side inflation, fraction of scene extent
MIN_MIDPOINTS = 2


# ---------------------------------------------------------------------------
# Camera-spread gate
# ---------------------------------------------------------------------------

def normalize_camera_translations(translations: np.ndarray) -> np.ndarray:
    """Map M camera translations into the unit sphere.

    t' = (t - centroid) / max_j |t_j - centroid|. When every translation is
    identical the result is all zeros.
    """
    t = np.asarray(translations, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 2:
        raise ValueError(f"expected (M >= 2, 3) translations, got {t.shape}")
    centered = t - t.mean(axis=0, keepdims=True)
    rmax = np.linalg.norm(centered, axis=1).max()
    if rmax == 0.0:
        return np.zeros_like(centered)
    return centered / rmax


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    """All ordered-pair distances (i != j); length M^2 - M, duplicates kept."""
    p = np.asarray(points, dtype=np.float64)
    m = p.shape[0]
    if m < 2:
        raise ValueError("need at least two points")
    diff = p[:, None, :] - p[None, :, :]
    d = np.linalg.norm(diff, axis=2)
    mask = ~np.eye(m, dtype=bool)
    return d[mask]


def adaptive_threshold(r_values: np.ndarray, beta: float, tau: float,
                       aggregate: str = "mean") -> float:
    """Heaviside-gated densification threshold.

    Returns beta/2 when the aggregated normalized camera distance reaches
    tau (gate input >= 0), else beta. The gate is closed-form: only beta or
    beta/2 can come out.
    """
    r = np.asarray(r_values, dtype=np.float64)
    if r.size == 0:
        raise EmptyDistancesError("no pairwise distances")
    if beta <= 0 or tau <= 0:
        raise ValueError("beta and tau must be positive")
    stat = float(r.mean() if aggregate == "mean" else r.max())
    if stat / tau - 1.0 >= 0.0:
        return beta / 2.0
    return beta


# ---------------------------------------------------------------------------
# Cross-ray geometry
# ---------------------------------------------------------------------------

@dataclass
class Ray:
    """World-space ray from a camera center; direction is unit length."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.direction = d / np.linalg.norm(d)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass
class Cuboid:
    """Axis-aligned box around cross-view ray intersections."""

    lo: np.ndarray
    hi: np.ndarray
    source_pair: tuple = (-1, -1)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)


def region_contains(cuboid: Cuboid, point: np.ndarray) -> bool:
    """Inclusive componentwise containment test."""
    p = np.asarray(point, dtype=np.float64)
    return bool(np.all(p >= cuboid.lo) and np.all(p <= cuboid.hi))


def regions_contain_points(cuboids: list, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points lying inside any cuboid."""
    mask = np.zeros(points.shape[0], dtype=bool)
    for box in cuboids:
        inside = np.all(points >= box.lo[None, :], axis=1) \
            & np.all(points <= box.hi[None, :], axis=1)
        mask |= inside
    return mask


def select_loss_window(loss_map: np.ndarray, h: int, w: int):
    """Rectangle of size (h, w) with the largest mean loss.

    Slides with stride (h//2, w//2), minimum 1; ties break toward the
    smallest (row, col) in row-major order. Returns (row, col, h, w).
    """
    big_h, big_w = loss_map.shape
    if h > big_h or w > big_w:
        raise WindowTooLargeError(f"window {(h, w)} exceeds map {(big_h, big_w)}")
    stride_r = max(h // 2, 1)
    stride_c = max(w // 2, 1)
    rows = list(range(0, big_h - h + 1, stride_r))
    if rows[-1] != big_h - h:
        rows.append(big_h - h)
    cols = list(range(0, big_w - w + 1, stride_c))
    if cols[-1] != big_w - w:
        cols.append(big_w - w)

    # integral image turns each window mean into four lookups
    integral = np.zeros((big_h + 1, big_w + 1))
    np.cumsum(np.cumsum(loss_map, axis=0), axis=1, out=integral[1:, 1:])
    best = (-np.inf, 0, 0)
    col_arr = np.asarray(cols)
    for r in rows:
        sums = (integral[r + h, col_arr + w] - integral[r, col_arr + w]
                - integral[r + h, col_arr] + integral[r, col_arr])
        j = int(np.argmax(sums))
        if sums[j] > best[0]:
            best = (float(sums[j]), r, cols[j])
    return best[1], best[2], h, w


def rays_from_window(camera: Camera, rect) -> list:
    """Four world-space rays through the corner pixel centers of a window."""
    r, c, h, w = rect
    if r < 0 or c < 0 or r + h > camera.height or c + w > camera.width:
        raise WindowTooLargeError(f"window {rect} outside image")
    origin = camera.center()
    rays = []
    for py, px in ((r, c), (r, c + w - 1), (r + h - 1, c), (r + h - 1, c + w - 1)):
        cam_dir = np.array([(px - camera.cx) / camera.fx,
                            (py - camera.cy) / camera.fy,
                            1.0])
        world_dir = camera.rotation.T @ cam_dir
        rays.append(Ray(origin, world_dir))
    return rays


@dataclass
class RayApproach:
    """Closest approach between two rays."""

    t1: float
    t2: float
    distance: float
    midpoint: np.ndarray
    parallel: bool
    behind_camera: bool


def ray_closest_points(r1: Ray, r2: Ray) -> RayApproach:
    """Closest points between two rays, minimizing over all real t1, t2.

    Near-parallel rays are flagged rather than failed; negative parameters
    are flagged behind_camera.
    """
    d1, d2 = r1.direction, r2.direction
    diff = r2.origin - r1.origin
    b = float(d1 @ d2)
    denom = 1.0 - b * b
    if abs(denom) < PARALLEL_EPS:
        t1 = float(d1 @ diff)
        t2 = 0.0
        p1 = r1.point_at(t1)
        p2 = r2.origin
        dist = float(np.linalg.norm(p1 - p2))
        return RayApproach(t1, t2, dist, 0.5 * (p1 + p2), True,
                           t1 < 0.0 or t2 < 0.0)
    e1 = float(d1 @ diff)
    e2 = float(d2 @ diff)
    t1 = (e1 - b * e2) / denom
    t2 = (b * e1 - e2) / denom
    p1 = r1.point_at(t1)
    p2 = r2.point_at(t2)
    dist = float(np.linalg.norm(p1 - p2))
    return RayApproach(float(t1), float(t2), dist, 0.5 * (p1 + p2), False,
                       t1 < 0.0 or t2 < 0.0)


def cross_ray_regions(ray_quads: list, closeness: float,
                      scene_extent: float) -> list:
    """Cuboids around cross-view ray intersections.

    ray_quads: one list of four rays per view. For every unordered view pair
    all 16 ray pairs are tested; midpoints closer than `closeness` with both
    parameters non-negative are kept, and two or more of them produce the
    axis-aligned box of the midpoints inflated by 1% of the scene extent.
    """
    if len(ray_quads) < 2:
        return []
    boxes = []
    inflate = CUBOID_INFLATE_FRAC * scene_extent
    for i in range(len(ray_quads)):
        for j in range(i + 1, len(ray_quads)):
            midpoints = []
            for ra in ray_quads[i]:
                for rb in ray_quads[j]:
                    hit = ray_closest_points(ra, rb)
                    if hit.parallel or hit.behind_camera:
                        continue
                    if hit.distance < closeness:
                        midpoints.append(hit.midpoint)
            if len(midpoints) >= MIN_MIDPOINTS:
                pts = np.stack(midpoints)
                boxes.append(Cuboid(pts.min(axis=0) - inflate,
                                    pts.max(axis=0) + inflate,
                                    source_pair=(i, j)))
    return boxes


# ---------------------------------------------------------------------------
# Densification state and the clone/split/prune event
# ---------------------------------------------------------------------------

@dataclass
class DensifyState:
    """Gradient statistics accumulated between densification events."""

    viewspace_norm_accum: np.ndarray
    world_grad_accum: np.ndarray
    touch_count: np.ndarray
    max_radii_frac: np.ndarray
    scene_extent: float
    regions: list = field(default_factory=list)

    @staticmethod
    def create(n: int, scene_extent: float) -> "DensifyState":
        return DensifyState(
            viewspace_norm_accum=np.zeros(n),
            world_grad_accum=np.zeros((n, 3)),
            touch_count=np.zeros(n, dtype=np.int64),
            max_radii_frac=np.zeros(n),
            scene_extent=scene_extent,
        )

    def absorb(self, buffer) -> None:
        """Fold one iteration's GradientBuffer statistics into the state."""
        self.viewspace_norm_accum += buffer.viewspace_norm_accum
        self.world_grad_accum += buffer.world_grad_accum
        self.touch_count += buffer.touch_count
        np.maximum(self.max_radii_frac, buffer.max_radii_frac,
                   out=self.max_radii_frac)

    def mean_grad_norms(self) -> np.ndarray:
        counts = np.maximum(self.touch_count, 1)
        return self.viewspace_norm_accum / counts

    def reset_stats(self, n: int) -> None:
        self.viewspace_norm_accum = np.zeros(n)
        self.world_grad_accum = np.zeros((n, 3))
        self.touch_count = np.zeros(n, dtype=np.int64)
        self.max_radii_frac = np.zeros(n)


@dataclass
class ResizePlan:
    """How a densify event changed the kernel set; resizes optimizer moments."""

    keep_indices: np.ndarray   # surviving old-kernel indices, in order
    n_new: int                 # kernels appended after the survivors
    n_cloned: int
    n_split: int
    n_pruned: int


def densify_and_prune(cloud: GaussianCloud, state: DensifyState,
                      beta_hat: float, regions: list, rng: np.random.Generator,
                      percent_dense: float = 0.01,
                      split_factor: float = 1.6,
                      prune_opacity: float = 0.005,
                      prune_screen_frac: float = 0.8,
                      region_boost: float = 0.5) -> ResizePlan:
    """One densification event: clone small / split large kernels whose mean
    accumulated view-space gradient exceeds the effective threshold, then
    prune transparent or oversized kernels.

    Kernels inside any region get the boosted (halved) threshold. Mutates
    the cloud in place and resets the state accumulators; returns the
    ResizePlan the optimizer needs to carry its moments over.
    """
    n = cloud.count
    grads = state.mean_grad_norms()
    threshold = np.full(n, beta_hat)
    if regions:
        inside = regions_contain_points(regions, cloud.positions)
        threshold[inside] = beta_hat * region_boost

    hot = grads > threshold
    max_scale = cloud.scales().max(axis=1)
    small = max_scale <= percent_dense * state.scene_extent
    clone_mask = hot & small
    split_mask = hot & ~small

    opacities = cloud.opacities()
    prune_mask = (opacities < prune_opacity) | (state.max_radii_frac > prune_screen_frac)

    keep_mask = ~(prune_mask | split_mask)
    keep_indices = np.flatnonzero(keep_mask)

    new_parts = {k: [] for k in cloud.attribute_arrays()}

    clone_idx = np.flatnonzero(clone_mask & ~prune_mask)
    if clone_idx.size:
        wg = state.world_grad_accum[clone_idx]
        counts = np.maximum(state.touch_count[clone_idx], 1)[:, None]
        mean_wg = wg / counts
        norms = np.linalg.norm(mean_wg, axis=1, keepdims=True)
        direction = np.where(norms > 0, -mean_wg / np.maximum(norms, 1e-30), 0.0)
        step = 0.5 * cloud.scales()[clone_idx].mean(axis=1, keepdims=True)
        new_parts["positions"].append(cloud.positions[clone_idx] + direction * step)
        new_parts["rotations"].append(cloud.rotations[clone_idx].copy())
        new_parts["log_scales"].append(cloud.log_scales[clone_idx].copy())
        new_parts["opacity_logits"].append(cloud.opacity_logits[clone_idx].copy())
        new_parts["color_coeffs"].append(cloud.color_coeffs[clone_idx].copy())

    split_idx = np.flatnonzero(split_mask & ~prune_mask)
    if split_idx.size:
        from .raster import quat_to_rotmat

        parent_scales = cloud.scales()[split_idx]
        rot = quat_to_rotmat(cloud.rotations[split_idx]
                             / np.linalg.norm(cloud.rotations[split_idx],
                                              axis=1, keepdims=True))
        for _ in range(2):
            local = rng.standard_normal((split_idx.size, 3)) * parent_scales
            offset = np.einsum("kij,kj->ki", rot, local)
            new_parts["positions"].append(cloud.positions[split_idx] + offset)
            new_parts["rotations"].append(cloud.rotations[split_idx].copy())
            new_parts["log_scales"].append(
                cloud.log_scales[split_idx] - np.log(split_factor))
            new_parts["opacity_logits"].append(cloud.opacity_logits[split_idx].copy())
            new_parts["color_coeffs"].append(cloud.color_coeffs[split_idx].copy())

    n_new = sum(part.shape[0] for part in new_parts["positions"]) if \
        new_parts["positions"] else 0

    for key, arr in cloud.attribute_arrays().items():
        pieces = [arr[keep_indices]] + new_parts[key]
        setattr(cloud, key, np.concatenate(pieces, axis=0))

    plan = ResizePlan(
        keep_indices=keep_indices,
        n_new=n_new,
        n_cloned=int(clone_idx.size),
        n_split=int(split_idx.size),
        n_pruned=int(prune_mask.sum()),
    )
    state.reset_stats(cloud.count)
    return plan


def reset_opacity(cloud: GaussianCloud, ceiling: float = 0.01) -> None:
    """Clamp every activated opacity down to at most `ceiling` (in place)."""
    ops = cloud.opacities()
    cloud.opacity_logits = inverse_sigmoid(np.minimum(ops, ceiling)).astype(
        cloud.opacity_logits.dtype)
