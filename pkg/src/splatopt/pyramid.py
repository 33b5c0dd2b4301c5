"""Coarse-to-fine training over an intrinsic-rescaled camera pyramid.

Each level divides the focal length and principal point by its factor and
box-filters the target images; training consumes the levels coarse to fine,
with more views per iteration at the coarse levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    BudgetExceedsTotalError,
    Camera,
    OutOfRangeError,
    ResultTooSmallError,
)

MIN_LEVEL_SIZE = 11   # SSIM window


def downscale_camera(camera: Camera, s: int) -> Camera:
    """Camera for a 1/s render target: intrinsics divided by s, extrinsics
    unchanged."""
    if s < 1 or int(s) != s:
        raise ValueError("downsample factor must be a positive integer")
    if s == 1:
        return camera
    width = camera.width // s
    height = camera.height // s
    if width < MIN_LEVEL_SIZE or height < MIN_LEVEL_SIZE:
        raise ResultTooSmallError(
            f"{width}x{height} below the {MIN_LEVEL_SIZE}px floor")
    return Camera(
        rotation=camera.rotation.copy(),
        translation=camera.translation.copy(),
        fx=camera.fx / s, fy=camera.fy / s,
        cx=camera.cx / s, cy=camera.cy / s,
        width=width, height=height, near=camera.near,
    )


def downscale_image(image: np.ndarray, s: int) -> np.ndarray:
    """Area-average each s x s block after cropping to multiples of s."""
    if s < 1 or int(s) != s:
        raise ValueError("downsample factor must be a positive integer")
    if s == 1:
        return image
    h, w = image.shape[:2]
    hc, wc = (h // s) * s, (w // s) * s
    img = image[:hc, :wc]
    return img.reshape(h // s, s, w // s, s, -1).mean(axis=(1, 3))


@dataclass
class PyramidLevel:
    """One training stage: factor, view count, iteration span, and the
    downscaled views."""

    factor: int
    views_per_iter: int
    start_iter: int
    end_iter: int
    cameras: list
    images: list


def build_schedule(total_iters: int, factors, views_per_iter, coarse_iters: int,
                   dataset_size: int):
    """Iteration spans for each pyramid level, coarse to fine.

    Every level except the last gets `coarse_iters` iterations; the final
    (factor 1) level takes the remainder. View counts are capped at the
    dataset size.
    """
    factors = list(factors)
    views = [min(m, dataset_size) for m in views_per_iter]
    n_coarse = len(factors) - 1
    if n_coarse * coarse_iters >= total_iters and n_coarse > 0:
        raise BudgetExceedsTotalError(
            f"{n_coarse} coarse stages x {coarse_iters} iters >= total {total_iters}")
    spans = []
    start = 0
    for i, factor in enumerate(factors):
        end = start + coarse_iters if i < n_coarse else total_iters
        spans.append((factor, views[i], start, end))
        start = end
    return spans


def build_pyramid(train_views, total_iters: int, factors, views_per_iter,
                  coarse_iters: int):
    """Precompute every level's cameras and box-filtered targets.

    train_views: list of (image, camera). Returns a list of PyramidLevel,
    ordered coarse to fine.
    """
    spans = build_schedule(total_iters, factors, views_per_iter,
                           coarse_iters, len(train_views))
    levels = []
    for factor, m, start, end in spans:
        if factor == 1:
            cams = [c for _, c in train_views]
            imgs = [i for i, _ in train_views]
        else:
            cams = [downscale_camera(c, factor) for _, c in train_views]
            imgs = [downscale_image(i, factor) for i, _ in train_views]
        levels.append(PyramidLevel(factor, m, start, end, cams, imgs))
    return levels


def level_for_iteration(levels, iteration: int) -> PyramidLevel:
    """The unique level whose half-open [start, end) span holds `iteration`."""
    for level in levels:
        if level.start_iter <= iteration < level.end_iter:
            return level
    raise OutOfRangeError(f"iteration {iteration} outside the schedule")
